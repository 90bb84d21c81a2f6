"""
Weyl-quantized trigonometric perturbations H1 = sum_k r_k cos(lambda_k^T X + phi_k),
their atomic Fourier spectra and the envelopes (mu1, Gamma_1..Gamma_d, mu0) with

    Z Z^T <= mu1 sum_k Gamma_k X X^T Gamma_k^T + mu0 I

in the superpositive order.
"""

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from qrstab import (
    DEFAULT_TOLERANCES,
    InvalidParameter,
    MissingParameter,
    NonPositiveMu1,
    ShapeMismatch,
    SymmetryViolation,
    Tolerances,
    ZeroFrequencyWarning,
)

logger = logging.getLogger(__name__)

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class TrigTerm:
    r: float
    lam: np.ndarray
    phi: float = 0.0

    def __post_init__(self):
        lam = np.array(self.lam, dtype=float).reshape(-1)
        if not np.all(np.isfinite(lam)):
            raise ShapeMismatch("trigonometric term frequency must be finite")
        if not math.isfinite(self.r) or self.r < 0:
            raise ValueError(f"trigonometric term amplitude must be non-negative, got {self.r}")
        object.__setattr__(self, "r", float(self.r))
        object.__setattr__(self, "lam", lam)
        object.__setattr__(self, "phi", float(self.phi) % TWO_PI)

    @property
    def amplitude(self) -> complex:
        """a_k = r_k exp(i phi_k)."""
        return self.r * complex(math.cos(self.phi), math.sin(self.phi))

    @property
    def is_zero_frequency(self) -> bool:
        return not np.any(self.lam)


TrigPerturbation = Sequence[TrigTerm]


def active_mask(p: TrigPerturbation) -> list[bool]:
    """
    Terms that contribute to Z. Zero amplitudes are dropped silently; zero
    frequencies (constants in H1) are dropped with a ZeroFrequencyWarning.
    """
    mask = []
    for index, term in enumerate(p):
        if term.r == 0:
            logger.debug("dropping zero-amplitude term %d", index)
            mask.append(False)
        elif term.is_zero_frequency:
            message = f"term {index} has zero frequency: it is a constant in H1 and is stripped"
            logger.info(message)
            warnings.warn(message, ZeroFrequencyWarning, stacklevel=3)
            mask.append(False)
        else:
            mask.append(True)
    return mask


def active_terms(p: TrigPerturbation) -> list[TrigTerm]:
    return [term for term, keep in zip(p, active_mask(p)) if keep]


def _check_dimension(p: TrigPerturbation, n: int):
    for term in p:
        if term.lam.shape != (n,):
            raise ShapeMismatch(f"frequency {term.lam} does not match n={n}")


def _merge_atoms(atoms, tol: float):
    """Add coefficients of atoms whose frequencies agree to `tol` (absolute)."""
    merged = []
    for coeff, freq in atoms:
        for slot in merged:
            if np.allclose(slot[1], freq, rtol=0.0, atol=tol):
                slot[0] = slot[0] + coeff
                break
        else:
            merged.append([coeff, freq])
    return [(coeff, freq) for coeff, freq in merged]


@dataclass(frozen=True)
class AtomicSpectrum:
    """h(lambda) = sum coeff * delta(lambda - freq), with h(-lambda) = conj(h(lambda))."""
    atoms: tuple = ()
    tol: float = field(default=DEFAULT_TOLERANCES.frequency_match, compare=False)

    def __post_init__(self):
        atoms = tuple((complex(c), np.array(f, dtype=float).reshape(-1)) for c, f in self.atoms)
        object.__setattr__(self, "atoms", atoms)
        merged = _merge_atoms(atoms, self.tol)
        for coeff, freq in merged:
            partner = [c for c, f in merged if np.allclose(f, -freq, rtol=0.0, atol=self.tol)]
            scale = max(1.0, abs(coeff))
            if not partner or abs(partner[0] - coeff.conjugate()) > 1e-12 * scale:
                raise SymmetryViolation("h", f"spectrum is not Hermitian-symmetric at frequency {freq}")

    def __len__(self):
        return len(self.atoms)


@dataclass(frozen=True)
class MatrixAtomicSpectrum:
    """h~(lambda) = sum C * delta(lambda - freq) with n x n complex coefficients C."""
    atoms: tuple = ()

    def __len__(self):
        return len(self.atoms)


@dataclass(frozen=True)
class ZAtom:
    """Z_k = coeff * sin(lam^T X + phi)."""
    coeff: np.ndarray
    lam: np.ndarray
    phi: float


def to_spectrum(p: TrigPerturbation) -> AtomicSpectrum:
    """Atoms (a_k / 2, lambda_k) and (conj(a_k) / 2, -lambda_k) of every active term."""
    atoms = []
    for term in active_terms(p):
        a = term.amplitude
        atoms.append((0.5 * a, term.lam))
        atoms.append((0.5 * a.conjugate(), -term.lam))
    return AtomicSpectrum(tuple(atoms))


def z_atoms(p: TrigPerturbation, theta) -> list[ZAtom]:
    """Z = sum_k -2 r_k theta lambda_k sin(lambda_k^T X + phi_k)."""
    theta = np.asarray(theta, dtype=float)
    _check_dimension(p, theta.shape[0])
    return [ZAtom(coeff=-2.0 * term.r * theta @ term.lam, lam=term.lam, phi=term.phi) for term in active_terms(p)]


def zz_spectrum(h: AtomicSpectrum, theta, merge: bool = True, tol: Tolerances = DEFAULT_TOLERANCES) -> MatrixAtomicSpectrum:
    """
    Discrete convolution giving h~, so that Z Z^T = 4 theta [sum C W(f)] theta
    with W(f) = exp(i f^T X).
    """
    theta = np.asarray(theta, dtype=float)
    atoms = []
    for c1, f1 in h.atoms:
        for c2, f2 in h.atoms:
            phase = np.exp(1j * float(f2 @ theta @ (f1 + f2)))
            atoms.append((c1 * c2 * phase * np.outer(f1, f2), f1 + f2))
    if merge:
        atoms = _merge_atoms(atoms, tol.frequency_match)
    return MatrixAtomicSpectrum(tuple(atoms))


@dataclass(frozen=True)
class FreeParameters:
    omegas: tuple = ()
    nus: np.ndarray = field(default_factory=lambda: np.ones((0, 0)))

    def __post_init__(self):
        omegas = tuple(float(w) for w in self.omegas)
        nus = np.array(self.nus, dtype=float)
        if nus.size == 0:
            nus = np.ones((0, 0))
        if nus.ndim != 2 or nus.shape[0] != nus.shape[1]:
            raise ShapeMismatch(f"nus must be a square array, got shape {nus.shape}")
        if any(not (w > 0) for w in omegas):
            raise InvalidParameter("every omega must be strictly positive")
        off_diagonal = ~np.eye(nus.shape[0], dtype=bool)
        if np.any(nus[off_diagonal] <= 0):
            raise InvalidParameter("every nu_jk must be strictly positive")
        if np.max(np.abs(nus - nus.T), initial=0.0) > 0:
            raise SymmetryViolation("nus", "nu_jk must equal nu_kj")
        object.__setattr__(self, "omegas", omegas)
        object.__setattr__(self, "nus", nus)

    @classmethod
    def default(cls, d: int) -> "FreeParameters":
        return cls(omegas=(1.0,) * d, nus=np.ones((d, d)))

    @property
    def size(self) -> int:
        return max(len(self.omegas), self.nus.shape[0])

    def subset(self, indices: Sequence[int]) -> "FreeParameters":
        indices = list(indices)
        omegas = tuple(self.omegas[i] for i in indices) if self.omegas else ()
        nus = self.nus[np.ix_(indices, indices)] if self.nus.shape[0] else np.ones((0, 0))
        return FreeParameters(omegas=omegas, nus=nus)


def sigma_coefficients(nus, d: int) -> list[float]:
    """sigma_k = 1 + sum_{j<k} nu_jk + sum_{j>k} 1/nu_jk."""
    if d < 1:
        raise ValueError(f"d must be at least 1, got {d}")
    if isinstance(nus, FreeParameters):
        nus = nus.nus
    nus = np.asarray(nus, dtype=float)
    if d > 1 and (nus.ndim != 2 or nus.shape[0] < d or nus.shape[1] < d):
        raise MissingParameter(f"nus must cover {d} terms, got shape {nus.shape}")
    sigmas = []
    for k in range(d):
        sigma = 1.0
        for j in range(k):
            sigma += nus[j, k]
        for j in range(k + 1, d):
            sigma += 1.0 / nus[j, k]
        sigmas.append(sigma)
    return sigmas


@dataclass(frozen=True)
class PerturbationEnvelope:
    mu1: float
    gammas: tuple
    mu0: float = 0.0
    sigmas: tuple = ()
    params: FreeParameters = None

    def __post_init__(self):
        if not self.mu1 > 0:
            raise NonPositiveMu1(self.mu1)
        gammas = tuple(np.array(g, dtype=float) for g in self.gammas)
        if not gammas:
            raise ValueError("an envelope needs at least one Gamma_k")
        shape = gammas[0].shape
        if len(shape) != 2 or shape[0] != shape[1] or any(g.shape != shape for g in gammas):
            raise ShapeMismatch("every Gamma_k must be square with a common shape")
        object.__setattr__(self, "mu1", float(self.mu1))
        object.__setattr__(self, "mu0", float(self.mu0))
        object.__setattr__(self, "gammas", gammas)

    @property
    def n(self) -> int:
        return self.gammas[0].shape[0]

    @property
    def d(self) -> int:
        return len(self.gammas)

    @property
    def gamma0(self) -> np.ndarray:
        return math.sqrt(self.mu1) * np.eye(self.n)

    def all_gammas(self) -> tuple:
        """Gamma_0, Gamma_1, ..., Gamma_d."""
        return (self.gamma0,) + self.gammas

    def scaled(self, factor: float) -> "PerturbationEnvelope":
        return PerturbationEnvelope(self.mu1, tuple(factor * g for g in self.gammas), self.mu0, self.sigmas, self.params)


def _check_mu1(mu1: float):
    if not mu1 > 0:
        raise NonPositiveMu1(mu1)


def envelope_single_cos(lambda0, theta, mu1: float) -> PerturbationEnvelope:
    """H1 = cos(lambda0^T X): Gamma_1 = 2/sqrt(mu1) theta lambda0 lambda0^T, mu0 = 0."""
    _check_mu1(mu1)
    lambda0 = np.asarray(lambda0, dtype=float).reshape(-1)
    if not np.any(lambda0):
        raise ValueError("lambda0 must be non-zero")
    theta = np.asarray(theta, dtype=float)
    gamma = 2.0 * math.sqrt(1.0 / mu1) * np.outer(theta @ lambda0, lambda0)
    return PerturbationEnvelope(mu1=mu1, gammas=(gamma,), mu0=0.0, sigmas=(1.0,))


EnvelopePart = tuple[float, np.ndarray, float]


def trig_part(term: TrigTerm, theta: np.ndarray, mu1: float, omega: float) -> EnvelopePart:
    """
    (c_k = 1, Phi_k, mu0_k) for one cosine term. With phi_k = 0 the omega -> 0
    limit is used (factor 1 instead of 1 + omega, mu0_k = 0).
    """
    theta_lam = theta @ term.lam
    if term.phi == 0.0:
        factor = 1.0
        mu0 = 0.0
    else:
        factor = 1.0 + omega
        mu0 = 4.0 * term.r ** 2 * term.phi ** 2 * factor / omega * float(theta_lam @ theta_lam)
    phi_matrix = 2.0 * term.r * math.sqrt(factor / mu1) * np.outer(theta_lam, term.lam)
    # with r = 1 and phi = 0 this is bit-for-bit envelope_single_cos
    return 1.0, phi_matrix, mu0


def trig_parts(p: TrigPerturbation, theta, mu1: float, params: FreeParameters = None) -> tuple[list[EnvelopePart], FreeParameters]:
    """
    Per-term envelope parts of the active terms, plus the free parameters
    restricted to those terms.
    """
    parts, params, _ = _trig_parts(p, theta, mu1, params, active_mask(p))
    return parts, params


def _trig_parts(p: TrigPerturbation, theta, mu1: float, params: FreeParameters, mask: list[bool]):
    _check_mu1(mu1)
    theta = np.asarray(theta, dtype=float)
    _check_dimension(p, theta.shape[0])
    if params is None:
        params = FreeParameters.default(len(p))
    if len(params.omegas) < len(p) or (len(p) > 1 and params.nus.shape[0] < len(p)):
        raise MissingParameter(f"free parameters cover {params.size} terms, perturbation has {len(p)}")
    kept = [i for i, keep in enumerate(mask) if keep]
    params = params.subset(kept)
    parts = [trig_part(p[i], theta, mu1, params.omegas[k]) for k, i in enumerate(kept)]
    return parts, params, kept


def combine_envelopes(parts: Sequence[EnvelopePart], mu1: float, nus=None) -> PerturbationEnvelope:
    """Gamma_k = sqrt(sigma_k) c_k Phi_k, mu0 = sum sigma_k c_k^2 mu0_k."""
    _check_mu1(mu1)
    parts = list(parts)
    if not parts:
        raise ValueError("combine_envelopes needs at least one part")
    d = len(parts)
    if nus is None:
        nus = np.ones((d, d))
    sigmas = sigma_coefficients(nus, d)
    gammas = tuple(math.sqrt(s) * c * np.asarray(phi, dtype=float) for s, (c, phi, _) in zip(sigmas, parts))
    mu0 = sum(s * c ** 2 * mu0k for s, (c, _, mu0k) in zip(sigmas, parts))
    return PerturbationEnvelope(mu1=mu1, gammas=gammas, mu0=mu0, sigmas=tuple(sigmas))


def _zero_envelope(theta: np.ndarray, mu1: float, params: FreeParameters) -> PerturbationEnvelope:
    n = theta.shape[0]
    return PerturbationEnvelope(mu1=mu1, gammas=(np.zeros((n, n)),), mu0=0.0, sigmas=(1.0,), params=params)


def envelope_trig(p: TrigPerturbation, theta, mu1: float, params: FreeParameters = None) -> PerturbationEnvelope:
    theta = np.asarray(theta, dtype=float)
    parts, active = trig_parts(p, theta, mu1, params)
    if not parts:
        return _zero_envelope(theta, mu1, active)
    envelope = combine_envelopes(parts, mu1, active.nus if len(parts) > 1 else None)
    return PerturbationEnvelope(envelope.mu1, envelope.gammas, envelope.mu0, envelope.sigmas, active)


def envelope_with_error(p: TrigPerturbation, theta, mu1: float, Gamma, mu: float, params: FreeParameters = None) -> PerturbationEnvelope:
    """
    Trig envelope augmented by an approximation-error part (Phi_{d+1} = Gamma,
    mu0_{d+1} = mu). `params.nus` must then cover d + 1 parts; omegas cover the
    d trig terms.
    """
    theta = np.asarray(theta, dtype=float)
    n = theta.shape[0]
    Gamma = np.asarray(Gamma, dtype=float)
    if Gamma.shape != (n, n):
        raise ShapeMismatch(f"error part Gamma must be {n}x{n}, got {Gamma.shape}")
    d = len(p)
    if params is None:
        params = FreeParameters.default(d + 1)
    if params.nus.shape[0] < d + 1:
        raise MissingParameter(f"nus must cover {d + 1} parts including the error part")
    trig_params = FreeParameters(omegas=params.omegas[:d], nus=params.nus[:d, :d])
    parts, _, kept = _trig_parts(p, theta, mu1, trig_params, active_mask(p))
    kept = kept + [d]
    nus = params.nus[np.ix_(kept, kept)]
    parts = parts + [(1.0, Gamma, float(mu))]
    envelope = combine_envelopes(parts, mu1, nus)
    return PerturbationEnvelope(envelope.mu1, envelope.gammas, envelope.mu0, envelope.sigmas,
                                FreeParameters(omegas=tuple(params.omegas[i] for i in kept[:-1]), nus=nus))


EnvelopeBuilder = Callable[[float], PerturbationEnvelope]


def trig_envelope_builder(p: TrigPerturbation, theta, params: FreeParameters = None, error_part=None) -> EnvelopeBuilder:
    """Closure mu1 -> envelope, as consumed by the mu1 scan."""
    def build(mu1: float) -> PerturbationEnvelope:
        if error_part is not None:
            Gamma, mu = error_part
            return envelope_with_error(p, theta, mu1, Gamma, mu, params)
        return envelope_trig(p, theta, mu1, params)
    return build
