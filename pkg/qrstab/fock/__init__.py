"""
Truncated Fock-space oracle.

Every operator of the analysis is realized as a matrix on N levels per mode
(q = a + a^dag, p = -i(a - a^dag), ordered q1, p1, q2, p2), so that the
identities and inequalities used by the certificate can be checked by brute
force, and the perturbed system can be integrated as a GKSL master equation.
"""

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import linalg
from scipy.special import eval_genlaguerre, gammaln

from qrstab import (
    DEFAULT_TOLERANCES,
    CutoffLeak,
    InvalidParameter,
    MissingParameter,
    NonCanonicalField,
    NonCanonicalTheta,
    NumericalFailure,
    ShapeMismatch,
    SymmetryViolation,
    Tolerances,
    TraceDrift,
)
from qrstab.lmi import StabilityCertificate, gronwall_envelope
from qrstab.system import QuantumLinearSystem, canonical_theta
from qrstab.weyl import (
    PerturbationEnvelope,
    TrigPerturbation,
    active_mask,
    active_terms,
    to_spectrum,
    z_atoms,
    zz_spectrum,
)

logger = logging.getLogger(__name__)

MIN_CUTOFF = 8
MAX_MODES = 2
DEFAULT_INTERIOR_FRACTION = 0.6
TOP_FRACTION = 0.1


def default_cutoff(modes: int) -> int:
    return 40 if modes == 1 else 12


class FockSpace:
    """Tensor product of `modes` oscillators truncated to `cutoff` levels each."""

    def __init__(self, modes: int, cutoff: int = None):
        if modes not in range(1, MAX_MODES + 1):
            raise ShapeMismatch(f"the Fock oracle supports 1 or 2 modes, got {modes}")
        if cutoff is None:
            cutoff = default_cutoff(modes)
        if cutoff < MIN_CUTOFF:
            raise ValueError(f"cutoff must be at least {MIN_CUTOFF}, got {cutoff}")
        self.__modes = int(modes)
        self.__cutoff = int(cutoff)
        self.__quadratures = None
        self.__levels = np.stack(np.unravel_index(np.arange(self.dim), (self.__cutoff,) * self.__modes), axis=1)

    @property
    def modes(self) -> int:
        return self.__modes

    @property
    def cutoff(self) -> int:
        return self.__cutoff

    @property
    def dim(self) -> int:
        return self.__cutoff ** self.__modes

    @property
    def n(self) -> int:
        return 2 * self.__modes

    @property
    def levels(self) -> np.ndarray:
        """Occupation number of every mode, one row per basis state."""
        return self.__levels

    @property
    def quadratures(self) -> np.ndarray:
        if self.__quadratures is None:
            self.__quadratures = _quadratures(self)
        return self.__quadratures

    def embed(self, operator: np.ndarray, mode: int) -> np.ndarray:
        factors = [np.eye(self.__cutoff)] * self.__modes
        factors[mode] = operator
        result = factors[0]
        for factor in factors[1:]:
            result = np.kron(result, factor)
        return result

    def interior_indices(self, fraction: float = DEFAULT_INTERIOR_FRACTION) -> np.ndarray:
        """Basis states whose every mode sits below floor(fraction * cutoff)."""
        if not 0 < fraction <= 1:
            raise ValueError(f"interior fraction must lie in (0, 1], got {fraction}")
        limit = max(1, math.floor(fraction * self.__cutoff))
        return np.flatnonzero(np.all(self.__levels < limit, axis=1))

    def top_indices(self, fraction: float = TOP_FRACTION) -> np.ndarray:
        """Basis states with at least one mode in its top levels."""
        width = max(1, math.ceil(fraction * self.__cutoff))
        return np.flatnonzero(np.any(self.__levels >= self.__cutoff - width, axis=1))

    def __repr__(self):
        return f"FockSpace(modes={self.__modes}, cutoff={self.__cutoff})"


def lowering(cutoff: int) -> np.ndarray:
    return np.diag(np.sqrt(np.arange(1, cutoff, dtype=float)), 1).astype(complex)


def _quadratures(space: FockSpace) -> np.ndarray:
    a = lowering(space.cutoff)
    q = a + a.conj().T
    p = -1j * (a - a.conj().T)
    ops = []
    for mode in range(space.modes):
        ops.append(space.embed(q, mode))
        ops.append(space.embed(p, mode))
    return np.array(ops)


def build_quadratures(space: FockSpace, theta=None, tol: Tolerances = DEFAULT_TOLERANCES) -> np.ndarray:
    """
    Quadrature matrices X_1..X_n, shape (n, D, D).

    Raises:
        NonCanonicalTheta: theta is given and differs from diag(S2, ..., S2)
    """
    if theta is not None:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (space.n, space.n):
            raise ShapeMismatch(f"theta must be {space.n}x{space.n} for {space}, got {theta.shape}")
        if not np.allclose(theta, canonical_theta(space.modes), rtol=0.0, atol=tol.symmetry):
            raise NonCanonicalTheta("the Fock oracle needs theta = diag(S2, ..., S2)")
    return space.quadratures


def displacement(alpha: complex, cutoff: int) -> np.ndarray:
    """
    Truncated matrix elements <m|D(alpha)|n> of exp(alpha a^dag - conj(alpha) a),
    exact for every retained m, n.
    """
    m, n = np.indices((cutoff, cutoff))
    lo = np.minimum(m, n)
    hi = np.maximum(m, n)
    x = abs(alpha) ** 2
    base = np.where(m >= n, alpha, -np.conj(alpha))
    prefactor = np.exp(0.5 * (gammaln(lo + 1) - gammaln(hi + 1)) - 0.5 * x)
    return prefactor * base ** (hi - lo) * eval_genlaguerre(lo, hi - lo, x)


def weyl_operator(lam, space: FockSpace) -> np.ndarray:
    """Truncation of W(lam) = exp(i lam^T X), per mode D(alpha) with alpha = -lam_p + i lam_q."""
    lam = np.asarray(lam, dtype=float).reshape(-1)
    if lam.shape != (space.n,):
        raise ShapeMismatch(f"frequency must have {space.n} entries, got {lam.shape}")
    result = None
    for mode in range(space.modes):
        lam_q, lam_p = lam[2 * mode], lam[2 * mode + 1]
        factor = displacement(complex(-lam_p, lam_q), space.cutoff)
        result = factor if result is None else np.kron(result, factor)
    return result


def hermitize(matrix: np.ndarray) -> np.ndarray:
    return 0.5 * (matrix + matrix.conj().T)


def _sin_operator(lam, phi: float, space: FockSpace) -> np.ndarray:
    """sin(lam^T X + phi) = (e^{i phi} W(lam) - e^{-i phi} W(-lam)) / 2i."""
    w = weyl_operator(lam, space)
    return hermitize((np.exp(1j * phi) * w - np.exp(-1j * phi) * w.conj().T) / 2j)


def operator_of_trig(p: TrigPerturbation, space: FockSpace, method: str = "weyl") -> np.ndarray:
    """
    H1 = sum_k r_k cos(lambda_k^T X + phi_k).

    `method="weyl"` sums exact truncated Weyl operators; `method="eig"` applies
    cos to the Hermitian eigendecomposition of the truncated lambda^T X.
    """
    H = np.zeros((space.dim, space.dim), dtype=complex)
    X = space.quadratures
    for term in active_terms(p):
        if term.lam.shape != (space.n,):
            raise ShapeMismatch(f"term frequency must have {space.n} entries, got {term.lam.shape}")
        if method == "weyl":
            w = weyl_operator(term.lam, space)
            H += 0.5 * term.r * (np.exp(1j * term.phi) * w + np.exp(-1j * term.phi) * w.conj().T)
        elif method == "eig":
            K = np.einsum("j,jxy->xy", term.lam, X) + term.phi * np.eye(space.dim)
            w, V = linalg.eigh(K)
            H += term.r * (V * np.cos(w)) @ V.conj().T
        else:
            raise ValueError(f"unknown evaluation method {method!r}")
    if not np.all(np.isfinite(H)):
        raise NumericalFailure("perturbation Hamiltonian has non-finite entries")
    return hermitize(H)


def commutator_Z(H1: np.ndarray, X_ops: np.ndarray) -> np.ndarray:
    """Z_j = i[H1, X_j]."""
    return np.array([1j * (H1 @ X - X @ H1) for X in X_ops])


def closed_form_Z(p: TrigPerturbation, theta, space: FockSpace) -> np.ndarray:
    """Z = sum_k -2 r_k theta lambda_k sin(lambda_k^T X + phi_k), shape (n, D, D)."""
    Z = np.zeros((space.n, space.dim, space.dim), dtype=complex)
    for atom in z_atoms(p, theta):
        Z += np.einsum("j,xy->jxy", atom.coeff, _sin_operator(atom.lam, atom.phi, space))
    return Z


def zz_operator(htilde, theta, space: FockSpace) -> np.ndarray:
    """Z Z^T assembled as 4 theta [sum_atoms C W(f)] theta, shape (n, n, D, D)."""
    theta = np.asarray(theta, dtype=float)
    inner = np.zeros((space.n, space.n, space.dim, space.dim), dtype=complex)
    for coeff, freq in htilde.atoms:
        inner += np.einsum("ab,xy->abxy", coeff, weyl_operator(freq, space))
    return 4.0 * np.einsum("ja,abxy,bl->jlxy", theta, inner, theta)


def xx_blocks(space: FockSpace) -> np.ndarray:
    """X X^T as an n x n array of truncated products X_j X_l."""
    X = space.quadratures
    return np.einsum("jxz,lzy->jlxy", X, X)


def envelope_blocks(envelope: PerturbationEnvelope, p: TrigPerturbation, theta, space: FockSpace,
                    scale: float = 1.0) -> np.ndarray:
    """mu1 sum_k Gamma_k X X^T Gamma_k^T + mu0 I - Z Z^T with every Gamma_k multiplied by `scale`."""
    gammas = scale * np.array(envelope.gammas)
    blocks = envelope.mu1 * np.einsum("kja,abxy,klb->jlxy", gammas, xx_blocks(space), gammas)
    blocks = blocks.astype(complex)
    identity = np.eye(space.dim)
    for j in range(space.n):
        blocks[j, j] += envelope.mu0 * identity
    return blocks - zz_operator(zz_spectrum(to_spectrum(p), theta), theta, space)


def function_order_check(f: Callable, g: Callable, K: np.ndarray, tol: float = 1e-10) -> bool:
    """Whether g(K) - f(K) is positive semi-definite, through the spectrum of K."""
    w = linalg.eigvalsh(K)
    fw, gw = f(w), g(w)
    scale = max(1.0, float(np.max(np.abs(fw), initial=0.0)), float(np.max(np.abs(gw), initial=0.0)))
    return bool(np.min(gw - fw) >= -tol * scale)


def block_positivity_sample(
        blocks: np.ndarray,
        trials: int = 1000,
        interior_fraction: float = DEFAULT_INTERIOR_FRACTION,
        seed: int = 42,
        space: FockSpace = None,
        tol: Tolerances = DEFAULT_TOLERANCES) -> tuple[float, bool]:
    """
    Randomized superpositivity test: smallest eigenvalue of u* L u over random
    complex unit vectors u, compressed to the interior levels.

    Args:
        blocks: array of shape (n, n, D, D) with L_jk^dag = L_kj
        space: gives the per-mode interior; without it the lowest
            interior_fraction * D basis states are used
    Returns:
        (min_value, passed) with passed = min_value >= -tol.block_positivity * scale
    """
    blocks = np.asarray(blocks)
    n, _, D, _ = blocks.shape
    if space is not None:
        interior = space.interior_indices(interior_fraction)
    else:
        interior = np.arange(max(1, math.floor(interior_fraction * D)))
    compressed = blocks[:, :, interior][:, :, :, interior]
    scale = max(1.0, float(np.max(np.abs(compressed), initial=0.0)))
    adjoint = np.conj(np.swapaxes(np.swapaxes(compressed, 0, 1), 2, 3))
    if np.max(np.abs(compressed - adjoint), initial=0.0) > 1e3 * tol.hermitian * scale:
        raise SymmetryViolation("blocks", "block matrix of operators is not Hermitian (L_jk^dag != L_kj)")

    min_value = math.inf
    for child in np.random.SeedSequence(seed).spawn(trials):
        rng = np.random.default_rng(child)
        u = rng.standard_normal(n) + 1j * rng.standard_normal(n)
        u /= np.linalg.norm(u)
        op = hermitize(np.einsum("j,k,jkxy->xy", u.conj(), u, compressed))
        min_value = min(min_value, float(linalg.eigvalsh(op)[0]))
    passed = min_value >= -tol.block_positivity * scale
    logger.debug("block positivity: %d trials, min=%.3e scale=%.3e passed=%s", trials, min_value, scale, passed)
    return min_value, passed


def canonical_field(M, J, tol: Tolerances = DEFAULT_TOLERANCES) -> tuple[np.ndarray, np.ndarray]:
    """
    Rotate the field so that J becomes diag(S2, ..., S2): returns (U^T M, U)
    with J = U diag(S2, ...) U^T.

    Raises:
        NonCanonicalField: J is not orthogonal
    """
    M, J = np.asarray(M, dtype=float), np.asarray(J, dtype=float)
    m = J.shape[0]
    target = canonical_theta(m // 2)
    if np.allclose(J, target, rtol=0.0, atol=tol.symmetry):
        return M, np.eye(m)
    if not np.allclose(J @ J.T, np.eye(m), rtol=0.0, atol=1e3 * tol.symmetry):
        raise NonCanonicalField("J must be orthogonal to pair field quadratures into jump operators")
    T, U = linalg.schur(J, output="real")
    for k in range(0, m, 2):
        if T[k, k + 1] < 0:
            U[:, [k, k + 1]] = U[:, [k + 1, k]]
    if not np.allclose(U.T @ J @ U, target, rtol=0.0, atol=1e3 * tol.symmetry):
        raise NonCanonicalField("real Schur form of J is not diag(S2, ..., S2)")
    logger.info("rotated field basis to canonical J")
    return U.T @ M, U


def jump_operators(M, X_ops: np.ndarray) -> list[np.ndarray]:
    """c_j = (M X)_{2j-1} + i (M X)_{2j} for a canonical J."""
    L = np.einsum("ra,axy->rxy", np.asarray(M, dtype=float), X_ops)
    return [L[2 * j] + 1j * L[2 * j + 1] for j in range(L.shape[0] // 2)]


def vacuum(space: FockSpace) -> np.ndarray:
    rho = np.zeros((space.dim, space.dim), dtype=complex)
    rho[0, 0] = 1.0
    return rho


def coherent(space: FockSpace, betas: Sequence[complex]) -> np.ndarray:
    """Density matrix of the product coherent state |beta_1, ..., beta_modes>."""
    if len(betas) != space.modes:
        raise ShapeMismatch(f"need one amplitude per mode, got {len(betas)}")
    psi = None
    for beta in betas:
        column = displacement(complex(beta), space.cutoff)[:, 0]
        psi = column if psi is None else np.kron(psi, column)
    psi = psi / np.linalg.norm(psi)
    return np.outer(psi, psi.conj())


def validate_density(rho: np.ndarray, tol: Tolerances = DEFAULT_TOLERANCES) -> np.ndarray:
    rho = np.asarray(rho, dtype=complex)
    if np.max(np.abs(rho - rho.conj().T)) > tol.hermitian:
        raise NumericalFailure("density matrix is not Hermitian")
    if abs(np.trace(rho) - 1.0) > tol.trace:
        raise NumericalFailure(f"density matrix trace is {np.trace(rho).real:.12g}")
    if linalg.eigvalsh(rho)[0] < -tol.psd:
        raise NumericalFailure("density matrix is not positive semi-definite")
    return rho


@dataclass(frozen=True)
class FockModel:
    space: FockSpace
    X_ops: np.ndarray
    H0_op: np.ndarray
    H1_op: np.ndarray
    L_ops: tuple
    rho: np.ndarray
    field_rotation: np.ndarray = field(repr=False, default=None)
    first_moment_residual: float = 0.0

    @property
    def H(self) -> np.ndarray:
        return self.H0_op + self.H1_op

    def effective_hamiltonian(self, perturbed: bool = True) -> np.ndarray:
        H = self.H if perturbed else self.H0_op
        decay = sum((c.conj().T @ c for c in self.L_ops), np.zeros_like(H))
        return H - 0.5j * decay

    def generator(self, rho: np.ndarray, perturbed: bool = True) -> np.ndarray:
        return _apply_generator(rho, self.effective_hamiltonian(perturbed), self.L_ops)


def _apply_generator(rho: np.ndarray, H_eff: np.ndarray, jumps) -> np.ndarray:
    out = -1j * (H_eff @ rho - rho @ H_eff.conj().T)
    for c in jumps:
        out += c @ rho @ c.conj().T
    return out


def expectations(rho: np.ndarray, ops: np.ndarray) -> np.ndarray:
    return np.einsum("xy,...yx->...", rho, ops)


def _generator_first_moment(model: FockModel, A: np.ndarray) -> float:
    betas = (0.5 + 0.25j, -0.3 + 0.4j)[:model.space.modes]
    rho = coherent(model.space, betas)
    means = expectations(rho, model.X_ops).real
    drift = expectations(model.generator(rho, perturbed=False), model.X_ops).real
    expected = A @ means
    return float(np.linalg.norm(drift - expected) / max(1.0, np.linalg.norm(expected)))


def build_fock_model(
        sys: QuantumLinearSystem,
        p: TrigPerturbation = (),
        space: FockSpace = None,
        rho0=None,
        method: str = "weyl",
        tol: Tolerances = DEFAULT_TOLERANCES) -> FockModel:
    """
    Matrix realization of the system: quadratures, H0 = 1/2 X^T R X, H1 and the
    jump operators paired from the coupling rows of M X.

    Raises:
        NonCanonicalTheta, NonCanonicalField
        NumericalFailure: an operator is not Hermitian, rho0 is not a density
            matrix, or the generator misses d<X>/dt = A<X>
    """
    if sys.n % 2 or sys.n // 2 > MAX_MODES:
        raise ShapeMismatch(f"the Fock oracle supports n in (2, 4), got n={sys.n}")
    if space is None:
        space = FockSpace(sys.n // 2)
    elif space.n != sys.n:
        raise ShapeMismatch(f"{space} has {space.n} quadratures, system has n={sys.n}")
    X = build_quadratures(space, sys.theta, tol)
    M, rotation = canonical_field(sys.M, sys.J, tol)

    H0 = hermitize(0.5 * np.einsum("jk,jxz,kzy->xy", sys.R, X, X))
    H1 = operator_of_trig(p, space, method)
    for name, op in (("H0", H0), ("H1", H1)):
        scale = max(1.0, float(np.max(np.abs(op))))
        if np.max(np.abs(op - op.conj().T)) > tol.hermitian * scale:
            raise NumericalFailure(f"{name} is not Hermitian")

    rho = vacuum(space) if rho0 is None else validate_density(rho0, tol)
    if rho.shape != (space.dim, space.dim):
        raise ShapeMismatch(f"rho0 must be {space.dim}x{space.dim}, got {rho.shape}")
    model = FockModel(space=space, X_ops=X, H0_op=H0, H1_op=H1, L_ops=tuple(jump_operators(M, X)),
                      rho=rho, field_rotation=rotation)
    residual = _generator_first_moment(model, sys.A)
    if residual > tol.first_moment:
        raise NumericalFailure(f"generator misses d<X>/dt = A<X> (relative residual {residual:.3e})")
    logger.debug("built %s: %d jump operators, first-moment residual %.3e", space, len(model.L_ops), residual)
    return replace(model, first_moment_residual=residual)


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray
    P: np.ndarray
    means: np.ndarray
    trace_error: np.ndarray
    leak: np.ndarray
    V: np.ndarray = None
    envelope: np.ndarray = None
    certificate: StabilityCertificate = field(repr=False, default=None)

    @property
    def violation(self) -> float:
        """max_t V(t) - envelope(t); negative while the bound holds."""
        if self.V is None:
            return math.nan
        return float(np.max(self.V - self.envelope))

    @property
    def stationary_V(self) -> float:
        """Mean of V over the last tenth of the grid."""
        if self.V is None:
            return math.nan
        tail = max(1, len(self.V) // 10)
        return float(np.mean(self.V[-tail:]))

    def to_csv(self, path: str | Path):
        n = self.P.shape[1]
        header = ["t", "V", "envelope"] + [f"P_{j + 1}{k + 1}" for j in range(n) for k in range(n)] + ["trace_error"]
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(header)
            for i, t in enumerate(self.times):
                V = "" if self.V is None else repr(float(self.V[i]))
                bound = "" if self.envelope is None else repr(float(self.envelope[i]))
                row = [repr(float(t)), V, bound] + [repr(float(x)) for x in self.P[i].reshape(-1)]
                writer.writerow(row + [repr(float(self.trace_error[i]))])


def _rk4_step(rho, dt, H_eff, jumps):
    k1 = _apply_generator(rho, H_eff, jumps)
    k2 = _apply_generator(rho + 0.5 * dt * k1, H_eff, jumps)
    k3 = _apply_generator(rho + 0.5 * dt * k2, H_eff, jumps)
    k4 = _apply_generator(rho + dt * k3, H_eff, jumps)
    return rho + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def stable_step(model: FockModel, dt_max: float) -> float:
    """dt = min(dt_max, 2.5 / (2 ||H|| + 2 sum ||c_j||^2))."""
    bound = 2.0 * np.linalg.norm(model.H, 2) + 2.0 * sum(np.linalg.norm(c, 2) ** 2 for c in model.L_ops)
    return dt_max if bound == 0 else min(dt_max, 2.5 / bound)


def lindblad_evolve(
        sys: QuantumLinearSystem,
        p: TrigPerturbation = (),
        space: FockSpace = None,
        rho0=None,
        t_grid=None,
        cert: StabilityCertificate = None,
        dt_max: float = 0.01,
        tol: Tolerances = DEFAULT_TOLERANCES,
        model: FockModel = None) -> Trajectory:
    """
    Integrate d rho/dt = -i[H0 + H1, rho] + sum_j D[c_j] rho with fixed-step RK4
    and record P = Re Tr(rho X X^T) and <X> on `t_grid`.

    Raises:
        TraceDrift: |Tr rho - 1| exceeds tol.trace_drift before renormalization
        CutoffLeak: population of the top Fock levels exceeds tol.cutoff_leak
        NumericalFailure: the state became non-finite
    """
    if model is None:
        model = build_fock_model(sys, p, space, rho0, tol=tol)
    space = model.space
    times = np.linspace(0.0, 5.0, 501) if t_grid is None else np.asarray(t_grid, dtype=float)
    if times.ndim != 1 or times.size == 0 or times[0] < 0 or np.any(np.diff(times) <= 0):
        raise ValueError("t_grid must be a non-empty ascending grid of non-negative times")

    H_eff = model.effective_hamiltonian()
    jumps = model.L_ops
    dt = stable_step(model, dt_max)
    XX = xx_blocks(space)
    top = space.top_indices()
    logger.info("integrating %s over [%.3g, %.3g] with dt=%.3e", space, times[0], times[-1], dt)

    rho = model.rho.copy()
    P, means, trace_error, leak = [], [], [], []
    for i, t in enumerate(times):
        if i > 0:
            steps = max(1, math.ceil((t - times[i - 1]) / dt - 1e-9))
            h = (t - times[i - 1]) / steps
            for _ in range(steps):
                rho = _rk4_step(rho, h, H_eff, jumps)
        trace = np.trace(rho)
        if not np.all(np.isfinite(rho)):
            raise NumericalFailure(f"state became non-finite at t={t:.6g}")
        error = abs(trace - 1.0)
        if error > tol.trace_drift:
            raise TraceDrift(float(t), float(error))
        rho = hermitize(rho / trace)
        population = float(np.sum(np.diag(rho).real[top]))
        if population > tol.cutoff_leak:
            raise CutoffLeak(float(t), population, space.cutoff)
        P.append(expectations(rho, XX).real)
        means.append(expectations(rho, model.X_ops).real)
        trace_error.append(error)
        leak.append(population)

    P = np.array(P)
    V = bound = None
    if cert is not None:
        V = np.einsum("jk,tjk->t", cert.Pi, P)
        bound = gronwall_envelope(cert, float(V[0]), times - times[0])
    return Trajectory(times=times, P=P, means=np.array(means), trace_error=np.array(trace_error),
                      leak=np.array(leak), V=V, envelope=bound, certificate=cert)


def first_moment_residual(trajectory: Trajectory, A) -> float:
    """max_t ||d<X>/dt - A<X>|| / max_t ||A<X>||, by central differences."""
    A = np.asarray(A, dtype=float)
    derivative = np.gradient(trajectory.means, trajectory.times, axis=0, edge_order=2)
    expected = trajectory.means @ A.T
    scale = float(np.max(np.linalg.norm(expected, axis=1)))
    residual = float(np.max(np.linalg.norm(derivative - expected, axis=1)))
    return residual / scale if scale > 0 else residual


def dissipation_residual(trajectory: Trajectory, cert: StabilityCertificate = None, gamma: float = None) -> float:
    """max_t (dV/dt + gamma V - <Pi, B B^T> - (mu0/mu1) Tr Pi); non-positive when the inequality holds."""
    cert = cert or trajectory.certificate
    if cert is None or trajectory.V is None:
        raise ValueError("dissipation residual needs a trajectory recorded with a certificate")
    gamma = cert.gamma if gamma is None else float(gamma)
    V = np.einsum("jk,tjk->t", cert.Pi, trajectory.P)
    derivative = np.gradient(V, trajectory.times, edge_order=2)
    return float(np.max(derivative + gamma * V - cert.constant))


@dataclass(frozen=True)
class IdentityChecks:
    ccr: float
    commutator: float
    zz_assembly: float
    function_order: bool
    hermitian: float
    tol: Tolerances = field(repr=False, default=DEFAULT_TOLERANCES)

    @property
    def results(self) -> dict:
        return {
            "ccr": (self.ccr, self.ccr <= self.tol.ccr),
            "commutator": (self.commutator, self.commutator <= self.tol.identity),
            "zz_assembly": (self.zz_assembly, self.zz_assembly <= self.tol.identity),
            "function_order": (float(self.function_order), self.function_order),
            "hermitian": (self.hermitian, self.hermitian <= self.tol.hermitian),
        }

    @property
    def passed(self) -> bool:
        return all(ok for _, ok in self.results.values())


def _compress(ops: np.ndarray, interior: np.ndarray) -> np.ndarray:
    return ops[..., interior[:, None], interior[None, :]]


def _relative(difference: np.ndarray, reference: np.ndarray) -> float:
    error = float(np.max(np.abs(difference), initial=0.0))
    scale = float(np.max(np.abs(reference), initial=0.0))
    return error / scale if scale > 0 else error


def _padded_reference_zz(terms, theta, space: FockSpace, interior: np.ndarray) -> np.ndarray:
    """
    Z Z^T on the interior of `space`, with the intermediate sum taken over a
    space of twice the cutoff so that the product drops no relevant levels.
    """
    padded = FockSpace(space.modes, 2 * space.cutoff)
    rows = np.ravel_multi_index(space.levels[interior].T, (padded.cutoff,) * space.modes)
    Z = closed_form_Z(terms, theta, padded)
    return np.einsum("jxz,lzy->jlxy", Z[:, rows, :], Z[:, :, rows])


def identity_checks(
        theta,
        p: TrigPerturbation,
        space: FockSpace,
        interior_fraction: float = DEFAULT_INTERIOR_FRACTION,
        omegas: Sequence[float] = None,
        tol: Tolerances = DEFAULT_TOLERANCES) -> IdentityChecks:
    """
    Brute-force residuals, each on the interior levels:
      ccr           [X_j, X_k] - 2i theta_jk on levels <= cutoff/2
      commutator    i[H1, X] against -2 sum r_k theta lambda_k sin(lambda_k^T X + phi_k)
      zz_assembly   the Z Z^T assembly from the convolved spectrum against Z Z^T
      function_order  sin^2 z <= z^2 and sin^2(z + phi) <= (1+omega_k) z^2 + (1+1/omega_k) phi^2
      hermitian     largest anti-Hermitian part among X_j and H1

    `omegas` holds one splitting parameter per term of `p` (default 1).
    """
    theta = np.asarray(theta, dtype=float)
    X = build_quadratures(space, theta, tol)
    mask = active_mask(p)
    terms = [term for term, keep in zip(p, mask) if keep]
    if omegas is None:
        omegas = (1.0,) * len(p)
    if len(omegas) < len(p):
        raise MissingParameter(f"need one omega per term, got {len(omegas)} for {len(p)} terms")
    if any(not w > 0 for w in omegas):
        raise InvalidParameter(f"every omega must be strictly positive, got {tuple(omegas)}")
    omegas = [w for w, keep in zip(omegas, mask) if keep]

    half = space.interior_indices(0.5)
    commutators = np.einsum("jxz,kzy->jkxy", X, X) - np.einsum("kxz,jzy->jkxy", X, X)
    expected = 2j * np.einsum("jk,xy->jkxy", theta, np.eye(space.dim))
    ccr = float(np.max(np.abs(_compress(commutators - expected, half))))

    interior = space.interior_indices(interior_fraction)
    H1 = operator_of_trig(terms, space)
    Z = closed_form_Z(terms, theta, space)
    commutator = _relative(_compress(commutator_Z(H1, X) - Z, interior), _compress(Z, interior))

    ZZ = _padded_reference_zz(terms, theta, space, interior)
    assembled = zz_operator(zz_spectrum(to_spectrum(terms), theta), theta, space)
    zz_assembly = _relative(_compress(assembled, interior) - ZZ, ZZ)

    order = True
    for term, omega in zip(terms, omegas):
        K = np.einsum("j,jxy->xy", term.lam, X)
        order &= function_order_check(lambda z: np.sin(z) ** 2, np.square, K)
        order &= function_order_check(
            lambda z, phi=term.phi: np.sin(z + phi) ** 2,
            lambda z, phi=term.phi, w=omega: (1.0 + w) * z ** 2 + (1.0 + 1.0 / w) * phi ** 2,
            K,
        )

    hermitian = max(float(np.max(np.abs(op - op.conj().T))) for op in list(X) + [H1])
    checks = IdentityChecks(ccr=ccr, commutator=commutator, zz_assembly=zz_assembly,
                            function_order=bool(order), hermitian=hermitian, tol=tol)
    logger.info("identity checks on %s: %s", space, {k: v[0] for k, v in checks.results.items()})
    return checks
