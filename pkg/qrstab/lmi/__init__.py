"""
Feasibility of the LMI

    A^T Pi + Pi A + sum_{k=0}^d Gamma_k^T Pi Gamma_k + gamma Pi <= 0,    Gamma_0 = sqrt(mu1) I

through the vectorized Lyapunov-plus-Kraus operator K, resolvent construction of
Pi and the mean-square bounds it implies.

Vectorization is column stacking: vec(A X B) = (B^T (x) A) vec(X).
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np
from scipy import linalg, optimize

from qrstab import (
    DEFAULT_TOLERANCES,
    AllInfeasible,
    IndefinitePi,
    Infeasible,
    InvalidParameter,
    NumericalFailure,
    QRStabError,
    ShapeMismatch,
    Tolerances,
)
from qrstab.system import QuantumLinearSystem
from qrstab.weyl import (
    EnvelopeBuilder,
    FreeParameters,
    PerturbationEnvelope,
    TrigPerturbation,
    envelope_trig,
    envelope_with_error,
)

logger = logging.getLogger(__name__)


def vec(matrix: np.ndarray) -> np.ndarray:
    return np.asarray(matrix).reshape(-1, order="F")


def unvec(vector: np.ndarray, n: int) -> np.ndarray:
    return np.asarray(vector).reshape((n, n), order="F")


def lmi_matrix(A: np.ndarray, envelope: PerturbationEnvelope, Pi: np.ndarray, gamma: float = 0.0) -> np.ndarray:
    """A^T Pi + Pi A + sum_{k=0}^d Gamma_k^T Pi Gamma_k + gamma Pi, evaluated directly."""
    result = A.T @ Pi + Pi @ A + gamma * Pi
    for g in envelope.all_gammas():
        result = result + g.T @ Pi @ g
    return result


@dataclass(frozen=True)
class SylvesterOperatorMatrix:
    K: np.ndarray
    A: np.ndarray
    envelope: PerturbationEnvelope

    @property
    def n(self) -> int:
        return self.A.shape[0]

    def apply(self, Pi: np.ndarray) -> np.ndarray:
        return unvec(self.K @ vec(Pi), self.n)


def operator_matrix(A, envelope: PerturbationEnvelope) -> SylvesterOperatorMatrix:
    """K = I (x) A^T + A^T (x) I + sum_{k=0}^d Gamma_k^T (x) Gamma_k^T."""
    A = np.asarray(A, dtype=float)
    n = A.shape[0]
    if A.shape != (n, n):
        raise ShapeMismatch(f"A must be square, got {A.shape}")
    if envelope.n != n:
        raise ShapeMismatch(f"envelope is {envelope.n}x{envelope.n}, drift is {n}x{n}")
    identity = np.eye(n)
    K = np.kron(identity, A.T) + np.kron(A.T, identity)
    for g in envelope.all_gammas():
        K += np.kron(g.T, g.T)
    return SylvesterOperatorMatrix(K=K, A=A, envelope=envelope)


def decay_margin(K: SylvesterOperatorMatrix) -> float:
    """gamma* = -max Re eig(K); the LMI is feasible for every gamma in (0, gamma*)."""
    try:
        eigenvalues = linalg.eigvals(K.K)
    except (linalg.LinAlgError, ValueError) as e:
        raise NumericalFailure(f"eigensolver failed on the operator matrix: {e}") from e
    if not np.all(np.isfinite(eigenvalues)):
        raise NumericalFailure("operator matrix has non-finite eigenvalues")
    return float(-np.max(eigenvalues.real))


@dataclass(frozen=True)
class StabilityCertificate:
    Pi: np.ndarray
    gamma: float
    mu1: float
    mu0: float
    decay_margin: float
    ms_bound: float
    pi_bbt: float
    lmi_residual: float
    envelope: PerturbationEnvelope = field(repr=False, default=None)

    @property
    def constant(self) -> float:
        """<Pi, B B^T> + (mu0 / mu1) Tr Pi."""
        return self.gamma * self.ms_bound

    @property
    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(self.Pi)[0])

    @property
    def second_moment_bound(self) -> float:
        """Upper limit of E(X^T X) <= V / lambda_min(Pi)."""
        return self.ms_bound / self.min_eigenvalue

    def weighted_mean_square(self, P: np.ndarray) -> float:
        """V = <Pi, P>."""
        return float(np.sum(self.Pi * P))

    def summary(self) -> dict:
        return {
            "Pi": self.Pi.tolist(),
            "gamma": self.gamma,
            "gamma_star": self.decay_margin,
            "ms_bound": self.ms_bound,
            "second_moment_bound": self.second_moment_bound,
            "min_eigenvalue_Pi": self.min_eigenvalue,
            "lmi_residual": self.lmi_residual,
        }


def mean_square_bound(Pi: np.ndarray, B: np.ndarray, gamma: float, mu0: float, mu1: float) -> tuple[float, float]:
    """(1/gamma)(<Pi, B B^T> + (mu0/mu1) Tr Pi), together with <Pi, B B^T>."""
    pi_bbt = float(np.sum(Pi * (B @ B.T)))
    return (pi_bbt + (mu0 / mu1) * float(np.trace(Pi))) / gamma, pi_bbt


def checked_Q(Q, n: int, tol: Tolerances = DEFAULT_TOLERANCES) -> np.ndarray:
    """Identity when Q is None, else Q itself once it is n x n symmetric positive definite."""
    Q = np.eye(n) if Q is None else np.asarray(Q, dtype=float)
    if Q.shape != (n, n):
        raise ShapeMismatch(f"Q must be {n}x{n}, got {Q.shape}")
    if np.max(np.abs(Q - Q.T), initial=0.0) > tol.symmetry * max(1.0, float(np.max(np.abs(Q)))) \
            or np.linalg.eigvalsh(Q)[0] <= 0:
        raise InvalidParameter("Q must be symmetric positive definite")
    return Q


def solve_certificate(
        sys: QuantumLinearSystem,
        envelope: PerturbationEnvelope,
        gamma: float = None,
        Q=None,
        tol: Tolerances = DEFAULT_TOLERANCES,
        K: SylvesterOperatorMatrix = None) -> StabilityCertificate:
    """
    Solve (K + gamma I) vec(Pi) = -vec(Q) and package the certificate.

    Args:
        gamma: decay rate, default half the decay margin
        Q: symmetric positive definite right-hand side, default identity

    Raises:
        Infeasible: the decay margin is not positive or gamma >= margin
        IndefinitePi: the resolvent solution is not positive definite
        InvalidParameter: gamma is not positive or Q is not symmetric positive definite
    """
    n = sys.n
    if K is None:
        K = operator_matrix(sys.A, envelope)
    margin = decay_margin(K)
    if margin <= 0:
        raise Infeasible(margin)
    if gamma is None:
        gamma = 0.5 * margin
    gamma = float(gamma)
    if not gamma > 0:
        raise InvalidParameter(f"gamma must be positive, got {gamma}")
    if gamma >= margin:
        raise Infeasible(margin, gamma)

    Q = checked_Q(Q, n, tol)

    try:
        solution = linalg.solve(K.K + gamma * np.eye(n * n), -vec(Q))
    except linalg.LinAlgError as e:
        raise NumericalFailure(f"resolvent solve failed: {e}") from e
    Pi = unvec(solution, n)
    Pi = 0.5 * (Pi + Pi.T)

    min_eigenvalue = float(np.linalg.eigvalsh(Pi)[0])
    if min_eigenvalue <= 0:
        raise IndefinitePi(min_eigenvalue)

    residual = float(np.linalg.eigvalsh(lmi_matrix(sys.A, envelope, Pi, gamma))[-1])
    if residual > tol.lmi_residual * float(np.linalg.norm(Pi)):
        raise NumericalFailure(f"LMI residual {residual:.3e} exceeds tolerance after solve")

    ms_bound, pi_bbt = mean_square_bound(Pi, sys.B, gamma, envelope.mu0, envelope.mu1)
    logger.info("certificate: gamma=%.6g gamma*=%.6g ms_bound=%.6g", gamma, margin, ms_bound)
    return StabilityCertificate(
        Pi=Pi, gamma=gamma, mu1=envelope.mu1, mu0=envelope.mu0, decay_margin=margin,
        ms_bound=ms_bound, pi_bbt=pi_bbt, lmi_residual=residual, envelope=envelope,
    )


def single_cosine_lmi(A, theta, lambda0, mu1: float, gamma: float, Pi) -> np.ndarray:
    """
    Reduced LMI for H1 = cos(lambda0^T X):
    A^T Pi + Pi A + (mu1 + gamma) Pi + (4/mu1) ||theta lambda0||_Pi^2 lambda0 lambda0^T.
    """
    A, theta, Pi = (np.asarray(x, dtype=float) for x in (A, theta, Pi))
    lambda0 = np.asarray(lambda0, dtype=float).reshape(-1)
    theta_lam = theta @ lambda0
    weight = float(theta_lam @ Pi @ theta_lam)
    return A.T @ Pi + Pi @ A + (mu1 + gamma) * Pi + (4.0 / mu1) * weight * np.outer(lambda0, lambda0)


class Objective(str, Enum):
    MAX_GAMMA_STAR = "max_gamma_star"
    MIN_MS_BOUND = "min_ms_bound"


@dataclass(frozen=True)
class ScanRow:
    mu1: float
    decay_margin: float
    feasible: bool
    gamma: float = None
    ms_bound: float = None
    reason: str = None


@dataclass(frozen=True)
class ScanResult:
    mu1: float
    certificate: StabilityCertificate
    envelope: PerturbationEnvelope
    table: tuple = ()
    objective: Objective = Objective.MIN_MS_BOUND


def _scan_point(sys: QuantumLinearSystem, builder: EnvelopeBuilder, mu1: float, Q, tol: Tolerances):
    envelope = builder(mu1)
    K = operator_matrix(sys.A, envelope)
    margin = decay_margin(K)
    if margin <= 0:
        return ScanRow(mu1=mu1, decay_margin=margin, feasible=False, reason="non-positive decay margin"), None, envelope
    try:
        certificate = solve_certificate(sys, envelope, 0.5 * margin, Q, tol, K)
    except QRStabError as e:
        return ScanRow(mu1=mu1, decay_margin=margin, feasible=False, reason=str(e)), None, envelope
    row = ScanRow(mu1=mu1, decay_margin=margin, feasible=True, gamma=certificate.gamma, ms_bound=certificate.ms_bound)
    return row, certificate, envelope


def scan_mu1(
        sys: QuantumLinearSystem,
        envelope_builder: EnvelopeBuilder,
        grid: Sequence[float],
        objective: Objective | str = Objective.MIN_MS_BOUND,
        Q=None,
        tol: Tolerances = DEFAULT_TOLERANCES,
        max_workers: int = None) -> ScanResult:
    """
    Evaluate the envelope -> operator -> certificate pipeline on every grid
    point (gamma = gamma*/2) and return the best feasible point.

    Raises:
        InvalidParameter: empty grid or Q not symmetric positive definite
        AllInfeasible: no grid point admits a certificate
    """
    grid = [float(mu1) for mu1 in grid]
    if not grid:
        raise InvalidParameter("mu1 grid is empty")
    objective = Objective(objective)
    Q = checked_Q(Q, sys.n, tol)

    def evaluate(mu1):
        return _scan_point(sys, envelope_builder, mu1, Q, tol)

    if max_workers and max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as executor:
            results = list(executor.map(evaluate, grid))
    else:
        results = [evaluate(mu1) for mu1 in grid]

    table = tuple(row for row, _, _ in results)
    feasible = [(row, certificate, envelope) for row, certificate, envelope in results if certificate is not None]
    for row in table:
        logger.debug("scan mu1=%.6g margin=%.6g feasible=%s", row.mu1, row.decay_margin, row.feasible)
    if not feasible:
        raise AllInfeasible({row.mu1: row.decay_margin for row in table})

    if objective is Objective.MAX_GAMMA_STAR:
        best = max(feasible, key=lambda item: item[0].decay_margin)
    else:
        best = min(feasible, key=lambda item: item[0].ms_bound)
    row, certificate, envelope = best
    return ScanResult(mu1=row.mu1, certificate=certificate, envelope=envelope, table=table, objective=objective)


def gronwall_envelope(cert: StabilityCertificate, V0: float, times) -> np.ndarray:
    """V(t) <= V0 exp(-gamma t) + c (1 - exp(-gamma t)) / gamma."""
    if V0 < 0:
        raise ValueError(f"V0 must be non-negative, got {V0}")
    times = np.asarray(times, dtype=float)
    if np.any(times < 0) or np.any(np.diff(times) < 0):
        raise ValueError("times must be non-negative and ascending")
    decay = np.exp(-cert.gamma * times)
    return V0 * decay + cert.constant * (1.0 - decay) / cert.gamma


def _certified_bound(sys, build, gamma, Q, tol) -> float:
    try:
        return solve_certificate(sys, build(), gamma, Q, tol).ms_bound
    except (QRStabError, ValueError):
        return math.inf


def refine_parameters(
        sys: QuantumLinearSystem,
        p: TrigPerturbation,
        mu1: float,
        params: FreeParameters = None,
        error_part=None,
        sweeps: int = 3,
        bounds: tuple[float, float] = (-6.0, 6.0),
        Q=None,
        tol: Tolerances = DEFAULT_TOLERANCES,
        gamma: float = None) -> tuple[FreeParameters, StabilityCertificate]:
    """
    Coordinate descent over log(omega_k) and log(nu_jk), j < k, minimizing the
    mean-square bound at the fixed decay rate `gamma` (gamma*/2 of each candidate
    when None). Never returns a worse bound than the starting parameters.
    """
    d = len(p) + (1 if error_part is not None else 0)
    if params is None:
        params = FreeParameters.default(d)
    omegas = np.array(params.omegas if params.omegas else (1.0,) * len(p), dtype=float)
    nus = np.array(params.nus if params.nus.shape[0] else np.ones((d, d)), dtype=float)

    def build_for(omega_values, nu_values):
        candidate = FreeParameters(omegas=tuple(omega_values), nus=nu_values)
        if error_part is not None:
            Gamma, mu = error_part
            return lambda: envelope_with_error(p, sys.theta, mu1, Gamma, mu, candidate)
        return lambda: envelope_trig(p, sys.theta, mu1, candidate)

    best = _certified_bound(sys, build_for(omegas, nus), gamma, Q, tol)
    if not math.isfinite(best):
        raise Infeasible(-math.inf)

    coordinates = [("omega", k, None) for k in range(min(len(omegas), len(p)))]
    coordinates += [("nu", j, k) for k in range(d) for j in range(k)]
    for sweep in range(sweeps):
        for kind, a, b in coordinates:
            def objective(log_value):
                trial_omegas, trial_nus = omegas.copy(), nus.copy()
                if kind == "omega":
                    trial_omegas[a] = math.exp(log_value)
                else:
                    trial_nus[a, b] = trial_nus[b, a] = math.exp(log_value)
                return _certified_bound(sys, build_for(trial_omegas, trial_nus), gamma, Q, tol)

            result = optimize.minimize_scalar(objective, bounds=bounds, method="bounded")
            if result.fun < best:
                best = float(result.fun)
                if kind == "omega":
                    omegas[a] = math.exp(result.x)
                else:
                    nus[a, b] = nus[b, a] = math.exp(result.x)
        logger.debug("refinement sweep %d: ms_bound=%.6g", sweep, best)

    refined = FreeParameters(omegas=tuple(omegas), nus=nus)
    certificate = solve_certificate(sys, build_for(omegas, nus)(), gamma, Q, tol)
    return refined, certificate
