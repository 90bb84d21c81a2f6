"""
Nominal linear quantum stochastic system.

    dX = (AX + Z)dt + B dW,    [X, X^T] = 2i theta,    dW dW^T = (I + iJ)dt

with B = 2 theta M^T and A = 2 theta R - 1/2 B J B^T theta^-1.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from qrstab import (
    DEFAULT_TOLERANCES,
    NotHurwitz,
    NumericalFailure,
    PhysicallyInconsistent,
    ShapeMismatch,
    SingularTheta,
    SymmetryViolation,
    Tolerances,
)

logger = logging.getLogger(__name__)


def as_matrix(value, name: str, shape: tuple[int, int] = None) -> np.ndarray:
    matrix = np.array(value, dtype=float)
    if matrix.ndim != 2:
        raise ShapeMismatch(f"{name} must be a matrix, got an array of shape {matrix.shape}")
    if shape is not None and matrix.shape != shape:
        raise ShapeMismatch(f"{name} must have shape {shape}, got {matrix.shape}")
    if not np.all(np.isfinite(matrix)):
        raise ShapeMismatch(f"{name} contains non-finite entries")
    return matrix


def _check_symmetry(matrix: np.ndarray, name: str, sign: int, tol: float):
    scale = max(1.0, float(np.max(np.abs(matrix), initial=0.0)))
    if np.max(np.abs(matrix - sign * matrix.T), initial=0.0) > tol * scale:
        kind = "symmetric" if sign > 0 else "antisymmetric"
        raise SymmetryViolation(name, f"matrix {name} must be {kind}")


def canonical_theta(modes: int) -> np.ndarray:
    """diag(S2, ..., S2) with S2 = [[0, 1], [-1, 0]]."""
    return np.kron(np.eye(modes), np.array([[0.0, 1.0], [-1.0, 0.0]]))


@dataclass(frozen=True)
class QuantumLinearSystem:
    theta: np.ndarray
    R: np.ndarray
    M: np.ndarray
    J: np.ndarray
    B: np.ndarray
    A: np.ndarray
    theta_condition: float = field(default=1.0, compare=False)

    @property
    def n(self) -> int:
        return self.theta.shape[0]

    @property
    def m(self) -> int:
        return self.J.shape[0]

    @property
    def omega(self) -> np.ndarray:
        return np.eye(self.m) + 1j * self.J

    @property
    def realizability_residual(self) -> float:
        """Frobenius norm of A theta + theta A^T + B J B^T."""
        return float(np.linalg.norm(self.A @ self.theta + self.theta @ self.A.T + self.B @ self.J @ self.B.T))

    @property
    def realizability_bound(self) -> float:
        return 1.0 + float(np.linalg.norm(self.A) * np.linalg.norm(self.theta))

    def summary(self) -> dict:
        return {
            "n": self.n,
            "m": self.m,
            "spectral_abscissa": spectral_abscissa(self.A),
            "realizability_residual": self.realizability_residual,
            "theta_condition": self.theta_condition,
        }


def build_system(theta, R, M, J, tol: Tolerances = DEFAULT_TOLERANCES) -> QuantumLinearSystem:
    """
    Construct the nominal system from (theta, R, M, J).

    Raises:
        ShapeMismatch: incompatible or odd dimensions
        SymmetryViolation: theta or J not antisymmetric, R not symmetric
        SingularTheta: theta numerically singular (relative tolerance)
    """
    theta = as_matrix(theta, "theta")
    n = theta.shape[0]
    if theta.shape != (n, n) or n == 0 or n % 2:
        raise ShapeMismatch(f"theta must be square of even positive order, got {theta.shape}")
    R = as_matrix(R, "R", (n, n))
    M = as_matrix(M, "M")
    m = M.shape[0]
    if M.shape[1] != n:
        raise ShapeMismatch(f"M must have {n} columns, got shape {M.shape}")
    if m == 0 or m % 2:
        raise ShapeMismatch(f"M must have an even positive number of rows, got {m}")
    J = as_matrix(J, "J", (m, m))

    _check_symmetry(theta, "theta", -1, tol.symmetry)
    _check_symmetry(R, "R", +1, tol.symmetry)
    _check_symmetry(J, "J", -1, tol.symmetry)

    singular_values = linalg.svdvals(theta)
    if singular_values[-1] <= tol.theta_singular * singular_values[0]:
        raise SingularTheta(np.inf if singular_values[-1] == 0 else singular_values[0] / singular_values[-1])
    condition = float(singular_values[0] / singular_values[-1])

    B = 2.0 * theta @ M.T
    # B J B^T theta^-1 = (theta^-T (B J B^T)^T)^T
    damping = linalg.solve(theta.T, (B @ J @ B.T).T).T
    A = 2.0 * theta @ R - 0.5 * damping

    system = QuantumLinearSystem(theta=theta, R=R, M=M, J=J, B=B, A=A, theta_condition=condition)
    residual = system.realizability_residual
    if residual > tol.realizability * system.realizability_bound:
        raise NumericalFailure(f"physical realizability identity violated (residual {residual:.3e})")
    logger.debug("built system n=%d m=%d cond(theta)=%.3e residual=%.3e", n, m, condition, residual)
    return system


def spectral_abscissa(A) -> float:
    """max Re(eig(A)); negative for Hurwitz matrices."""
    A = np.asarray(A)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ShapeMismatch(f"spectral abscissa needs a square matrix, got {A.shape}")
    try:
        eigenvalues = linalg.eigvals(A)
    except (linalg.LinAlgError, ValueError) as e:
        raise NumericalFailure(f"eigensolver failed: {e}") from e
    if not np.all(np.isfinite(eigenvalues)):
        raise NumericalFailure("eigensolver returned non-finite eigenvalues")
    return float(np.max(eigenvalues.real))


@dataclass(frozen=True)
class SecondMomentMatrix:
    P: np.ndarray
    theta: np.ndarray

    @property
    def S(self) -> np.ndarray:
        return self.P + 1j * self.theta

    def validate(self, tol: Tolerances = DEFAULT_TOLERANCES) -> "SecondMomentMatrix":
        scale = max(1.0, float(np.linalg.norm(self.P, 2)))
        if np.max(np.abs(self.P - self.P.T), initial=0.0) > tol.psd * scale:
            raise PhysicallyInconsistent("second-moment real part P is not symmetric")
        if np.linalg.eigvalsh(self.P)[0] < -tol.psd * scale:
            raise PhysicallyInconsistent("second-moment real part P is not positive semi-definite")
        if np.linalg.eigvalsh(self.S)[0] < -tol.psd * scale:
            raise PhysicallyInconsistent("P + i theta is not positive semi-definite (uncertainty relation)")
        return self


def lyapunov_solve(A: np.ndarray, C: np.ndarray) -> np.ndarray:
    """
    Solve A S + S A^T + C = 0 by column-stacking vectorization:
    (I (x) A + A (x) I) vec(S) = -vec(C).
    """
    n = A.shape[0]
    identity = np.eye(n)
    operator = np.kron(identity, A) + np.kron(A, identity)
    try:
        vec = linalg.solve(operator, -C.reshape(-1, order="F"))
    except linalg.LinAlgError as e:
        raise NumericalFailure(f"Lyapunov operator is singular: {e}") from e
    return vec.reshape((n, n), order="F")


def nominal_steady_covariance(sys: QuantumLinearSystem, tol: Tolerances = DEFAULT_TOLERANCES) -> SecondMomentMatrix:
    """
    Steady state of dS/dt = AS + SA^T + B Omega B^T (no perturbation).

    Raises:
        PhysicallyInconsistent: B = 0 (the only steady state would be S = 0,
            contradicting Im S = theta), or Im S drifts away from theta
        NotHurwitz: A is not Hurwitz
    """
    if not np.any(sys.B):
        raise PhysicallyInconsistent("B = 0: a nominal steady state cannot carry the CCR matrix theta")
    abscissa = spectral_abscissa(sys.A)
    if abscissa >= 0:
        raise NotHurwitz(abscissa)

    forcing = sys.B @ sys.omega @ sys.B.T
    S = lyapunov_solve(sys.A.astype(complex), forcing)
    S = 0.5 * (S + S.conj().T)
    deviation = float(np.max(np.abs(S.imag - sys.theta)))
    if deviation > tol.theta_consistency * max(1.0, float(np.max(np.abs(sys.theta)))):
        raise PhysicallyInconsistent(
            f"steady covariance imaginary part deviates from theta by {deviation:.3e} "
            f"(cond(theta)={sys.theta_condition:.3e})"
        )
    moments = SecondMomentMatrix(P=S.real.copy(), theta=sys.theta)
    return moments.validate(tol)


def lyapunov_residual(sys: QuantumLinearSystem, moments: SecondMomentMatrix) -> float:
    """Relative residual ||A S + S A^T + B Omega B^T|| / ||B Omega B^T||."""
    forcing = sys.B @ sys.omega @ sys.B.T
    S = moments.S
    return float(np.linalg.norm(sys.A @ S + S @ sys.A.T + forcing) / np.linalg.norm(forcing))
