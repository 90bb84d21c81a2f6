"""
Robust mean-square stability certification for open quantum stochastic systems.

Sub-packages:
    qrstab.system   nominal linear system and steady second moments
    qrstab.weyl     trigonometric perturbations, Weyl spectra, envelopes
    qrstab.lmi      Lyapunov-plus-Kraus operator, certificates, scans
    qrstab.fock     truncated Fock-space oracle (master equation, checks)
    qrstab.config   configuration schema
    qrstab.cli      command line front-end
"""

import logging
import os
import sys
from dataclasses import dataclass, replace

from dotenv import load_dotenv

load_dotenv()

ENV_LOG_LEVEL = "QRSTAB_LOG"
LOG_FORMAT = "# %(name)s: %(message)s"

logger = logging.getLogger(__name__)


def configure_logging(level: str | int | None = None) -> int:
    """
    Install a single stderr handler on the package logger.

    The level is taken from `level`, else from the QRSTAB_LOG environment
    variable (name or integer), else WARNING. Returns the level in use.
    """
    if level is None:
        level = os.environ.get(ENV_LOG_LEVEL, "WARNING")
    if isinstance(level, str):
        level = int(level) if level.strip().isdigit() else logging.getLevelName(level.strip().upper())
    if not isinstance(level, int):
        level = logging.WARNING
    root = logging.getLogger(__name__)
    for handler in list(root.handlers):
        root.removeHandler(handler)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root.addHandler(handler)
    root.setLevel(level)
    root.propagate = False
    return level


@dataclass(frozen=True)
class Tolerances:
    # system_core
    theta_singular: float = 1e-10
    realizability: float = 1e-10
    psd: float = 1e-9
    theta_consistency: float = 1e-8
    symmetry: float = 1e-12
    # weyl_perturbation
    frequency_match: float = 1e-12
    # stability_lmi
    lmi_residual: float = 1e-8
    # fock_oracle
    hermitian: float = 1e-12
    trace: float = 1e-10
    trace_drift: float = 1e-6
    cutoff_leak: float = 1e-4
    ccr: float = 1e-8
    identity: float = 1e-6
    block_positivity: float = 1e-6
    first_moment: float = 1e-4
    trajectory: float = 1e-3

    def override(self, **changes) -> "Tolerances":
        return replace(self, **{k: float(v) for k, v in changes.items() if v is not None})


DEFAULT_TOLERANCES = Tolerances()


class QRStabError(Exception):
    """Base class of every error raised by the package."""
    exit_code = 1


class ShapeMismatch(QRStabError, ValueError):
    pass


class SymmetryViolation(QRStabError, ValueError):
    def __init__(self, matrix: str, message: str = None):
        self.matrix = matrix
        super().__init__(message or f"matrix {matrix} violates its symmetry requirement")


class SingularTheta(QRStabError, ValueError):
    def __init__(self, condition: float):
        self.condition = condition
        super().__init__(f"CCR matrix theta is numerically singular (condition number {condition:.3e})")


class NotHurwitz(QRStabError):
    def __init__(self, abscissa: float):
        self.abscissa = abscissa
        super().__init__(f"drift matrix is not Hurwitz (spectral abscissa {abscissa:.6g})")


class PhysicallyInconsistent(QRStabError):
    pass


class NumericalFailure(QRStabError, ArithmeticError):
    pass


class MissingParameter(QRStabError, ValueError):
    pass


class InvalidParameter(QRStabError, ValueError):
    pass


class NonPositiveMu1(QRStabError, ValueError):
    def __init__(self, mu1: float):
        self.mu1 = mu1
        super().__init__(f"mu1 must be positive, got {mu1}")


class Infeasible(QRStabError):
    exit_code = 2

    def __init__(self, margin: float, gamma: float = None):
        self.margin = margin
        self.gamma = gamma
        if gamma is None:
            message = f"LMI infeasible: decay margin {margin:.6g} is not positive"
        else:
            message = f"LMI infeasible for gamma={gamma:.6g}: decay margin is {margin:.6g}"
        super().__init__(message)


class IndefinitePi(QRStabError):
    def __init__(self, min_eigenvalue: float):
        self.min_eigenvalue = min_eigenvalue
        super().__init__(f"solved weight Pi is not positive definite (min eigenvalue {min_eigenvalue:.3e})")


class AllInfeasible(QRStabError):
    exit_code = 2

    def __init__(self, margins: dict):
        self.margins = dict(margins)
        listing = ", ".join(f"mu1={k:.6g}: {v:.6g}" for k, v in self.margins.items())
        super().__init__(f"no feasible grid point ({listing})")


class NonCanonicalTheta(QRStabError, ValueError):
    pass


class NonCanonicalField(QRStabError, ValueError):
    pass


class TraceDrift(QRStabError):
    def __init__(self, time: float, error: float):
        self.time = time
        self.error = error
        super().__init__(f"trace drift {error:.3e} at t={time:.6g}")


class CutoffLeak(QRStabError):
    exit_code = 3

    def __init__(self, time: float, population: float, cutoff: int):
        self.time = time
        self.population = population
        self.cutoff = cutoff
        super().__init__(
            f"population {population:.3e} reached the top Fock levels at t={time:.6g}; "
            f"raise the cutoff above {cutoff}"
        )


class ConfigError(QRStabError, ValueError):
    pass


class ZeroFrequencyWarning(UserWarning):
    """A trigonometric term with zero frequency was removed (it commutes with X)."""
