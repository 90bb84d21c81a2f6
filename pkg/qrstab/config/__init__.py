from dataclasses import fields
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator
from yaml import YAMLError, safe_load

from qrstab import DEFAULT_TOLERANCES, ConfigError, Tolerances
from qrstab.lmi import Objective
from qrstab.system import QuantumLinearSystem, build_system
from qrstab.weyl import FreeParameters, TrigTerm


Matrix = list[list[float]]

TOLERANCE_NAMES = {f.name for f in fields(Tolerances)}


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SystemSection(StrictModel):
    theta: Matrix
    R: Matrix
    M: Matrix
    J: Matrix


class TermSpec(StrictModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    r: float = Field(ge=0)
    lam: list[float] = Field(alias="lambda", min_length=1)
    phi: float = 0.0

    def to_term(self) -> TrigTerm:
        return TrigTerm(r=self.r, lam=np.array(self.lam), phi=self.phi)


class ErrorPart(StrictModel):
    Gamma: Matrix
    mu: float = Field(ge=0)


class PerturbationSection(StrictModel):
    terms: list[TermSpec] = []
    error_part: ErrorPart | None = None


class ParametersSection(StrictModel):
    mu1: float | list[float] = 1.0
    gamma: float | None = Field(default=None, gt=0)
    omegas: list[float] | None = None
    nus: Matrix | None = None
    seed: int = 42
    cutoff: int | None = Field(default=None, ge=8)
    objective: Objective = Objective.MIN_MS_BOUND
    refine: bool = False
    t_final: float = Field(default=5.0, gt=0)
    steps: int = Field(default=501, ge=3)
    dt: float = Field(default=0.01, gt=0)
    trials: int = Field(default=1000, ge=1)
    interior_fraction: float = Field(default=0.6, gt=0, le=1)
    Q: Matrix | None = None
    envelope_scale: float = Field(default=1.0, gt=0)

    @field_validator("mu1")
    @classmethod
    def check_mu1(cls, value):
        grid = value if isinstance(value, list) else [value]
        if not grid:
            raise ValueError("mu1 grid is empty")
        if any(not mu1 > 0 for mu1 in grid):
            raise ValueError("mu1 must be positive")
        return value

    @field_validator("omegas")
    @classmethod
    def check_omegas(cls, value):
        if value is not None and any(not w > 0 for w in value):
            raise ValueError("omegas must be positive")
        return value


class OutputsSection(StrictModel):
    report_path: str | None = None
    trajectory_path: str | None = None


class AnalysisConfig(StrictModel):
    system: SystemSection
    perturbation: PerturbationSection = PerturbationSection()
    parameters: ParametersSection = ParametersSection()
    outputs: OutputsSection = OutputsSection()
    tolerances: dict[str, float] = {}

    @field_validator("tolerances")
    @classmethod
    def check_tolerances(cls, value):
        unknown = sorted(set(value) - TOLERANCE_NAMES)
        if unknown:
            raise ValueError(f"unknown tolerance(s): {', '.join(unknown)}")
        if any(not v > 0 for v in value.values()):
            raise ValueError("tolerances must be positive")
        return value

    @property
    def tol(self) -> Tolerances:
        return DEFAULT_TOLERANCES.override(**self.tolerances)

    @property
    def grid(self) -> list[float] | None:
        mu1 = self.parameters.mu1
        return [float(x) for x in mu1] if isinstance(mu1, list) else None

    @property
    def terms(self) -> list[TrigTerm]:
        return [term.to_term() for term in self.perturbation.terms]

    @property
    def error_part(self) -> tuple[np.ndarray, float] | None:
        part = self.perturbation.error_part
        return None if part is None else (np.array(part.Gamma, dtype=float), float(part.mu))

    @property
    def Q(self) -> np.ndarray | None:
        return None if self.parameters.Q is None else np.array(self.parameters.Q, dtype=float)

    def build_system(self) -> QuantumLinearSystem:
        s = self.system
        return build_system(s.theta, s.R, s.M, s.J, self.tol)

    def free_parameters(self) -> FreeParameters | None:
        params = self.parameters
        if params.omegas is None and params.nus is None:
            return None
        d = len(self.perturbation.terms) + (1 if self.perturbation.error_part is not None else 0)
        omegas = params.omegas if params.omegas is not None else [1.0] * len(self.perturbation.terms)
        nus = params.nus if params.nus is not None else np.ones((d, d))
        return FreeParameters(omegas=tuple(omegas), nus=np.array(nus, dtype=float))


def _location(loc) -> str:
    return ".".join(str(part) for part in loc) or "<root>"


def parse_config(data, source: str = "<config>") -> AnalysisConfig:
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: top level must be a mapping, got {type(data).__name__}")
    try:
        return AnalysisConfig.model_validate(data)
    except ValidationError as e:
        problems = "; ".join(f"{_location(err['loc'])}: {err['msg']}" for err in e.errors())
        raise ConfigError(f"{source}: {problems}") from e


def load_config(path: str | Path) -> AnalysisConfig:
    """
    Read a JSON or YAML configuration file.

    Raises:
        ConfigError: unreadable file, syntax error (with line and column) or
            schema violation (with the offending field paths)
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read {path}: {e.strerror or e}") from e
    try:
        data = safe_load(text)
    except YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        where = f"{path}:{mark.line + 1}:{mark.column + 1}" if mark is not None else str(path)
        raise ConfigError(f"{where}: {getattr(e, 'problem', None) or e}") from e
    return parse_config(data, str(path))
