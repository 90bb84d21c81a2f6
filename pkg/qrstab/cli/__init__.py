import argparse
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
from pydantic import BaseModel

from qrstab import (
    AllInfeasible,
    CutoffLeak,
    Infeasible,
    NotHurwitz,
    PhysicallyInconsistent,
    QRStabError,
    configure_logging,
)
from qrstab.config import AnalysisConfig, load_config
from qrstab.fock import (
    FockSpace,
    block_positivity_sample,
    build_fock_model,
    dissipation_residual,
    envelope_blocks,
    identity_checks,
    lindblad_evolve,
)
from qrstab.lmi import ScanResult, StabilityCertificate, refine_parameters, scan_mu1, solve_certificate
from qrstab.system import QuantumLinearSystem, nominal_steady_covariance
from qrstab.weyl import PerturbationEnvelope, trig_envelope_builder

SCHEMA_VERSION = "1.0"

logger = logging.getLogger(__name__)


class Report(BaseModel):
    schema_version: str = SCHEMA_VERSION
    command: str
    status: str = "ok"
    exit_code: int = 0
    seed: int | None = None
    system: dict | None = None
    envelope: dict | None = None
    certificate: dict | None = None
    diagnosis: dict | None = None
    scan: list[dict] | None = None
    oracle: dict | None = None

    def fail(self, error: Exception, status: str = "error", **details) -> "Report":
        self.status = status
        self.exit_code = getattr(error, "exit_code", 1)
        self.diagnosis = {"error": type(error).__name__, "message": str(error), **details}
        return self

    def to_json(self) -> str:
        return self.model_dump_json(indent=2)


def create_arg_parser():
    parser = argparse.ArgumentParser(
        prog="qrstab",
        description="Robust mean-square stability certificates for quantum stochastic systems",
    )
    parser.add_argument("command", choices=sorted(COMMANDS), help="What to run")
    parser.add_argument("config", type=str, help="Path to a JSON (or YAML) configuration file")
    parser.add_argument("--seed", type=int, help="Seed of the randomized checks (overrides parameters.seed)")
    parser.add_argument("--cutoff", type=int, help="Fock levels per mode (overrides parameters.cutoff)")
    parser.add_argument("--out", "-o", type=str, help="Report path (overrides outputs.report_path); stdout if unset")
    parser.add_argument("--trajectory", "-t", type=str, help="CSV path of the simulated trajectory")
    return parser


def parse_args(args=None):
    parser = create_arg_parser()
    return parser.parse_args(sys.argv[1:] if args is None else args)


def system_summary(sys_: QuantumLinearSystem) -> dict:
    summary = sys_.summary()
    summary["A"] = sys_.A.tolist()
    summary["B"] = sys_.B.tolist()
    try:
        summary["steady_covariance"] = nominal_steady_covariance(sys_).P.tolist()
    except (NotHurwitz, PhysicallyInconsistent) as e:
        summary["steady_covariance"] = None
        summary["steady_covariance_error"] = str(e)
    return summary


def envelope_summary(envelope: PerturbationEnvelope) -> dict:
    params = envelope.params
    return {
        "mu1": envelope.mu1,
        "mu0": envelope.mu0,
        "d": envelope.d,
        "gammas": [g.tolist() for g in envelope.gammas],
        "sigmas": list(envelope.sigmas),
        "omegas": list(params.omegas) if params is not None else None,
        "nus": params.nus.tolist() if params is not None else None,
    }


def _certify(config: AnalysisConfig, report: Report) -> tuple[QuantumLinearSystem, StabilityCertificate]:
    """
    Shared analyze pipeline: system -> envelope -> operator -> certificate,
    scanning mu1 when a grid is configured. Fills the report as it goes.
    """
    tol = config.tol
    sys_ = config.build_system()
    report.system = system_summary(sys_)
    terms = config.terms
    params = config.free_parameters()
    builder = trig_envelope_builder(terms, sys_.theta, params, config.error_part)
    gamma = config.parameters.gamma

    grid = config.grid
    if grid is not None:
        try:
            result: ScanResult = scan_mu1(sys_, builder, grid, config.parameters.objective, config.Q, tol)
        except AllInfeasible as e:
            report.scan = [{"mu1": mu1, "decay_margin": margin, "feasible": False} for mu1, margin in e.margins.items()]
            raise
        report.scan = [asdict(row) for row in result.table]
        mu1, envelope, certificate = result.mu1, result.envelope, result.certificate
        if gamma is not None:
            certificate = solve_certificate(sys_, envelope, gamma, config.Q, tol)
    else:
        mu1 = float(config.parameters.mu1)
        envelope = builder(mu1)
        report.envelope = envelope_summary(envelope)
        certificate = solve_certificate(sys_, envelope, gamma, config.Q, tol)

    if config.parameters.refine:
        params, certificate = refine_parameters(sys_, terms, mu1, params, config.error_part,
                                                Q=config.Q, tol=tol, gamma=gamma)
        envelope = certificate.envelope
    report.envelope = envelope_summary(envelope)
    report.certificate = certificate.summary()
    return sys_, certificate


def _infeasible(report: Report, e: QRStabError) -> Report:
    if isinstance(e, AllInfeasible):
        return report.fail(e, "infeasible", margins=[[mu1, margin] for mu1, margin in e.margins.items()])
    return report.fail(e, "infeasible", decay_margin=e.margin, gamma=e.gamma)


def cmd_analyze(config: AnalysisConfig, command: str = "analyze") -> Report:
    report = Report(command=command, seed=config.parameters.seed)
    try:
        _certify(config, report)
    except (Infeasible, AllInfeasible) as e:
        return _infeasible(report, e)
    except (QRStabError, ValueError) as e:
        return report.fail(e)
    return report


def cmd_scan(config: AnalysisConfig) -> Report:
    if config.grid is None:
        config = config.model_copy(update={
            "parameters": config.parameters.model_copy(update={"mu1": [float(config.parameters.mu1)]}),
        })
    return cmd_analyze(config, "scan")


def _space(config: AnalysisConfig, sys_: QuantumLinearSystem) -> FockSpace:
    return FockSpace(sys_.n // 2, config.parameters.cutoff)


def cmd_simulate(config: AnalysisConfig, trajectory_path: str = None, report_path: str = None) -> Report:
    """
    Without an explicit trajectory path the CSV goes next to the report
    (same stem, .csv suffix). A report on stdout gets no CSV.
    """
    report = Report(command="simulate", seed=config.parameters.seed)
    tol = config.tol
    params = config.parameters
    try:
        sys_, certificate = _certify(config, report)
    except (Infeasible, AllInfeasible) as e:
        return _infeasible(report, e)
    except (QRStabError, ValueError) as e:
        return report.fail(e)

    try:
        space = _space(config, sys_)
        model = build_fock_model(sys_, config.terms, space, tol=tol)
        times = np.linspace(0.0, params.t_final, params.steps)
        trajectory = lindblad_evolve(sys_, config.terms, space, t_grid=times, cert=certificate,
                                     dt_max=params.dt, tol=tol, model=model)
    except CutoffLeak as e:
        return report.fail(e, "cutoff_leak", time=e.time, population=e.population, cutoff=e.cutoff,
                           advice=f"raise --cutoff above {e.cutoff}")
    except (QRStabError, ValueError) as e:
        return report.fail(e)

    path = trajectory_path or config.outputs.trajectory_path
    if not path and report_path:
        path = Path(report_path).with_suffix(".csv")
    if path:
        trajectory.to_csv(path)
        logger.info("trajectory written to %s", path)

    scale = max(1.0, certificate.ms_bound)
    violation = trajectory.violation
    within = violation <= tol.trajectory * scale
    stationary = trajectory.stationary_V
    oracle = {
        "cutoff": space.cutoff,
        "modes": space.modes,
        "first_moment_residual": model.first_moment_residual,
        "V0": float(trajectory.V[0]),
        "max_envelope_violation": violation,
        "within_envelope": within,
        "stationary_V": stationary,
        "stationary_within_bound": stationary <= certificate.ms_bound + tol.trajectory * scale,
        "dissipation_residual": dissipation_residual(trajectory, certificate),
        "max_trace_error": float(np.max(trajectory.trace_error)),
        "max_top_population": float(np.max(trajectory.leak)),
        "trajectory_path": str(path) if path else None,
    }
    steady = report.system.get("steady_covariance")
    if steady is not None:
        oracle["nominal_stationary_V"] = certificate.weighted_mean_square(np.array(steady))
    report.oracle = oracle
    if not within:
        report.status = "envelope_violated"
        report.exit_code = 2
    return report


def cmd_verify(config: AnalysisConfig) -> Report:
    report = Report(command="verify", seed=config.parameters.seed)
    tol = config.tol
    params = config.parameters
    try:
        sys_ = config.build_system()
        report.system = system_summary(sys_)
        space = _space(config, sys_)
        terms = config.terms
        free = config.free_parameters()
        omegas = free.omegas[:len(terms)] if free is not None else None
        checks = identity_checks(sys_.theta, terms, space, params.interior_fraction, omegas, tol=tol)

        builder = trig_envelope_builder(terms, sys_.theta, free, config.error_part)
        mu1 = config.grid[0] if config.grid is not None else float(params.mu1)
        if config.grid is not None:
            try:
                mu1 = scan_mu1(sys_, builder, config.grid, params.objective, config.Q, tol).mu1
            except AllInfeasible:
                logger.info("no feasible mu1 on the grid, verifying the envelope at mu1=%g", mu1)
        envelope = builder(mu1)
        report.envelope = envelope_summary(envelope)
        blocks = envelope_blocks(envelope, terms, sys_.theta, space, params.envelope_scale)
        min_value, positive = block_positivity_sample(blocks, params.trials, params.interior_fraction,
                                                      params.seed, space, tol)
    except (QRStabError, ValueError) as e:
        return report.fail(e)

    results = {name: {"residual": value, "passed": ok} for name, (value, ok) in checks.results.items()}
    report.oracle = {
        "cutoff": space.cutoff,
        "interior_fraction": params.interior_fraction,
        "checks": results,
        "block_positivity": {
            "min_value": min_value,
            "passed": positive,
            "trials": params.trials,
            "envelope_scale": params.envelope_scale,
        },
    }
    if not (checks.passed and positive):
        report.status = "failed"
        report.exit_code = 2
    return report


COMMANDS = {
    "analyze": cmd_analyze,
    "scan": cmd_scan,
    "simulate": cmd_simulate,
    "verify": cmd_verify,
}


def apply_overrides(config: AnalysisConfig, args) -> AnalysisConfig:
    parameters = {}
    if args.seed is not None:
        parameters["seed"] = args.seed
    if args.cutoff is not None:
        parameters["cutoff"] = args.cutoff
    if not parameters:
        return config
    # model_copy skips validation
    merged = config.parameters.model_dump() | parameters
    return config.model_copy(update={"parameters": type(config.parameters).model_validate(merged)})


def write_report(report: Report, path: str | None):
    text = report.to_json()
    if path:
        Path(path).write_text(text + "\n", encoding="utf-8")
        print(f"# report written to {path}", file=sys.stderr)
    else:
        print(text)


def main(argv=None) -> int:
    configure_logging()
    args = parse_args(argv)
    try:
        config = apply_overrides(load_config(args.config), args)
    except QRStabError as e:
        print(f"# error: {e}", file=sys.stderr)
        return e.exit_code
    except ValueError as e:
        print(f"# error: {e}", file=sys.stderr)
        return 1

    report_path = args.out or config.outputs.report_path
    if args.command == "simulate":
        report = cmd_simulate(config, args.trajectory, report_path)
    else:
        report = COMMANDS[args.command](config)
    write_report(report, report_path)
    if report.exit_code:
        print(f"# {args.command}: {report.status} ({report.diagnosis['message'] if report.diagnosis else 'see report'})",
              file=sys.stderr)
    return report.exit_code
