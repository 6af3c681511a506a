from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Sequence

import numpy as np
from dotenv import load_dotenv
from prometheus_client import CollectorRegistry, Counter, Gauge, Histogram, write_to_textfile
from pydantic import ValidationError

from gp_core.diagnostics import rate_report, write_q_csv
from gp_core.fields import ComplexField, read_field_csv, write_density_csv, write_field_csv
from gp_core.grid import PolarGrid, build_grid
from gp_core.model import ModelInstance, build_model, residual_inf
from gp_core.precond import FactorizedMetric, build_metric
from gp_core.riemann import IterTrace, TraceRow, initial_guess, prg_run
from gp_core.spectrum import (
    NEGATIVE_MU_TOL,
    DensePencil,
    KernelBasis,
    MorseBottReport,
    MorseBottViolation,
    RateConstants,
    kernel_basis,
    morse_bott_check,
    ordering_table,
    rate_constants,
    sigma_sweep,
)
from checks import CheckContext, CheckManager

from .models import CommandSummary, ConfigError, RunConfig, load_config
from .run_versioning import RunDirectoryManager
from .storage import LOG_FORMAT, RunStore

APP_DIR = Path(__file__).resolve().parent
PROJECT_ROOT = APP_DIR.parent

load_dotenv(dotenv_path=PROJECT_ROOT / ".env", override=False)

logger = logging.getLogger("gprg")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


# Environment variables
def env(name: str, default: Optional[str] = None) -> Optional[str]:
    return os.getenv(name, default)


def thread_cap() -> int:
    try:
        return max(1, int(env("GP_THREADS", "1")))
    except ValueError:
        raise ConfigError(f"GP_THREADS must be an integer, got '{env('GP_THREADS')}'", ["GP_THREADS"])


def apply_thread_cap(threads: int):
    import numba

    numba.set_num_threads(min(threads, numba.config.NUMBA_NUM_THREADS))


class UsageError(Exception):
    """Missing or unreadable command inputs (exit code 2)"""


class SolverMetrics:
    """Per-run Prometheus collectors, written as a textfile at the end"""

    def __init__(self):
        self.registry = CollectorRegistry()
        self.iterations = Counter("gprg_iterations_total", "P-RG iterations recorded", registry=self.registry)
        self.metric_builds = Counter("gprg_metric_builds_total", "Metric assemblies and factorizations",
                                     ["kind"], registry=self.registry)
        self.energy_increases = Counter("gprg_energy_increase_total", "Iterations where the energy increased",
                                        registry=self.registry)
        self.residual = Gauge("gprg_residual_inf", "Latest max-norm residual", registry=self.registry)
        self.build_seconds = Histogram("gprg_metric_build_seconds", "Metric build time", ["kind"],
                                       registry=self.registry)
        self.iteration_seconds = Histogram(
            "gprg_iteration_seconds", "Wall time between recorded iterations",
            buckets=(1e-4, 5e-4, 1e-3, 5e-3, 1e-2, 5e-2, 0.1, 0.5, 1.0, 5.0),
            registry=self.registry,
        )
        self._last_wall_ms: Optional[float] = None
        self._last_energy: Optional[float] = None

    def observe_row(self, row: TraceRow):
        self.iterations.inc()
        self.residual.set(row.residual_inf)
        if self._last_wall_ms is not None:
            self.iteration_seconds.observe(max(row.wall_ms - self._last_wall_ms, 0.0) / 1e3)
        if self._last_energy is not None and row.energy > self._last_energy:
            self.energy_increases.inc()
        self._last_wall_ms = row.wall_ms
        self._last_energy = row.energy

    def observe_metric(self, metric: FactorizedMetric):
        self.metric_builds.labels(kind=metric.spec.kind).inc()
        self.build_seconds.labels(kind=metric.spec.kind).observe(metric.stats.build_seconds)

    def write(self, path: Path):
        write_to_textfile(str(path), self.registry)


def runs_dir(args: argparse.Namespace, config: RunConfig) -> str:
    return args.out or config.output.directory or env("GP_RUNS_DIR", "runs")


def model_from_config(config: RunConfig, grid: Optional[PolarGrid] = None) -> ModelInstance:
    block = config.model
    grid = grid or build_grid(block.R, block.Nr, block.Ntheta)
    return build_model(grid, block.potential_spec(), omega=block.omega,
                       nonlinearity=block.nonlinearity_model(), K=block.K)


def latest_artifact(base: str, command: str, name: str) -> Path:
    manager = RunDirectoryManager(command, base)
    try:
        return manager.get_version_path() / name
    except ValueError as e:
        raise UsageError(f"{e}; pass the {name} path explicitly") from e


def require_file(path: Path, what: str) -> Path:
    if not path.exists():
        raise UsageError(f"{what} not found: {path}")
    return path


def load_state(config: RunConfig, path: Path) -> ComplexField:
    try:
        phi = read_field_csv(path, R=config.model.R)
    except (KeyError, ValueError) as e:
        raise UsageError(f"Cannot read state {path}: {e}") from e
    grid = phi.grid
    block = config.model
    if (grid.Nr, grid.Ntheta) != (block.Nr, block.Ntheta):
        raise ConfigError(
            f"State {path} is on a {grid.Nr}x{grid.Ntheta} grid, config asks for {block.Nr}x{block.Ntheta}",
            ["model.Nr", "model.Ntheta"],
        )
    return phi


def load_constants(path: Path) -> RateConstants:
    try:
        with open(path) as f:
            payload = json.load(f)
        return RateConstants.model_validate(payload.get("primary", payload))
    except (ValueError, ValidationError) as e:
        raise UsageError(f"Cannot read rate constants {path}: {e}") from e


def spectrum_constants(config: RunConfig, model: ModelInstance, phi: ComplexField, reliable: bool = True,
                       ordering: Optional[str] = None) -> RateConstants:
    spec = config.spectrum
    metric = build_metric(model, phi, spec.precond_spec(ordering))
    kernel = kernel_basis(model, phi, metric, include_rotation=spec.include_rotation)
    return rate_constants(model, phi, metric, kernel, dense_cap=spec.dense_cap,
                          force_iterative=spec.force_iterative, reliable=reliable)


def cmd_solve(config: RunConfig, store: RunStore, metrics: SolverMetrics, args: argparse.Namespace) -> CommandSummary:
    solve = config.solve
    model = model_from_config(config)
    phi0 = initial_guess(model, solve.initial_guess, seed=solve.seed, vortex_m=solve.vortex_m, noise=solve.noise)

    constants: Any = None
    if solve.constants_path:
        constants = load_constants(require_file(Path(solve.constants_path), "Rate constants"))
    elif solve.inline_spectrum:
        def inline_constants(phi: ComplexField) -> RateConstants:
            logger.info("Computing rate constants inline for the optimal step")
            return spectrum_constants(config, model, phi)

        constants = inline_constants

    formats = config.output
    spill = store.path("snapshots") if formats.wants("npz") and solve.snapshot_stride else None
    trace, phi = prg_run(model, phi0, solve.prg_config(), constants=constants,
                         on_row=metrics.observe_row, on_metric=metrics.observe_metric, snapshot_dir=spill)
    trace.metadata.update({"config_hash": config.config_hash(), "seed": solve.seed, "model": model.summary()})

    trace.write_csv(store.claim("trace.csv"))
    write_field_csv(store.claim("field.csv"), phi)
    if spill is not None:
        trace.save_snapshots(store.claim("snapshots.npz"))
        if trace.snapshots.chunks:
            store.claim("snapshots")

    last = trace.last
    result = {
        "status": trace.status,
        "iterations": last.n,
        "energy": last.energy,
        "lambda_tilde": last.lambda_tilde,
        "lambda_p": last.lambda_p,
        "residual_inf": last.residual_inf,
        "energy_increases": len(trace.energy_increases()),
        "mass_norm": phi.mass_norm,
        "snapshots": len(trace.snapshots),
        "model": model.summary(),
        "config": config.model_dump(mode="json"),
        "config_hash": config.config_hash(),
    }
    if isinstance(constants, RateConstants):
        result["constants"] = constants.model_dump()
    store.write_json("run.json", result)

    icon = "✅" if trace.status == "converged" else "⚠️"
    print(f"{icon} solve: {trace.status} after {last.n} iterations, "
          f"E={last.energy:.17g}, residual={last.residual_inf:.3e}")
    return CommandSummary(command="solve", run_dir=str(store.run_dir), status=trace.status,
                          details={k: result[k] for k in ("iterations", "energy", "residual_inf")})


def cmd_spectrum(config: RunConfig, store: RunStore, metrics: SolverMetrics, args: argparse.Namespace) -> CommandSummary:
    spec = config.spectrum
    base = runs_dir(args, config)
    state_path = Path(args.state) if args.state else latest_artifact(base, "solve", "field.csv")
    phi = load_state(config, require_file(state_path, "State file"))
    model = model_from_config(config, grid=phi.grid)

    res = residual_inf(model, phi)
    reliable = res <= spec.converged_threshold
    if not reliable and not args.force:
        raise RuntimeError(
            f"State {state_path} is not converged (residual {res:.3e} > {spec.converged_threshold:.1e}); "
            f"use --force to analyse it anyway"
        )
    if not reliable:
        logger.warning(f"Analysing an unconverged state (residual {res:.3e}); results flagged unreliable")

    report: Optional[MorseBottReport] = None

    def on_metric(metric: FactorizedMetric, kernel: KernelBasis, pencil: Optional[DensePencil]):
        nonlocal report
        metrics.observe_metric(metric)
        if report is not None:
            return
        report = morse_bott_check(model, phi, metric, kernel, q=spec.q, theta_factor=spec.theta_factor,
                                  dense_cap=spec.dense_cap if pencil is not None else 0, pencil=pencil)
        store.write_json("morse_bott.json", report.model_dump())
        eigenvalues = pencil.eigenvalues if pencil is not None else np.asarray(report.eigenvalues)
        store.write_rows("eigenvalues.csv", ["index", "eigenvalue"],
                         ((k, float(v)) for k, v in enumerate(eigenvalues)))

    rows = ordering_table(model, phi, spec.precond_spec(), orderings=spec.orderings, dense_cap=spec.dense_cap,
                          force_iterative=spec.force_iterative, include_rotation=spec.include_rotation,
                          reliable=reliable, on_metric=on_metric, raise_violation=False)
    negative = [r for r in rows if r.mu <= NEGATIVE_MU_TOL]
    violation = MorseBottViolation(f"Smallest constrained quotient is negative (mu={negative[0].mu:.3e}, "
                                   f"ordering={negative[0].ordering})", negative[0]) if negative else None

    if spec.sigma_sweep and violation is None:
        sweep = sigma_sweep(model, phi, spec.sigma_sweep, spec.precond_spec(), dense_cap=spec.dense_cap,
                            workers=thread_cap(), include_rotation=spec.include_rotation)
        rows.extend(c.model_copy(update={"reliable": reliable}) for c in sweep)

    primary = rows[0]
    store.write_json("constants.json", {
        "primary": primary.model_dump(),
        "rows": [r.model_dump() for r in rows],
        "state": str(state_path),
        "residual_inf": res,
        "reliable": reliable,
        "morse_bott_consistent": report.consistent if report else None,
    })
    for row in rows:
        print(f"   {row.kind} ordering={row.ordering} sigma0={row.sigma0}: "
              f"mu={row.mu:.6e} L={row.L:.10f} kappa={row.kappa:.6g}")
    if violation is not None:
        raise violation

    icon = "✅" if report and report.consistent else "⚠️"
    print(f"{icon} spectrum: kappa={primary.kappa:.6g}, rate_opt={primary.rate_opt:.6f}, "
          f"zero modes {report.count_below if report else '?'} / kernel {primary.deflation_dim}")
    return CommandSummary(command="spectrum", run_dir=str(store.run_dir),
                          status="reliable" if reliable else "unreliable",
                          details={"mu": primary.mu, "L": primary.L, "kappa": primary.kappa})


def cmd_rates(config: RunConfig, store: RunStore, metrics: SolverMetrics, args: argparse.Namespace) -> CommandSummary:
    base = runs_dir(args, config)
    trace_path = Path(args.trace) if args.trace else latest_artifact(base, "solve", "trace.csv")
    constants_path = Path(args.constants) if args.constants else latest_artifact(base, "spectrum", "constants.json")
    require_file(trace_path, "Trace file")
    require_file(constants_path, "Rate constants")

    try:
        trace = IterTrace.read_csv(trace_path)
    except ValueError as e:
        raise UsageError(f"Cannot read trace {trace_path}: {e}") from e
    constants = load_constants(constants_path)

    phi_g: Optional[ComplexField] = None
    metric: Optional[FactorizedMetric] = None
    snapshots = trace_path.parent / "snapshots.npz"
    state_path = Path(args.state) if args.state else trace_path.parent / "field.csv"
    if snapshots.exists() and state_path.exists():
        try:
            trace.load_snapshots(snapshots)
        except (FileNotFoundError, KeyError, ValueError) as e:
            raise UsageError(f"Cannot read snapshots {snapshots}: {e}") from e
        phi_g = load_state(config, state_path)
        model = model_from_config(config, grid=phi_g.grid)
        metric = build_metric(model, phi_g, config.spectrum.precond_spec())
        metrics.observe_metric(metric)
    else:
        logger.info("No snapshots next to the trace; reporting energy ratios only")

    rates = config.rates
    report = rate_report(trace, phi_g, metric, constants, tau=rates.tau, window=rates.window,
                         skip_last=rates.skip_last, min_fit_points=rates.min_fit_points)
    write_q_csv(store.claim("q.csv"), report)
    summary = report.model_dump(exclude={"n", "q_e", "q_phi", "orbit_distance"})
    summary.update({"regime": report.regime, "trace": str(trace_path), "constants": str(constants_path),
                    "rate_opt": constants.rate_opt})
    store.write_json("rates.json", summary)

    print(f"✅ rates: regime={report.regime}, Q_E tail={report.q_e_tail}, "
          f"Q_phi tail={report.q_phi_tail}, rho_tau={report.rho_tau}")
    return CommandSummary(command="rates", run_dir=str(store.run_dir), status=report.regime,
                          details={"q_e_tail": report.q_e_tail, "rho_tau": report.rho_tau})


def cmd_check(config: RunConfig, store: RunStore, metrics: SolverMetrics, args: argparse.Namespace) -> CommandSummary:
    fault = env("GP_CHECK_FAULT")
    if fault:
        logger.warning(f"Injected fault active: {fault}")
    try:
        ctx = CheckContext(seed=config.solve.seed, fault=fault)
    except ValueError as e:
        raise UsageError(str(e)) from e
    manager = CheckManager()
    try:
        results = manager.run(ctx, args.filter)
    except ValueError as e:
        raise UsageError(str(e)) from e

    store.write_json("checks.json", [r.to_dict() for r in results])
    width = max(len(f"{r.group}.{r.name}") for r in results)
    print(f"{'check'.ljust(width)}  result  seconds")
    for r in results:
        mark = "PASS" if r.success else "FAIL"
        print(f"{f'{r.group}.{r.name}'.ljust(width)}  {mark}    {r.execution_time:.2f}")
        if not r.success:
            print(f"{''.ljust(width)}  ↳ {r.error}")
    failed = [r for r in results if not r.success]
    if failed:
        raise RuntimeError(f"{len(failed)} of {len(results)} checks failed")
    print(f"✅ check: {len(results)} checks passed")
    return CommandSummary(command="check", run_dir=str(store.run_dir), details={"checks": len(results)})


def cmd_export_density(config: RunConfig, store: RunStore, metrics: SolverMetrics,
                       args: argparse.Namespace) -> CommandSummary:
    base = runs_dir(args, config)
    state_path = Path(args.state) if args.state else latest_artifact(base, "solve", "field.csv")
    phi = load_state(config, require_file(state_path, "State file"))
    write_density_csv(store.claim("density.csv"), phi)
    print(f"✅ export-density: {phi.grid.N} nodes from {state_path}")
    return CommandSummary(command="export-density", run_dir=str(store.run_dir), details={"state": str(state_path)})


COMMANDS: Dict[str, Callable[..., CommandSummary]] = {
    "solve": cmd_solve,
    "spectrum": cmd_spectrum,
    "rates": cmd_rates,
    "check": cmd_check,
    "export-density": cmd_export_density,
}


def run_command(command: str, config: RunConfig, args: argparse.Namespace) -> CommandSummary:
    """Run one subcommand inside a fresh versioned run directory"""
    manager = RunDirectoryManager(command, runs_dir(args, config), keep_count=config.output.keep_count)
    version = manager.start_run(config.config_hash())
    store = RunStore(manager.command_dir / version)
    store.attach_log()
    metrics = SolverMetrics()
    started = time.time()
    try:
        store.write_json("config.json", {"config": config.model_dump(mode="json"),
                                         "config_hash": config.config_hash()})
        logger.info(f"Run {version} of '{command}' in {store.run_dir}")
        summary = COMMANDS[command](config, store, metrics, args)
        if config.output.wants("prom"):
            metrics.write(store.claim("metrics.prom"))
        manager.complete_run(version, {
            "config_hash": config.config_hash(),
            "status": summary.status,
            "elapsed_seconds": time.time() - started,
            "artifacts": sorted(store.artifacts),
            "details": summary.details,
        })
        summary.artifacts = sorted(store.artifacts)
        return summary
    except BaseException:
        if config.output.wants("prom"):
            metrics.write(store.claim("metrics.prom"))
        manager.abort_run(version)
        raise
    finally:
        store.detach_log()


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value config file")
    common.add_argument("--out", help="runs directory (default: output.directory, GP_RUNS_DIR or ./runs)")
    common.add_argument("--seed", type=int, help="override solve.seed")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (repeatable)")

    parser = argparse.ArgumentParser(prog="gprg", description="P-RG ground states of the rotating GP energy")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("solve", parents=[common], help="run the staged P-RG iteration")

    spectrum = sub.add_parser("spectrum", parents=[common], help="rate constants and Morse-Bott check")
    spectrum.add_argument("--state", help="field.csv of a solve run (default: latest)")
    spectrum.add_argument("--force", action="store_true", help="analyse an unconverged state")

    rates = sub.add_parser("rates", parents=[common], help="error ratios and regime classification")
    rates.add_argument("--trace", help="trace.csv (default: latest solve run)")
    rates.add_argument("--constants", help="constants.json (default: latest spectrum run)")
    rates.add_argument("--state", help="reference field.csv for Q_phi (default: next to the trace)")

    check = sub.add_parser("check", parents=[common], help="run the self-check suite")
    check.add_argument("--filter", help="check group (grid, model, solver) or group.name")

    export = sub.add_parser("export-density", parents=[common], help="write |phi|^2 on the grid")
    export.add_argument("--state", help="field.csv of a solve run (default: latest)")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=(env("GP_LOG_LEVEL", "INFO") or "INFO").upper(), format=LOG_FORMAT)

    try:
        overrides = list(args.set)
        if args.seed is not None:
            overrides.append(f"solve.seed={args.seed}")
        config = load_config(args.config, overrides)
        apply_thread_cap(thread_cap())
    except (ConfigError, FileNotFoundError) as e:
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_USAGE

    try:
        run_command(args.command, config, args)
    except (ConfigError, UsageError, FileNotFoundError, ValidationError) as e:
        print(f"❌ {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        print(f"❌ {args.command}: interrupted", file=sys.stderr)
        return EXIT_FAILURE
    except Exception as e:
        logger.exception(f"{args.command} failed")
        print(f"❌ {args.command} failed: {e}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
