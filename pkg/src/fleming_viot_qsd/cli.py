"""CLI commands for fvqsd."""

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Optional

from . import __version__
from .config import EXPERIMENT_NAMES, RunConfig, config_hash, default_data_dir, resolve_config
from .coupling import KappaRow, kappa_trend, sweep_kappa
from .errors import ConfigError, FlemingViotError
from .experiments import ErrorRecord, grid_start, run_experiment
from .gridref import build_grid_kernel, grid_flow, qsd_power_iteration
from .history import RunHistory
from .kernel import StepParams
from .kernel_cache import KernelCache
from .particles import (
    DistanceObserver,
    KillProbabilityObserver,
    ResurrectionObserver,
    SnapshotObserver,
    initial_configuration,
    run_chain,
)
from .persistence import OutputWriter
from .pool import ReplicatePool
from .rng import RngStream
from .validation import run_validation

logger = logging.getLogger(__name__)

RUNS_DIR = Path("runs")

# A stage callback writes its outputs and returns (record count, summary).
Stage = Callable[[OutputWriter, RunConfig], tuple[int, dict[str, Any]]]


def _overrides(args: argparse.Namespace) -> dict[str, Any]:
    """CLI flags as RunConfig field values; unset flags stay None."""
    return {
        "seed": args.seed,
        "preset": args.preset,
        "gammas": None if args.gamma is None else [args.gamma],
        "particles": None if args.particles is None else [args.particles],
        "steps": args.steps,
        "workers": args.workers,
        "out_dir": None if args.out is None else str(args.out),
    }


def _load_config(command: str, args: argparse.Namespace) -> RunConfig:
    return resolve_config(command, args.config, _overrides(args))


def _out_dir(config: RunConfig, digest: str) -> Path:
    if config.out_dir:
        return Path(config.out_dir)
    return RUNS_DIR / f"{config.experiment}-{digest[:12]}"


def _run_and_commit(command: str, config: RunConfig, stage: Stage) -> int:
    """Stage outputs, write the manifest and record the run in the history."""
    digest = config_hash(config)
    out = _out_dir(config, digest)
    history = RunHistory()
    for earlier in history.with_hash(digest, status="complete"):
        logger.info("same configuration completed before in run #%d (%s)", earlier.id, earlier.out_dir)
    run_id = history.start_run(command, digest, config.seed, str(out), config.experiment)
    writer = OutputWriter(out)
    try:
        count, summary = stage(writer, config)
        writer.commit(command, config.to_dict(), digest, [config.seed], summary)
    except Exception as exc:
        writer.discard()
        history.mark_failed(run_id, str(exc))
        raise
    history.mark_complete(run_id, count)

    print(f"=== {config.experiment} ===\n")
    for key, value in summary.items():
        print(f"  {key}: {value}")
    print(f"\n{count} record(s) written to {out}")
    return 0


def _kernel_cache() -> KernelCache:
    return KernelCache(default_data_dir())


def _stage_simulate(writer: OutputWriter, config: RunConfig) -> tuple[int, dict[str, Any]]:
    model = config.build_model()
    gamma = config.gammas[0]
    params = StepParams(gamma, model, config.gamma_max)
    rng = RngStream(config.seed).derive("simulate")
    init = config.initial[0]
    start = initial_configuration(init, config.particles[0], config.dimension, rng.derive("initial"))

    snapshot = SnapshotObserver(steps=[config.steps])
    observers = [KillProbabilityObserver(params), ResurrectionObserver(), snapshot]
    if config.dimension == 1:
        kern = build_grid_kernel(model, gamma, config.n_cells, _kernel_cache())
        flow = grid_flow(grid_start(init, config.n_cells), kern, model, gamma, config.steps)
        observers.append(DistanceObserver([eta.to_measure() for eta in flow], name="w1_oracle"))

    trajectory = run_chain(start, params, config.steps, rng, observers)
    count = writer.stage_csv(
        "trajectory.csv",
        ("step", "time", "observable", "value"),
        ((row.step, row.time, row.observable, row.value) for row in trajectory.rows),
    )
    points = snapshot.snapshots[config.steps]
    header = ("slot", *(f"x{j + 1}" for j in range(config.dimension)))
    writer.stage_csv("snapshot.csv", header, ((i, *p) for i, p in enumerate(points.tolist())))

    summary: dict[str, Any] = {
        "gamma": gamma,
        "particles": config.particles[0],
        "steps": config.steps,
        "total_resurrections": trajectory.total_resurrections,
    }
    w1_oracle = trajectory.values("w1_oracle")
    if w1_oracle.size:
        summary["final_w1_oracle"] = float(w1_oracle[-1])
    return count, summary


def _stage_oracle(writer: OutputWriter, config: RunConfig) -> tuple[int, dict[str, Any]]:
    model = config.build_model()
    gamma = config.gammas[0]
    kern = build_grid_kernel(model, gamma, config.n_cells, _kernel_cache())
    flow = grid_flow(grid_start(config.initial[0], config.n_cells), kern, model, gamma, config.steps)
    count = writer.stage_density("oracle.csv", flow[-1])
    return count, {"gamma": gamma, "steps": config.steps, "n_cells": config.n_cells}


def _stage_qsd(writer: OutputWriter, config: RunConfig) -> tuple[int, dict[str, Any]]:
    model = config.build_model()
    gamma = config.gammas[0]
    kern = build_grid_kernel(model, gamma, config.n_cells, _kernel_cache())
    result = qsd_power_iteration(kern, model, gamma, tol=config.tol)
    count = writer.stage_density("qsd.csv", result.density)
    return count, {
        "gamma": gamma,
        "n_cells": config.n_cells,
        "converged": result.converged,
        "iterations": result.iterations,
        "residual": result.residual,
        "survival_factor": result.survival_factor,
    }


def _stage_kappa(writer: OutputWriter, config: RunConfig) -> tuple[int, dict[str, Any]]:
    if len(config.initial) != 2:
        raise ConfigError("kappa needs exactly two initial laws, e.g. initial = [\"point:0\", \"uniform\"]")
    rows = sweep_kappa(
        config.gammas[0],
        config.particles,
        config.epsilons,
        RngStream(config.seed),
        replicates=config.replicates,
        horizon=config.horizons[0],
        family=config.model,
        dimension=config.dimension,
        model_params=config.model_params,
        initial=tuple(config.initial),
        mode=config.coupling,
        pool=ReplicatePool(config.workers),
    )
    count = writer.stage_csv("kappa.csv", KappaRow.HEADER, (row.as_row() for row in rows))
    trend = kappa_trend(rows)
    return count, {
        "gamma": config.gammas[0],
        "horizon": config.horizons[0],
        "coupling": config.coupling,
        "perturbation": {f"{row.epsilon:g}": row.perturbation for row in rows},
        "status": {f"{row.epsilon:g}": row.status for row in rows},
        "kappa_nonincreasing_in_epsilon": all(trend.values()),
        "nonincreasing_by_n": {str(n): ok for n, ok in trend.items()},
    }


def _stage_experiment(writer: OutputWriter, config: RunConfig) -> tuple[int, dict[str, Any]]:
    result = run_experiment(config.experiment, config, ReplicatePool(config.workers), _kernel_cache())
    count = writer.stage_csv("records.csv", ErrorRecord.HEADER, (r.as_row() for r in result.records))
    for name, density in result.densities.items():
        writer.stage_density(f"{name}.csv", density)
    return count, result.summary


def cmd_simulate(args):
    """Run one particle chain."""
    return _run_and_commit("simulate", _load_config("simulate", args), _stage_simulate)


def cmd_oracle(args):
    """Grid flow of the nonlinear recursion."""
    return _run_and_commit("oracle", _load_config("oracle", args), _stage_oracle)


def cmd_qsd(args):
    """Grid quasi-stationary distribution by power iteration."""
    return _run_and_commit("qsd", _load_config("qsd", args), _stage_qsd)


def cmd_kappa(args):
    """Contraction-rate sweep over N and epsilon."""
    return _run_and_commit("kappa", _load_config("kappa", args), _stage_kappa)


def cmd_experiment(args):
    """Run one of the error-axis experiments."""
    return _run_and_commit("experiment", _load_config(args.name, args), _stage_experiment)


def cmd_validate(args):
    """Run the property suite."""
    results = run_validation(seed=args.seed or 0)
    print("=== fvqsd validate ===\n")
    for result in results:
        mark = "ok  " if result.passed else "FAIL"
        print(f"[{mark}] {result.name}: {result.detail}")
    failed = sum(not r.passed for r in results)
    print(f"\n{len(results) - failed} passed, {failed} failed")
    return 0 if failed == 0 else 1


def cmd_history(args):
    """Show, look up or prune recorded runs."""
    history = RunHistory()
    print("=== fvqsd history ===\n")
    if args.prune is not None:
        print(f"Removed {history.prune(args.prune)} run(s) older than {args.prune} day(s).")
        return 0
    if args.show is not None:
        run = history.get(args.show)
        if run is None:
            print(f"No run #{args.show}.")
            return 1
        for key, value in vars(run).items():
            print(f"  {key}: {value if value is not None else '-'}")
        return 0
    runs = history.with_hash(args.hash) if args.hash else history.recent(args.limit)
    if not runs:
        print("No runs yet." if not args.hash else f"No runs with hash {args.hash}.")
        return 0
    for run in runs:
        print(run.summary_line())
        if run.status == "failed" and run.message:
            print(f"      {run.message}")
    return 0


def cmd_cache(args):
    """List or clear cached grid kernels."""
    cache = _kernel_cache()
    print("=== fvqsd cache ===\n")
    if args.action == "clear":
        print(f"Removed {cache.clear()} cached kernel(s) from {cache.kernels_dir}")
        return 0
    entries = cache.list_entries()
    for key in entries:
        print(f"  {key}")
    print(f"\n{len(entries)} cached kernel(s) in {cache.kernels_dir}")
    return 0


def _run_options() -> argparse.ArgumentParser:
    """Flags shared by every command that resolves a RunConfig."""
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument("--config", type=Path, help="TOML run configuration")
    parent.add_argument("--seed", type=int, help="root seed (unsigned 64-bit)")
    parent.add_argument("--out", type=Path, help="output directory (default runs/<name>-<hash>)")
    size = parent.add_mutually_exclusive_group()
    size.add_argument("--quick", dest="preset", action="store_const", const="quick", help="quick preset")
    size.add_argument("--paper", dest="preset", action="store_const", const="paper", help="full-size preset")
    parent.add_argument("--gamma", type=float, help="time step")
    parent.add_argument("--particles", type=int, help="number of particles N")
    parent.add_argument("--steps", type=int, help="number of time steps")
    parent.add_argument("--workers", type=int, help="replicate worker threads")
    return parent


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fvqsd",
        description="Fleming-Viot particle approximation of quasi-stationary distributions",
    )
    parser.add_argument("--version", action="version", version=f"fvqsd {__version__}")
    parser.add_argument(
        "-v", "--verbose",
        action="count",
        default=0,
        help="log INFO with -v, DEBUG with -vv",
    )
    subparsers = parser.add_subparsers(dest="command", help="Commands")
    run_options = _run_options()

    simulate_parser = subparsers.add_parser("simulate", parents=[run_options], help="Run one particle chain")
    simulate_parser.set_defaults(func=cmd_simulate)

    oracle_parser = subparsers.add_parser("oracle", parents=[run_options], help="Grid flow eta_m")
    oracle_parser.set_defaults(func=cmd_oracle)

    qsd_parser = subparsers.add_parser("qsd", parents=[run_options], help="Grid QSD by power iteration")
    qsd_parser.set_defaults(func=cmd_qsd)

    kappa_parser = subparsers.add_parser("kappa", parents=[run_options], help="Contraction-rate sweep")
    kappa_parser.set_defaults(func=cmd_kappa)

    experiment_parser = subparsers.add_parser("experiment", parents=[run_options], help="Run an experiment")
    experiment_parser.add_argument("name", choices=EXPERIMENT_NAMES, help="Experiment name")
    experiment_parser.set_defaults(func=cmd_experiment)

    validate_parser = subparsers.add_parser("validate", help="Run the property suite")
    validate_parser.add_argument("--seed", type=int, help="seed of the check generators")
    validate_parser.set_defaults(func=cmd_validate)

    history_parser = subparsers.add_parser("history", help="Show recent runs")
    history_parser.add_argument("-n", "--limit", type=int, default=20, help="Number of runs")
    lookup = history_parser.add_mutually_exclusive_group()
    lookup.add_argument("--show", type=int, metavar="ID", help="Show every field of one run")
    lookup.add_argument("--hash", metavar="PREFIX", help="Runs whose config hash starts with PREFIX")
    lookup.add_argument("--prune", type=int, metavar="DAYS", help="Delete finished runs older than DAYS")
    history_parser.set_defaults(func=cmd_history)

    cache_parser = subparsers.add_parser("cache", help="Manage the grid kernel cache")
    cache_parser.add_argument("action", choices=["list", "clear"], help="List or delete cached kernels")
    cache_parser.set_defaults(func=cmd_cache)

    return parser


def _configure_logging(verbosity: int) -> None:
    level = logging.WARNING if verbosity == 0 else logging.INFO if verbosity == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s: %(message)s")


def main(argv: Optional[list[str]] = None) -> int:
    """Main CLI entry point."""
    parser = build_parser()
    args = parser.parse_args(argv)

    if not args.command:
        parser.print_help()
        return 1

    _configure_logging(args.verbose)
    try:
        return args.func(args)
    except FlemingViotError as exc:
        print(f"Error: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
