# ope_pipeline/cli.py
"""
Command-line interface.

    python -m ope_pipeline ope --env mrp --episodes 300 --horizon 300
    python -m ope_pipeline coverage --env hmp --trials 200 --out results/coverage.csv

Exit codes: 0 success, 2 input error (including usage errors), 3 estimator failure.
"""

import json
import logging
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Callable, Dict, Iterator, List, Optional

import click
import coloredlogs

from ope_pipeline import __version__, settings
from ope_pipeline.bench.config import ExperimentConfig, build_config
from ope_pipeline.bench.results import default_output
from ope_pipeline.bench.runs import adversarial_run, batch_run, generate_dataset, ope_run, sweep_run, tune_run
from ope_pipeline.errors import EstimatorError, InputError
from ope_pipeline.estimation.adversarial_eval import radii_record

logger = logging.getLogger(__name__)

EXIT_INPUT = 2
EXIT_ESTIMATOR = 3


class CliFailure(click.ClickException):
    def __init__(self, message: str, exit_code: int):
        super().__init__(message)
        self.exit_code = exit_code


class OpeGroup(click.Group):
    """Maps library exceptions onto the documented exit codes."""

    def invoke(self, ctx: click.Context):
        try:
            return super().invoke(ctx)
        except InputError as e:
            raise CliFailure(f"input error: {e}", EXIT_INPUT) from e
        except EstimatorError as e:
            raise CliFailure(f"estimator failure: {e}", EXIT_ESTIMATOR) from e


# -------------------------------------------------------------------
# Shared options
# -------------------------------------------------------------------
def _int_grid(ctx: click.Context, param: click.Parameter, value: Optional[str]) -> Optional[List[int]]:
    if value is None:
        return None
    try:
        return [int(x) for x in value.split(",") if x.strip()]
    except ValueError:
        raise click.BadParameter(f"expected an integer or comma-separated integers, got '{value}'") from None


def experiment_options(fn: Callable) -> Callable:
    options = [
        click.option("--env", type=click.Choice(["mrp", "hmp"]), default=None, help="Benchmark environment."),
        click.option("--behavior", default=None, help="Behavior policy: uniform, q<k> or target."),
        click.option("--epsilon", type=float, default=None, help="Exploration of the q<k> behavior policy."),
        click.option("--gamma", type=float, default=None, help=f"Discount (default {settings.DEFAULT_GAMMA})."),
        click.option("--alpha", type=float, default=None, help=f"Error level (default {settings.DEFAULT_ALPHA})."),
        click.option("--episodes", callback=_int_grid, default=None, help="J, or a comma-separated grid."),
        click.option("--horizon", "horizons", callback=_int_grid, default=None, help="T, or a comma-separated grid."),
        click.option("--trials", type=int, default=None),
        click.option("--seed", type=int, default=None),
        click.option("--radii-file", type=click.Path(exists=True, dir_okay=False, path_type=Path), default=None,
                     help="JSON/YAML map {state: radius}; fixes the radii."),
        click.option("--radius", type=float, default=None, help="Uniform fixed radius for every state."),
        click.option("--radius-scale", type=float, default=None,
                     help="Multiplier on the radius schedule (default 0.01 for interval sweeps and batch runs, else 1)."),
        click.option("--cost-file", type=click.Path(exists=True, dir_okay=False, path_type=Path), default=None,
                     help="Ground cost table (JSON Lines); defaults to the normalised state/action distance."),
        click.option("--corrected/--uncorrected", default=True, help="Widen the interval by the correction term."),
        click.option("--clip-values/--no-clip-values", default=None,
                     help="Project value iterates onto [-M, M] (default: on for ci-sweep and coverage)."),
        click.option("--episode-length", type=int, default=None,
                     help="Spread each J*T budget over episodes of this length (adversarial default 50)."),
        click.option("--missing-state", type=click.Choice(["error", "bound"]), default=None),
        click.option("--n-jobs", type=int, default=None, help="joblib workers for trials."),
        click.option("--out", type=click.Path(dir_okay=False, path_type=Path), default=None),
        click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False, path_type=Path),
                     default=None, help="JSON or YAML file overriding the flags."),
        click.option("--record-run", is_flag=True, help="Record the run in the experiment registry."),
    ]
    for option in reversed(options):
        fn = option(fn)
    return fn


def _config(experiment: str, params: Dict[str, Any], **extra) -> ExperimentConfig:
    flags = {k: v for k, v in params.items() if k not in ("config_path", "record_run")}
    flags.update(extra)
    flags["experiment"] = experiment
    return build_config(flags, params.get("config_path"))


@contextmanager
def _maybe_recorded(enabled: bool, cfg: ExperimentConfig) -> Iterator[Dict[str, Any]]:
    if not enabled:
        yield {}
        return
    from backend.api.utils.db_utils import recorded_run

    with recorded_run(cfg.experiment, cfg.env, cfg.record(), source="cli") as slot:
        yield slot
    logger.info(f"[CLI] recorded run {slot['run_id']}")


def _emit(record: Dict[str, Any], out: Optional[Path]) -> None:
    text = json.dumps(record, indent=2, sort_keys=True)
    if out is None:
        click.echo(text)
        return
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text + "\n", encoding="utf-8")
    except OSError as e:
        raise InputError(f"cannot write {out}: {e}") from e
    logger.info(f"[CLI] wrote {out}")


# -------------------------------------------------------------------
# Commands
# -------------------------------------------------------------------
@click.group(cls=OpeGroup)
@click.version_option(__version__, prog_name="ope_pipeline")
@click.option("--quiet", is_flag=True, help="Only warnings and errors; no progress bars.")
@click.option("--log-level", default=None, help=f"Logging level (default {settings.LOG_LEVEL}).")
@click.pass_context
def cli(ctx: click.Context, quiet: bool, log_level: Optional[str]):
    """Robust and optimistic off-policy evaluation for finite MDPs."""
    level = "WARNING" if quiet else (log_level or settings.LOG_LEVEL)
    coloredlogs.install(level=level)
    ctx.obj = {"progress": not quiet}


@cli.command("gen-data")
@experiment_options
@click.option("--perturbed", is_flag=True, help="Simulate the perturbed (data-collection) environment.")
def gen_data(perturbed: bool, **params):
    """Simulate a behavior-policy dataset and write it as JSON Lines."""
    cfg = _config("gen-data", params, perturbed=perturbed or None)
    if cfg.out is None:
        raise InputError("gen-data needs --out")
    with _maybe_recorded(params["record_run"], cfg) as slot:
        record = generate_dataset(cfg, cfg.out)
        slot.update(result=record, output_path=str(cfg.out))
    click.echo(f"{record['transitions']} transitions written to {cfg.out}")


@cli.command("ope")
@experiment_options
@click.option("--data", type=click.Path(exists=True, dir_okay=False, path_type=Path), default=None,
              help="Dataset file; simulated from --episodes/--horizon/--seed when omitted.")
@click.option("--rollouts", type=int, default=None, help="Monte Carlo rollouts of the target as a sanity column.")
def ope(data: Optional[Path], rollouts: Optional[int], **params):
    """Lower/upper bounds and the confidence interval for the optimal target policy."""
    cfg = _config("ope", params, rollouts=rollouts)
    with _maybe_recorded(params["record_run"], cfg) as slot:
        record = ope_run(cfg, data)
        slot.update(result=record, output_path=None if cfg.out is None else str(cfg.out))
    _emit(record, cfg.out)


@cli.command("adversarial")
@experiment_options
@click.option("--data", type=click.Path(exists=True, dir_okay=False, path_type=Path), default=None,
              help="Perturbed-environment dataset; simulated when omitted.")
@click.option("--sweep", is_flag=True, help="Run the trial sweep over the J/T grid instead of one dataset.")
@click.pass_context
def adversarial(ctx: click.Context, data: Optional[Path], sweep: bool, **params):
    """Adversarial value estimate with its asymptotic interval."""
    cfg = _config("adversarial", params)
    with _maybe_recorded(params["record_run"], cfg) as slot:
        if sweep:
            _write_table(ctx, cfg, slot)
            return
        record = adversarial_run(cfg, data)
        slot.update(result=record, output_path=None if cfg.out is None else str(cfg.out))
    _emit(record, cfg.out)


@cli.command("batch-opt")
@experiment_options
@click.option("--data", type=click.Path(exists=True, dir_okay=False, path_type=Path), default=None)
@click.option("--method", type=click.Choice(["robust", "saa"]), default="robust", show_default=True)
@click.option("--sweep", is_flag=True, help="Compare robust and SAA policies over the J/T grid and trials.")
@click.pass_context
def batch_opt(ctx: click.Context, data: Optional[Path], method: str, sweep: bool, **params):
    """Robust (or sample-average) batch policy optimisation."""
    cfg = _config("batch-compare" if sweep else "batch-opt", params)
    with _maybe_recorded(params["record_run"], cfg) as slot:
        if sweep:
            _write_table(ctx, cfg, slot)
            return
        record = batch_run(cfg, method, data)
        slot.update(result=record, output_path=None if cfg.out is None else str(cfg.out))
    _emit(record, cfg.out)


@cli.command("ci-sweep")
@experiment_options
@click.pass_context
def ci_sweep(ctx: click.Context, **params):
    """Normalised L/R and U/R across the J and T grids."""
    cfg = _config("ci-sweep", params)
    with _maybe_recorded(params["record_run"], cfg) as slot:
        _write_table(ctx, cfg, slot)


@cli.command("coverage")
@experiment_options
@click.pass_context
def coverage(ctx: click.Context, **params):
    """Empirical coverage and miss rate of the interval over repeated trials."""
    cfg = _config("coverage", params)
    with _maybe_recorded(params["record_run"], cfg) as slot:
        _write_table(ctx, cfg, slot)


@cli.command("tune-rho")
@experiment_options
def tune_rho(**params):
    """Smallest uniform radius whose adversarial value sits a margin below the future value."""
    cfg = _config("tune-rho", params)
    with _maybe_recorded(params["record_run"], cfg) as slot:
        tuned = tune_run(cfg)
        slot.update(result=tuned.to_record(), output_path=None if cfg.out is None else str(cfg.out))
    if cfg.out is not None:
        # a radii file that --radii-file accepts
        _emit(radii_record(tuned.rho), cfg.out)
    click.echo(json.dumps(tuned.to_record(), indent=2, sort_keys=True))


def _write_table(ctx: click.Context, cfg: ExperimentConfig, slot: Dict[str, Any]) -> None:
    table, summary = sweep_run(cfg, progress=ctx.obj["progress"])
    path = table.write(default_output(cfg.experiment, cfg.out, settings.RESULTS_DIR))
    slot.update(result=summary, output_path=str(path))
    click.echo(f"{summary['rows']} rows ({summary['failed']} failed) written to {path}")


def main() -> None:
    cli(prog_name="ope_pipeline")
