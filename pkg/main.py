"""
Command-line entry point: simulate datasets, fit estimators, solve single
selection programs and run benchmark experiments.
"""

import json
import logging
from enum import Enum
from pathlib import Path
from typing import List, Optional

import typer
from pydantic import ValidationError
from tabulate import tabulate

from baselines import default_registry
from bench import (
    PRESET_ALIASES,
    PRESETS,
    ExperimentSpec,
    Scenario,
    generate,
    metrics,
    preset,
    run_experiment,
    tpr_fpr,
    write_results,
)
from bundle import read_bundle, write_bundle
from errors import InvalidConfig, SparError
from mip_solver import SolverLimits, exact_small_oracle, load_problem, solve_bnb
from settings import get_settings
from spar_pipeline import SparConfig, spar_fit

logger = logging.getLogger(__name__)

app = typer.Typer(help="Sparse causal effect estimation under unmeasured confounding.", no_args_is_help=True)

EXIT_INVALID_CONFIG = 2
EXIT_PARTIAL_FAILURE = 3


class ResultsFormat(str, Enum):
    CSV = "csv"
    JSON = "json"


@app.callback()
def configure(verbose: bool = typer.Option(False, "--verbose", "-v", help="Log at DEBUG level.")):
    level = logging.DEBUG if verbose else getattr(logging, get_settings().log_level.upper(), logging.INFO)
    logging.basicConfig(level=level, format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')


def _fail(e: Exception) -> typer.Exit:
    if isinstance(e, (InvalidConfig, ValidationError)):
        logger.error(f"Invalid configuration: {e}")
        return typer.Exit(code=EXIT_INVALID_CONFIG)
    logger.error(f"{type(e).__name__}: {e}")
    return typer.Exit(code=1)


def _parse_q(q: str) -> Optional[int]:
    if q.upper() == "AUTO":
        return None
    try:
        value = int(q)
    except ValueError:
        raise InvalidConfig(f"--q must be AUTO or a non-negative integer, got '{q}'")
    if value < 0:
        raise InvalidConfig(f"--q must be non-negative, got {value}")
    return value


def _emit(payload: dict, out: Optional[Path]) -> None:
    text = json.dumps(payload, indent=2)
    if out is None:
        typer.echo(text)
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
        logger.info(f"Wrote {out}")


@app.command()
def simulate(
    model: Scenario = typer.Option(Scenario.LOWDIM, "--model", help="Generator to run."),
    out: Path = typer.Option(..., "--out", help="Bundle directory to write."),
    config: Optional[Path] = typer.Option(None, "--config", help="JSON file with generator parameters."),
    n: Optional[int] = typer.Option(None, "--n"),
    p: Optional[int] = typer.Option(None, "--p"),
    q: Optional[int] = typer.Option(None, "--q"),
    s: Optional[int] = typer.Option(None, "--s"),
    r: Optional[int] = typer.Option(None, "--r", help="Measured confounders (lowdim/highdim)."),
    snr: Optional[float] = typer.Option(None, "--snr"),
    seed: int = typer.Option(0, "--seed"),
):
    """Generate a synthetic dataset and write it as a bundle directory."""
    try:
        params = json.loads(config.read_text()) if config else {}
        flags = {"n": n, "p": p, "q": q, "s": s, "r": r, "snr": snr}
        params.update({k: v for k, v in flags.items() if v is not None})
        params.pop("seed", None)
        d, truth = generate(model, params, seed)
        write_bundle(out, d, truth, meta={"seed": seed, "generator": model.value, "params": params})
    except (SparError, ValidationError, OSError, ValueError) as e:
        raise _fail(e)
    typer.echo(f"Wrote {model.value} dataset n={d.n} p={d.p} to {out}")


@app.command()
def fit(
    in_dir: Path = typer.Option(..., "--in", help="Bundle directory to read."),
    method: str = typer.Option("spar", "--method", help="Registered method name."),
    q: str = typer.Option("AUTO", "--q", help="Factor count, or AUTO to estimate it."),
    M: float = typer.Option(30.0, "--M", help="Box bound on |beta|."),
    seed: int = typer.Option(0, "--seed"),
    out: Optional[Path] = typer.Option(None, "--out", help="Result JSON path; printed when omitted."),
):
    """Fit one estimator to a bundle and write its result JSON."""
    try:
        d, truth, _ = read_bundle(in_dir)
        q_value = _parse_q(q)
        if method == "spar":
            payload = spar_fit(d, SparConfig(q=q_value, M=M, seed=seed)).to_dict()
        else:
            payload = default_registry().run(method, d, seed=seed, q=q_value).to_dict()
        if truth is not None:
            mae, rmse = metrics(payload["beta_hat"], truth.beta)
            tpr, fpr = tpr_fpr(payload["beta_hat"], truth.beta)
            payload["metrics"] = {"mae": mae, "rmse": rmse, "tpr": tpr, "fpr": fpr}
        _emit(payload, out)
    except (SparError, ValidationError, OSError) as e:
        raise _fail(e)


@app.command("solve-mip")
def solve_mip(
    problem: Path = typer.Option(..., "--problem", help="JSON file {xi, gamma, t, M}."),
    max_nodes: Optional[int] = typer.Option(None, "--max-nodes"),
    time_budget: Optional[float] = typer.Option(None, "--time-budget"),
    oracle: bool = typer.Option(False, "--oracle", help="Use the exact enumeration oracle (q <= 2)."),
    out: Optional[Path] = typer.Option(None, "--out"),
):
    """Solve a single selection program from JSON."""
    try:
        prob = load_problem(problem)
        if oracle:
            sol = exact_small_oracle(prob)
        else:
            limits = SolverLimits.from_settings()
            if max_nodes is not None:
                limits.max_nodes = max_nodes
            if time_budget is not None:
                limits.time_budget = time_budget
            sol = solve_bnb(prob, limits)
        _emit(sol.to_dict(), out)
    except (SparError, ValidationError, OSError) as e:
        raise _fail(e)


@app.command()
def bench(
    spec_path: Optional[Path] = typer.Option(None, "--spec", help="ExperimentSpec JSON file."),
    preset_name: Optional[str] = typer.Option(
        None, "--preset", help=f"One of: {', '.join(PRESETS)}. Aliases: {', '.join(PRESET_ALIASES)}."
    ),
    scale: float = typer.Option(1.0, "--scale", help="Multiplier on preset replication counts."),
    p_values: Optional[List[int]] = typer.Option(
        None, "--p", help="Treatment counts for high-dimensional presets; repeat for several."
    ),
    jobs: Optional[int] = typer.Option(None, "--jobs", help="Concurrent replications."),
    out: Path = typer.Option(Path("results"), "--out", help="Output directory."),
    fmt: ResultsFormat = typer.Option(ResultsFormat.CSV, "--format"),
):
    """Run an experiment spec or a built-in preset."""
    settings = get_settings()
    jobs = jobs or settings.jobs
    try:
        if (spec_path is None) == (preset_name is None):
            raise InvalidConfig("pass exactly one of --spec or --preset")
        if spec_path is not None:
            specs = [ExperimentSpec.model_validate_json(spec_path.read_text())]
        else:
            specs = preset(preset_name, scale, p_values=p_values or None)
        if settings.seed is not None:
            specs = [s.model_copy(update={"base_seed": settings.seed}) for s in specs]
        for s in specs:
            s.check()
    except (SparError, ValidationError, OSError) as e:
        raise _fail(e)

    failures = 0
    for spec in specs:
        try:
            results = run_experiment(spec, jobs=jobs, progress=True)
            target = Path(spec.output) if spec.output else out / f"{spec.name}.{fmt.value}"
            write_results(results.rows, target, fmt.value)
        except SparError as e:
            raise _fail(e)
        failures += results.failures
        summary = results.summary()
        typer.echo(f"\n{spec.name}")
        typer.echo(tabulate(summary, headers="keys", tablefmt="github", showindex=False, floatfmt=".4g"))

    if failures:
        logger.warning(f"{failures} method runs failed; see the results files")
        raise typer.Exit(code=EXIT_PARTIAL_FAILURE)


if __name__ == "__main__":
    app()
