"""
Monte-Carlo experiment harness: seeded replications, per-method scoring
against the generator's ground truth, CSV/JSON results and built-in presets.
"""

import hashlib
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field
from tqdm import tqdm

from baselines import MethodRegistry, default_registry
from core_types import Dataset, GroundTruth, dataset_hash
from errors import DimensionMismatch, IoError, SparError, require
from mip_solver import SolveStatus
from simulate import (
    GwasConfig,
    HighDimConfig,
    LowDimConfig,
    PopulationModel,
    gen_gwas,
    gen_highdim,
    gen_lowdim,
)
from spar_pipeline import ComponentCache

logger = logging.getLogger(__name__)

CSV_COLUMNS = ["method", "rep", "mae", "rmse", "tpr", "fpr", "wall_ms_total"]
FLOAT_FORMAT = "%.17g"
PRESETS = (
    "lowdim-sparsity", "lowdim-measured", "lowdim-q",
    "highdim-lasso", "highdim-methods", "highdim-measured", "highdim-q", "highdim-correlated-noise",
    "gwas-bn", "gwas-psd", "gwas-spatial", "gwas-perturbed",
)
PRESET_ALIASES = {
    "fig2": "lowdim-sparsity",
    "table1": "highdim-lasso",
    "fig4": "highdim-methods",
    "fig5-nondiag": "highdim-correlated-noise",
    "fig7-bn": "gwas-bn",
    "fig7-psd": "gwas-psd",
    "fig7-spatial": "gwas-spatial",
    "suppb-q": "lowdim-q",
    "suppd-perturbed": "gwas-perturbed",
    "suppe-w": "lowdim-measured",
}
HIGHDIM_P = tuple(range(300, 1001, 100))


class Scenario(str, Enum):
    LOWDIM = "lowdim"
    HIGHDIM = "highdim"
    GWAS_BN = "gwas-bn"
    GWAS_PSD = "gwas-psd"
    GWAS_SPATIAL = "gwas-spatial"


_GWAS_MODELS = {
    Scenario.GWAS_BN: PopulationModel.BN,
    Scenario.GWAS_PSD: PopulationModel.PSD,
    Scenario.GWAS_SPATIAL: PopulationModel.SPATIAL,
}


def generate(scenario: Scenario, params: dict, seed: int) -> Tuple[Dataset, GroundTruth]:
    """Run the scenario's generator with the given parameters and seed."""
    params = {**params, "seed": seed}
    if scenario is Scenario.LOWDIM:
        return gen_lowdim(LowDimConfig.model_validate(params))
    if scenario is Scenario.HIGHDIM:
        return gen_highdim(HighDimConfig.model_validate(params))
    params["model"] = _GWAS_MODELS[scenario]
    return gen_gwas(GwasConfig.model_validate(params))


class ExperimentSpec(BaseModel):
    name: str = "experiment"
    scenario: Scenario = Scenario.LOWDIM
    generator: dict = Field(default_factory=dict)
    methods: List[str] = Field(default_factory=lambda: ["spar", "null", "ols"])
    replications: int = 1
    base_seed: int = 0
    q_override: List[Optional[int]] = Field(default_factory=list)
    record_timings: bool = True
    output: Optional[str] = None

    def check(self, registry: Optional[MethodRegistry] = None) -> "ExperimentSpec":
        registry = registry or default_registry()
        require(self.replications >= 1, f"replications must be at least 1, got {self.replications}")
        require(len(self.methods) >= 1, "at least one method is required")
        for name in self.methods:
            registry.get_method(name)
        require(all(q is None or q >= 0 for q in self.q_override), "q_override entries must be non-negative")
        # Validate generator parameters without generating.
        params = {**self.generator, "seed": self.base_seed}
        if self.scenario is Scenario.LOWDIM:
            LowDimConfig.model_validate(params).check()
        elif self.scenario is Scenario.HIGHDIM:
            HighDimConfig.model_validate(params).check()
        else:
            GwasConfig.model_validate({**params, "model": _GWAS_MODELS[self.scenario]}).check()
        return self

    def method_labels(self, registry: Optional[MethodRegistry] = None) -> List[Tuple[str, str, Optional[int]]]:
        """(label, method name, q) triples; q_override fans out the methods that take q."""
        registry = registry or default_registry()
        out = []
        for name in self.methods:
            if self.q_override and registry.get_method(name).uses_q:
                for q in self.q_override:
                    out.append((name if q is None else f"{name}[q={q}]", name, q))
            else:
                out.append((name, name, None))
        return out


@dataclass
class MetricsReport:
    method: str
    rep: int
    mae: float
    rmse: float
    tpr: Optional[float]
    fpr: Optional[float]
    wall_ms: Dict[str, float] = field(default_factory=dict)
    wall_ms_total: float = 0.0
    status: str = "ok"

    @property
    def failed(self) -> bool:
        return self.status != "ok"

    def to_dict(self) -> dict:
        return asdict(self)


def metrics(beta_hat: np.ndarray, beta_true: np.ndarray) -> Tuple[float, float]:
    """Per-coefficient (MAE, RMSE)."""
    beta_hat, beta_true = np.asarray(beta_hat, dtype=float), np.asarray(beta_true, dtype=float)
    if beta_hat.shape != beta_true.shape or beta_true.size == 0:
        raise DimensionMismatch(f"cannot score shape {beta_hat.shape} against {beta_true.shape}")
    err = beta_hat - beta_true
    return float(np.mean(np.abs(err))), float(np.sqrt(np.mean(err**2)))


def tpr_fpr(beta_hat: np.ndarray, beta_true: np.ndarray, zero_tol: float = 1e-10) -> Tuple[Optional[float], Optional[float]]:
    """Support recovery rates; a rate is None when its denominator is empty."""
    beta_hat, beta_true = np.asarray(beta_hat, dtype=float), np.asarray(beta_true, dtype=float)
    if beta_hat.shape != beta_true.shape:
        raise DimensionMismatch(f"cannot score shape {beta_hat.shape} against {beta_true.shape}")
    selected = np.abs(beta_hat) > zero_tol
    truly = np.abs(beta_true) > 0
    tpr = float(np.mean(selected[truly])) if truly.any() else None
    fpr = float(np.mean(selected[~truly])) if (~truly).any() else None
    return tpr, fpr


def method_seed(rep_seed: int, label: str) -> int:
    """Replication seed shifted by a stable hash of the method label."""
    offset = int(hashlib.sha256(label.encode()).hexdigest()[:8], 16)
    return (rep_seed + offset) % 2**31


def _failed_row(label: str, rep: int, err: Exception) -> MetricsReport:
    return MetricsReport(label, rep, math.nan, math.nan, None, None, status=f"{type(err).__name__}: {err}")


def _solver_tag(solver_status: Optional[str]) -> str:
    return "ok" if solver_status in (None, SolveStatus.OPTIMAL.value) else solver_status


def _run_replication(
    spec: ExperimentSpec, rep: int, labels: List[Tuple[str, str, Optional[int]]], registry: MethodRegistry
) -> List[MetricsReport]:
    seed = spec.base_seed + rep
    try:
        d, truth = generate(spec.scenario, spec.generator, seed)
    except Exception as e:
        logger.warning(f"Replication {rep}: data generation failed: {e}")
        return [_failed_row(label, rep, e) for label, _, _ in labels]

    fingerprint = dataset_hash(d)
    cache = ComponentCache(seed=method_seed(seed, "components"))
    rows = []
    for label, name, q in labels:
        try:
            result = registry.run(name, d, seed=method_seed(seed, label), q=q, cache=cache)
            if dataset_hash(d) != fingerprint:
                raise SparError(f"method {name} modified the shared dataset")
            mae, rmse = metrics(result.beta_hat, truth.beta)
            tpr, fpr = tpr_fpr(result.beta_hat, truth.beta)
            wall_ms = {k: v for k, v in result.timings.items() if k != "total"}
            total = result.timings.get("total", 0.0)
            if not spec.record_timings:
                wall_ms = {k: 0.0 for k in wall_ms}
                total = 0.0
            status = _solver_tag(result.details.get("solver_status"))
            if status != "ok":
                logger.warning(f"Replication {rep}: method {label} returned with solver status {status}")
            rows.append(MetricsReport(label, rep, mae, rmse, tpr, fpr, wall_ms, total, status))
        except Exception as e:
            logger.warning(f"Replication {rep}: method {label} failed: {type(e).__name__}: {e}")
            rows.append(_failed_row(label, rep, e))
    return rows


@dataclass
class ExperimentResults:
    spec: ExperimentSpec
    rows: List[MetricsReport]

    @property
    def failures(self) -> int:
        return sum(row.failed for row in self.rows)

    def summary(self) -> pd.DataFrame:
        return summarize(self.rows)


def run_experiment(
    spec: ExperimentSpec, jobs: int = 1, registry: Optional[MethodRegistry] = None, progress: bool = False
) -> ExperimentResults:
    """
    Run every method on every replication. Replications run on a thread pool
    of size jobs; rows come back ordered by (method, replication).
    """
    registry = registry or default_registry()
    spec.check(registry)
    labels = spec.method_labels(registry)
    logger.info(f"Running {spec.name}: {spec.replications} replications x {len(labels)} methods, jobs={jobs}")

    rows: List[MetricsReport] = []
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        futures = {pool.submit(_run_replication, spec, rep, labels, registry): rep for rep in range(spec.replications)}
        for future in tqdm(as_completed(futures), total=len(futures), desc=spec.name, disable=not progress):
            rows.extend(future.result())

    order = {label: i for i, (label, _, _) in enumerate(labels)}
    rows.sort(key=lambda row: (order[row.method], row.rep))
    results = ExperimentResults(spec=spec, rows=rows)
    if results.failures:
        logger.warning(f"{spec.name}: {results.failures} of {len(rows)} runs failed")
    return results


def _csv_frame(rows: List[MetricsReport]) -> pd.DataFrame:
    records = [{col: getattr(row, col) for col in CSV_COLUMNS} for row in rows]
    return pd.DataFrame(records, columns=CSV_COLUMNS)


def summarize(rows: List[MetricsReport]) -> pd.DataFrame:
    """Mean and sample sd per method over replications, plus failure counts."""
    df = _csv_frame(rows)
    metrics_cols = ["mae", "rmse", "tpr", "fpr", "wall_ms_total"]
    df[metrics_cols] = df[metrics_cols].astype(float)
    if df.empty:
        return pd.DataFrame(columns=["method", "runs", "failures"] + [f"{c}_{s}" for c in metrics_cols for s in ("mean", "sd")])

    df["failed"] = [row.failed for row in rows]
    order = list(dict.fromkeys(df["method"]))
    grouped = df.groupby("method", sort=False)
    summary = grouped[metrics_cols].agg(["mean", "std"])
    summary.columns = [f"{c}_{'sd' if s == 'std' else s}" for c, s in summary.columns]
    summary.insert(0, "failures", grouped["failed"].sum().astype(int))
    summary.insert(0, "runs", grouped.size())
    return summary.reindex(order).reset_index()


def write_results(rows: List[MetricsReport], path, fmt: str = "csv") -> Path:
    """Write per-replication rows, and for CSV a sibling <stem>_summary.csv."""
    path = Path(path)
    require(fmt in ("csv", "json"), f"unknown results format '{fmt}'")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        if fmt == "csv":
            _csv_frame(rows).to_csv(path, index=False, float_format=FLOAT_FORMAT)
            summary_path = path.with_name(f"{path.stem}_summary.csv")
            summarize(rows).to_csv(summary_path, index=False, float_format=FLOAT_FORMAT)
        else:
            path.write_text(json.dumps([row.to_dict() for row in rows], indent=2))
    except OSError as e:
        raise IoError(f"failed to write results to {path}: {e}") from e
    logger.info(f"Wrote {len(rows)} result rows to {path}")
    return path


def read_results_json(path) -> List[MetricsReport]:
    try:
        records = json.loads(Path(path).read_text())
    except (OSError, ValueError) as e:
        raise IoError(f"failed to read results from {path}: {e}") from e
    return [MetricsReport(**record) for record in records]


def _reps(base: int, scale: float) -> int:
    return max(1, int(round(base * scale)))


def resolve_preset(name: str) -> str:
    """Canonical preset name for a preset or one of its aliases."""
    name = PRESET_ALIASES.get(name, name)
    require(name in PRESETS, f"unknown preset '{name}', expected one of {PRESETS} or {tuple(PRESET_ALIASES)}")
    return name


def preset(
    name: str, scale: float = 1.0, base_seed: int = 0, p_values: Optional[Sequence[int]] = None
) -> List[ExperimentSpec]:
    """
    Desk-scale versions of the standard experiment grids. scale multiplies
    replication counts; p_values replaces the treatment-count grid of the
    high-dimensional presets.
    """
    name = resolve_preset(name)
    require(scale > 0, f"scale must be positive, got {scale}")
    grid = tuple(p_values) if p_values else HIGHDIM_P
    require(all(p >= 1 for p in grid), f"p values must be positive, got {grid}")

    def spec(label, scenario, generator, methods, reps, **extra) -> ExperimentSpec:
        return ExperimentSpec(name=label, scenario=scenario, generator=generator, methods=methods,
                              replications=_reps(reps, scale), base_seed=base_seed, **extra)

    if name == "lowdim-sparsity":
        return [spec(f"lowdim-sparsity_s{s}", Scenario.LOWDIM, {"s": s}, ["spar", "null", "ols"], 100)
                for s in range(1, 14)]
    if name == "lowdim-measured":
        return [spec(f"lowdim-measured_s{s}", Scenario.LOWDIM, {"s": s, "r": 3}, ["spar", "null", "ols"], 100)
                for s in range(1, 6)]
    if name == "lowdim-q":
        return [spec("lowdim-q", Scenario.LOWDIM, {"s": 3}, ["spar", "null"], 100,
                     q_override=[None, 1, 2, 3, 4, 5])]
    if name == "highdim-lasso":
        return [spec(f"highdim-lasso_p{p}", Scenario.HIGHDIM, {"p": p}, ["spar", "lasso"], 20) for p in grid]
    if name == "highdim-methods":
        return [spec(f"highdim-methods_p{p}", Scenario.HIGHDIM, {"p": p}, ["spar", "null", "lasso", "deconf-lasso"], 20)
                for p in grid]
    if name == "highdim-measured":
        return [
            spec(f"highdim-measured_r{r}_p{p}", Scenario.HIGHDIM, {"p": p, "r": r},
                 ["spar", "null", "lasso", "deconf-lasso"], 20)
            for r in (3, 10, 50)
            for p in grid
        ]
    if name == "highdim-q":
        return [spec(f"highdim-q_p{p}", Scenario.HIGHDIM, {"p": p}, ["spar"], 20, q_override=[1, 2, 3, 4, 5, 6])
                for p in grid]
    if name == "highdim-correlated-noise":
        pairs = [(0.0, 0.1), (0.0, 0.2), (0.1, 0.1), (0.1, 0.2)]
        return [
            spec(f"highdim-correlated-noise_m{m}_sd{sd}_p{p}", Scenario.HIGHDIM,
                 {"p": p, "noise_offdiag_mean": m, "noise_offdiag_sd": sd},
                 ["spar", "null", "lasso", "deconf-lasso"], 20)
            for m, sd in pairs
            for p in grid
        ]
    if name == "gwas-perturbed":
        return [spec(f"gwas-perturbed_snr{snr:g}", Scenario.GWAS_BN,
                     {"n": 400, "p": 400, "snr": snr, "perturb_null_beta": True},
                     ["spar", "null", "lasso", "ridge"], 10) for snr in (1.0, 5.0)]

    scenario = {"gwas-bn": Scenario.GWAS_BN, "gwas-psd": Scenario.GWAS_PSD, "gwas-spatial": Scenario.GWAS_SPATIAL}[name]
    return [
        spec(f"{name}_snr{snr:g}", scenario, {"n": 400, "p": 400, "snr": snr},
             ["spar", "null", "lasso", "ridge", "deconf-ridge"], 10)
        for snr in (0.1, 1.0, 5.0)
    ]
