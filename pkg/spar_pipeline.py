"""
End-to-end sparse causal effect estimation: factor fit, regression fit,
threshold, L0 selection program and least-squares refinement.
"""

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Tuple

import numpy as np
from pydantic import BaseModel

from core_types import Dataset, dataset_hash, prepare_for_fit
from errors import InvalidConfig, PipelineStageError, RankDeficientSubmatrix, SparError, require
from factor_estimation import (
    FactorFit,
    FactorMethod,
    fa_mle,
    fa_pca,
    gamma_from,
    poet,
    sample_covariance,
    select_q,
)
from mip_solver import MipSolution, SolverLimits, build_mip, solve_bnb
from sparse_regression import RegressionFit, debiased_lasso, ols

logger = logging.getLogger(__name__)


class SparConfig(BaseModel):
    q: Optional[int] = None
    q_max: int = 10
    M: float = 30.0
    threshold_override: Optional[float] = None
    thresh_const: float = 0.5
    cv_folds: int = 10
    max_nodes: Optional[int] = None
    time_budget: Optional[float] = None
    seed: int = 0

    def check(self) -> "SparConfig":
        require(self.M > 0, f"M must be positive, got {self.M}")
        require(self.q is None or self.q >= 0, f"q must be non-negative, got {self.q}")
        require(self.q_max >= 0, f"q_max must be non-negative, got {self.q_max}")
        require(self.threshold_override is None or self.threshold_override >= 0, "threshold_override must be >= 0")
        require(self.thresh_const >= 0, "thresh_const must be non-negative")
        require(self.cv_folds >= 2, f"cv_folds must be at least 2, got {self.cv_folds}")
        return self

    def limits(self) -> SolverLimits:
        limits = SolverLimits.from_settings()
        if self.max_nodes is not None:
            limits.max_nodes = self.max_nodes
        if self.time_budget is not None:
            limits.time_budget = self.time_budget
        return limits


@dataclass
class Components:
    """Estimated inputs to the selection program."""

    xi_hat: np.ndarray
    gamma_hat: np.ndarray
    factor_fit: FactorFit
    regression_fit: RegressionFit
    q: int
    n: int
    p: int
    timings: Dict[str, float] = field(default_factory=dict)


@dataclass
class SparResult:
    beta_hat: np.ndarray
    delta_hat: np.ndarray
    z: np.ndarray
    beta_mip: np.ndarray
    t: float
    sigma2_hat: float
    q_used: int
    refinement_index: np.ndarray
    solver_status: str
    timings: Dict[str, float] = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "method": "spar",
            "beta_hat": self.beta_hat.tolist(),
            "delta_hat": self.delta_hat.tolist(),
            "z": self.z.astype(int).tolist(),
            "beta_mip": self.beta_mip.tolist(),
            "t": self.t,
            "sigma2_hat": self.sigma2_hat,
            "q_used": self.q_used,
            "refinement_index": self.refinement_index.tolist(),
            "solver_status": self.solver_status,
            "timings": self.timings,
            "diagnostics": self.diagnostics,
        }


def _run_stage(name: str, timings: Dict[str, float], fn: Callable, *args, **kwargs):
    start = time.perf_counter()
    try:
        out = fn(*args, **kwargs)
    except InvalidConfig:
        raise
    except (SparError, np.linalg.LinAlgError, ValueError) as e:
        logger.error(f"Stage {name} failed: {e}")
        raise PipelineStageError(name, e) from e
    elapsed = (time.perf_counter() - start) * 1000.0
    timings[name] = timings.get(name, 0.0) + elapsed
    logger.debug(f"Stage {name} took {elapsed:.1f} ms")
    return out


def estimate_sigma2(sigma_eps_hat: np.ndarray, sigma_resid2: float) -> float:
    """Average of the mean treatment-noise variance and the outcome residual variance."""
    return (float(np.mean(np.diag(sigma_eps_hat))) + float(sigma_resid2)) / 2.0


def compute_threshold(n: int, p: int, sigma2: float) -> float:
    """t = sqrt(2 ln(p) sigma2 / n)."""
    require(n >= 1, f"n must be at least 1, got {n}")
    require(p >= 2, f"p must be at least 2, got {p}")
    require(sigma2 >= 0, f"sigma2 must be non-negative, got {sigma2}")
    return math.sqrt(2.0 * math.log(p) * sigma2 / n)


def refinement_index(beta_mip: np.ndarray, q: int) -> np.ndarray:
    """Indices of the floor((p+q)/2) smallest |beta_mip| entries, ties by ascending index."""
    p = beta_mip.size
    size = (p + q) // 2
    return np.sort(np.argsort(np.abs(beta_mip), kind="stable")[:size])


def refine(
    xi_hat: np.ndarray, gamma_hat: np.ndarray, beta_mip: np.ndarray, z: np.ndarray, q: int
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Refit delta by least squares on the rows with the smallest |beta_mip| and
    return (delta_hat, beta_hat) with beta_hat = (xi - gamma delta) masked by z.
    """
    if q == 0:
        return np.zeros(0), xi_hat * z
    idx = refinement_index(beta_mip, q)
    g = gamma_hat[idx]
    if idx.size < q or np.linalg.matrix_rank(g) < q:
        raise RankDeficientSubmatrix(f"gamma restricted to {idx.size} refinement rows has rank below q={q}")
    delta, *_ = np.linalg.lstsq(g, xi_hat[idx], rcond=None)
    return delta, (xi_hat - gamma_hat @ delta) * z


def _fit_factors_lowdim(Xc: np.ndarray, q: int) -> FactorFit:
    S = sample_covariance(Xc)
    if q == 0:
        return FactorFit(np.zeros((Xc.shape[1], 0)), S, np.diag(np.diag(S)), 0, FactorMethod.MLE)
    fit = fa_mle(Xc, q)
    # gamma uses the sample covariance in this branch
    fit.sigma_x_hat = S
    return fit


def _fit_factors_highdim(Xc: np.ndarray, q: int, thresh_const: float) -> FactorFit:
    sigma_x, sigma_eps = poet(Xc, q, thresh_const)
    alpha = fa_pca(Xc, q) if q > 0 else np.zeros((Xc.shape[1], 0))
    return FactorFit(alpha, sigma_x, sigma_eps, q, FactorMethod.PCA_POET)


def estimate_components(d: Dataset, cfg: SparConfig) -> Components:
    """
    Estimate xi_hat, gamma_hat and the noise scales from a dataset. Uses factor
    MLE with OLS when n > p, PCA with POET and the de-biased lasso otherwise.
    """
    cfg.check()
    timings: Dict[str, float] = {}
    Xc, Yc = _run_stage("prepare", timings, prepare_for_fit, d)
    n, p = Xc.shape

    if cfg.q is not None:
        q = cfg.q
        require(q < min(n, p), f"q={q} must be below min(n, p)={min(n, p)}")
    else:
        q_max = max(0, min(cfg.q_max, min(n, p) - 3))
        q = _run_stage("factor", timings, select_q, Xc, q_max)

    if n > p:
        fit = _run_stage("factor", timings, _fit_factors_lowdim, Xc, q)
        reg = _run_stage("regression", timings, ols, Xc, Yc)
    else:
        fit = _run_stage("factor", timings, _fit_factors_highdim, Xc, q, cfg.thresh_const)
        reg = _run_stage("regression", timings, debiased_lasso, Xc, Yc, folds=cfg.cv_folds, seed=cfg.seed)

    gamma = _run_stage("gamma", timings, gamma_from, fit)
    logger.debug(f"Components: n={n} p={p} q={q} branch={'low' if n > p else 'high'}-dim")
    return Components(
        xi_hat=reg.xi_hat, gamma_hat=gamma.gamma, factor_fit=fit, regression_fit=reg, q=q, n=n, p=p, timings=timings
    )


class ComponentCache:
    """
    Shares estimate_components output between methods fitted to one dataset.
    Every lookup runs with the cache's own seed, so the estimate does not
    depend on which method asked first.
    """

    def __init__(self, seed: int = 0):
        self.seed = seed
        self._store: Dict[tuple, Components] = {}

    def get(self, d: Dataset, cfg: SparConfig) -> Components:
        cfg = cfg.model_copy(update={"seed": self.seed})
        key = (dataset_hash(d), cfg.q, cfg.q_max, cfg.thresh_const, cfg.cv_folds)
        if key in self._store:
            logger.debug(f"Reusing components for q={cfg.q}")
        else:
            self._store[key] = estimate_components(d, cfg)
        return self._store[key]


def spar_fit(d: Dataset, cfg: Optional[SparConfig] = None, components: Optional[Components] = None) -> SparResult:
    cfg = (cfg or SparConfig()).check()
    comps = components if components is not None else estimate_components(d, cfg)
    timings = dict(comps.timings)
    n, p, q = comps.n, comps.p, comps.q
    xi, gamma = comps.xi_hat, comps.gamma_hat

    def threshold() -> Tuple[float, float]:
        sigma2 = estimate_sigma2(comps.factor_fit.sigma_eps_hat, comps.regression_fit.sigma_resid2)
        t = cfg.threshold_override if cfg.threshold_override is not None else compute_threshold(n, p, sigma2)
        return sigma2, t

    sigma2, t = _run_stage("threshold", timings, threshold)
    prob = build_mip(xi, gamma, t, cfg.M)
    sol: MipSolution = _run_stage("mip", timings, solve_bnb, prob, cfg.limits())
    beta_mip = xi - gamma @ sol.delta

    diagnostics = {
        "n": n,
        "p": p,
        "factor_method": comps.factor_fit.method.value,
        "regression_method": comps.regression_fit.method,
        "nodes_explored": sol.nodes_explored,
        "mip_objective": sol.objective,
        "refine_fallback": False,
    }
    diagnostics.update({f"factor_{k}": v for k, v in comps.factor_fit.diagnostics.items() if k == "em_iterations"})

    start = time.perf_counter()
    idx = refinement_index(beta_mip, q)
    try:
        delta_hat, beta_hat = refine(xi, gamma, beta_mip, sol.z, q)
    except RankDeficientSubmatrix as e:
        logger.warning(f"Refinement fell back to the selection-program delta: {e}")
        delta_hat, beta_hat = sol.delta, beta_mip * sol.z
        diagnostics["refine_fallback"] = True
    timings["refine"] = (time.perf_counter() - start) * 1000.0

    logger.info(
        f"Spar fit n={n} p={p} q={q} t={t:.4g} selected={int(sol.z.sum())} status={sol.status.value}"
    )
    return SparResult(
        beta_hat=beta_hat,
        delta_hat=delta_hat,
        z=sol.z,
        beta_mip=beta_mip,
        t=t,
        sigma2_hat=sigma2,
        q_used=q,
        refinement_index=idx,
        solver_status=sol.status.value,
        timings=timings,
        diagnostics=diagnostics,
    )
