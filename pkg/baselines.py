"""
Comparison estimators (null-treatments LMS, PPCA deconfounder, plain
OLS/ridge/lasso) and the method registry shared by the CLI and the bench
harness.
"""

import itertools
import logging
import math
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import scipy.linalg as la
from pydantic import BaseModel

from core_types import Dataset, prepare_for_fit
from errors import InvalidConfig, require
from spar_pipeline import ComponentCache, SparConfig, estimate_components, spar_fit
from sparse_regression import lasso_cv, ols, ridge

logger = logging.getLogger(__name__)

LMS_CHUNK = 2000


class LmsConfig(BaseModel):
    n_subsets: int = 3000
    exhaustive_limit: int = 20000
    # order statistic of the squared residuals to minimize; None means p // 2 + (q + 1) // 2
    coverage: Optional[int] = None
    seed: int = 0

    def check(self) -> "LmsConfig":
        require(self.n_subsets >= 1, f"n_subsets must be at least 1, got {self.n_subsets}")
        require(self.exhaustive_limit >= 0, "exhaustive_limit must be non-negative")
        require(self.coverage is None or self.coverage >= 1, f"coverage must be at least 1, got {self.coverage}")
        return self

    def order_statistic(self, p: int, q: int) -> int:
        h = p // 2 + (q + 1) // 2 if self.coverage is None else self.coverage
        require(h <= p, f"coverage {h} exceeds the number of rows p={p}")
        return h


class OutcomeStage(str, Enum):
    LASSO = "lasso"
    RIDGE = "ridge"


class DeconfConfig(BaseModel):
    k: int = 50
    outcome_stage: OutcomeStage = OutcomeStage.LASSO
    cv_folds: int = 10
    seed: int = 0

    def check(self) -> "DeconfConfig":
        require(self.k >= 0, f"k must be non-negative, got {self.k}")
        require(self.cv_folds >= 2, f"cv_folds must be at least 2, got {self.cv_folds}")
        return self


@dataclass
class LmsFit:
    delta: np.ndarray
    objective: float
    candidates: int


def _candidate_subsets(p: int, q: int, cfg: LmsConfig) -> List[Tuple[int, ...]]:
    if math.comb(p, q) <= cfg.exhaustive_limit:
        return list(itertools.combinations(range(p), q))
    rng = np.random.default_rng(cfg.seed)
    drawn = {tuple(sorted(int(i) for i in rng.choice(p, size=q, replace=False))) for _ in range(cfg.n_subsets)}
    return sorted(drawn)


def lms_delta(xi_hat: np.ndarray, gamma_hat: np.ndarray, cfg: Optional[LmsConfig] = None) -> LmsFit:
    """
    Least median of squares fit of xi on gamma. Candidates are exact solves on
    q-row subsets; the winner minimizes the h-th smallest squared residual,
    h = p // 2 + (q + 1) // 2 unless configured, ties going to the
    lexicographically first subset.
    """
    cfg = (cfg or LmsConfig()).check()
    p, q = gamma_hat.shape
    require(p > q >= 1, f"LMS needs p > q >= 1, got p={p}, q={q}")
    h = cfg.order_statistic(p, q)

    deltas = []
    for subset in _candidate_subsets(p, q, cfg):
        rows = list(subset)
        g = gamma_hat[rows]
        if np.linalg.matrix_rank(g) < q:
            continue
        deltas.append(la.solve(g, xi_hat[rows]))
    if not deltas:
        raise InvalidConfig("every candidate subset of gamma rows is singular")
    deltas = np.array(deltas)

    best_obj, best_delta = np.inf, None
    for start in range(0, len(deltas), LMS_CHUNK):
        chunk = deltas[start: start + LMS_CHUNK]
        resid2 = (xi_hat[None, :] - chunk @ gamma_hat.T) ** 2
        quantiles = np.partition(resid2, h - 1, axis=1)[:, h - 1]
        k = int(np.argmin(quantiles))
        if quantiles[k] < best_obj:
            best_obj, best_delta = float(quantiles[k]), chunk[k]
    logger.debug(f"LMS evaluated {len(deltas)} candidates, order statistic {h} of {p}: {best_obj:.4g}")
    return LmsFit(delta=best_delta, objective=best_obj, candidates=len(deltas))


def null_treatments(xi_hat: np.ndarray, gamma_hat: np.ndarray, cfg: Optional[LmsConfig] = None) -> np.ndarray:
    """Dense estimate xi - gamma delta with delta from least median of squares."""
    fit = lms_delta(xi_hat, gamma_hat, cfg)
    return xi_hat - gamma_hat @ fit.delta


def ppca(X: np.ndarray, k: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Closed-form probabilistic PCA. Returns the posterior-mean substitute
    confounders (n x k) and the loadings (p x k).
    """
    n, p = X.shape
    require(0 <= k < min(n, p), f"PPCA needs 0 <= k < min(n, p)={min(n, p)}, got k={k}")
    if k == 0:
        return np.zeros((n, 0)), np.zeros((p, 0))

    _, s, vt = la.svd(X, full_matrices=False)
    eigvals = np.zeros(p)
    eigvals[: s.size] = s**2 / n
    sigma2 = float(np.mean(eigvals[k:]))
    W = vt[:k].T * np.sqrt(np.maximum(eigvals[:k] - sigma2, 0.0))
    precision = W.T @ W + sigma2 * np.eye(k)
    substitute = la.solve(precision, W.T @ X.T, assume_a="sym").T
    return substitute, W


def deconfounder(d: Dataset, cfg: Optional[DeconfConfig] = None) -> np.ndarray:
    """Regress Y on [X, substitute confounders] and keep the treatment coefficients."""
    cfg = (cfg or DeconfConfig()).check()
    Xc, Yc = prepare_for_fit(d)
    p = Xc.shape[1]
    substitute, _ = ppca(Xc, cfg.k)
    augmented = np.hstack([Xc, substitute])
    if cfg.outcome_stage is OutcomeStage.LASSO:
        coef, _ = lasso_cv(augmented, Yc, folds=cfg.cv_folds, seed=cfg.seed)
    else:
        coef = ridge(augmented, Yc, cv_folds=cfg.cv_folds, seed=cfg.seed).xi_hat
    return coef[:p]


@dataclass
class MethodResult:
    """Output of a registered method; spar fills the optional fields."""

    method: str
    beta_hat: np.ndarray
    timings: Dict[str, float] = field(default_factory=dict)
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {
            "method": self.method,
            "beta_hat": self.beta_hat.tolist(),
            "delta_hat": None,
            "z": None,
            "beta_mip": None,
            "t": None,
            "sigma2_hat": None,
            "q_used": None,
            "refinement_index": None,
            "solver_status": None,
            "timings": self.timings,
            "diagnostics": {},
        }
        out.update(self.details)
        out["method"] = self.method
        return out


@dataclass
class MethodSpec:
    name: str
    description: str
    function: Callable[..., MethodResult]
    uses_q: bool = False


class MethodRegistry:
    def __init__(self):
        self._methods: Dict[str, MethodSpec] = {}

    def register_method(self, spec: MethodSpec) -> None:
        self._methods[spec.name] = spec

    def get_method(self, name: str) -> MethodSpec:
        if name not in self._methods:
            raise InvalidConfig(f"unknown method '{name}', expected one of {self.list_methods()}")
        return self._methods[name]

    def list_methods(self) -> List[str]:
        return sorted(self._methods)

    def run(
        self, name: str, d: Dataset, seed: int = 0, q: Optional[int] = None, cache: Optional[ComponentCache] = None
    ) -> MethodResult:
        spec = self.get_method(name)
        start = time.perf_counter()
        if spec.uses_q:
            result = spec.function(d, seed=seed, q=q, cache=cache)
        else:
            result = spec.function(d, seed=seed)
        result.timings.setdefault("total", (time.perf_counter() - start) * 1000.0)
        return result


def _components(d: Dataset, cfg: SparConfig, cache: Optional[ComponentCache]):
    return cache.get(d, cfg) if cache is not None else estimate_components(d, cfg)


def _run_spar(d: Dataset, seed: int = 0, q: Optional[int] = None, cache: Optional[ComponentCache] = None) -> MethodResult:
    cfg = SparConfig(q=q, seed=seed)
    res = spar_fit(d, cfg, components=_components(d, cfg, cache))
    return MethodResult("spar", res.beta_hat, timings=dict(res.timings), details=res.to_dict())


def _run_null(d: Dataset, seed: int = 0, q: Optional[int] = None, cache: Optional[ComponentCache] = None) -> MethodResult:
    comps = _components(d, SparConfig(q=q, seed=seed), cache)
    if comps.q == 0:
        beta = comps.xi_hat.copy()
    else:
        beta = null_treatments(comps.xi_hat, comps.gamma_hat, LmsConfig(seed=seed))
    return MethodResult("null", beta, timings=dict(comps.timings), details={"q_used": comps.q})


def _run_ols(d: Dataset, seed: int = 0) -> MethodResult:
    Xc, Yc = prepare_for_fit(d)
    return MethodResult("ols", ols(Xc, Yc).xi_hat)


def _run_lasso(d: Dataset, seed: int = 0) -> MethodResult:
    Xc, Yc = prepare_for_fit(d)
    coef, lam = lasso_cv(Xc, Yc, folds=10, seed=seed)
    return MethodResult("lasso", coef, details={"diagnostics": {"lambda": lam}})


def _run_ridge(d: Dataset, seed: int = 0) -> MethodResult:
    Xc, Yc = prepare_for_fit(d)
    fit = ridge(Xc, Yc, cv_folds=10, seed=seed)
    return MethodResult("ridge", fit.xi_hat, details={"diagnostics": {"lambda": fit.lam}})


def _deconf_runner(stage: OutcomeStage) -> Callable[..., MethodResult]:
    def run(d: Dataset, seed: int = 0) -> MethodResult:
        k = min(DeconfConfig().k, min(d.n, d.p) - 1)
        beta = deconfounder(d, DeconfConfig(k=k, outcome_stage=stage, seed=seed))
        return MethodResult(f"deconf-{stage.value}", beta, details={"diagnostics": {"k": k}})

    return run


def default_registry() -> MethodRegistry:
    registry = MethodRegistry()
    registry.register_method(MethodSpec("spar", "Sparse causal effects via L0 selection and refinement", _run_spar, True))
    registry.register_method(MethodSpec("null", "Null-treatments least median of squares", _run_null, True))
    registry.register_method(MethodSpec("ols", "Ordinary least squares of Y on X", _run_ols))
    registry.register_method(MethodSpec("lasso", "Lasso with 10-fold cross-validation", _run_lasso))
    registry.register_method(MethodSpec("ridge", "Ridge with 10-fold cross-validation", _run_ridge))
    registry.register_method(
        MethodSpec("deconf-lasso", "PPCA deconfounder with a lasso outcome model", _deconf_runner(OutcomeStage.LASSO))
    )
    registry.register_method(
        MethodSpec("deconf-ridge", "PPCA deconfounder with a ridge outcome model", _deconf_runner(OutcomeStage.RIDGE))
    )
    return registry
