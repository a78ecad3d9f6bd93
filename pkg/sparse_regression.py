"""
Regression estimators for the marginal association xi: OLS, ridge, coordinate
descent lasso with cross-validation, scaled lasso, and the de-biased lasso
built from node-wise regressions.

Lasso objective: (1/2n)||Y - Xb||^2 + lam * ||b||_1, with the penalty applied
to coefficients of internally rescaled columns (unit mean square).
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
import scipy.linalg as la
from sklearn.linear_model import lasso_path as sk_lasso_path

from errors import ConvergenceFailure, SingularDesign, require

logger = logging.getLogger(__name__)

# relative duality-gap tolerance for the compiled coordinate descent
CD_TOL = 1e-9
CD_MAX_ITER = 100_000


@dataclass
class RegressionFit:
    xi_hat: np.ndarray
    sigma_resid2: float
    method: str
    lam: Optional[float] = None
    diagnostics: dict = field(default_factory=dict)


def kfold_indices(n: int, folds: int, seed: int = 0) -> List[np.ndarray]:
    """Seeded fold assignment: a permutation of range(n) split into near-equal parts."""
    require(2 <= folds <= n, f"need 2 <= folds <= n, got folds={folds}, n={n}")
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(part) for part in np.array_split(perm, folds)]


def ols(X: np.ndarray, Y: np.ndarray) -> RegressionFit:
    n, p = X.shape
    if n <= p:
        raise SingularDesign(f"OLS needs n > p, got n={n}, p={p}")
    coef, _, rank, _ = np.linalg.lstsq(X, Y, rcond=None)
    if rank < p:
        raise SingularDesign(f"design has rank {rank} < p={p}")
    resid = Y - X @ coef
    return RegressionFit(xi_hat=coef, sigma_resid2=float(resid @ resid) / (n - p), method="ols")


def _ridge_svd(U, s, Vt, Y, n, lam):
    shrink = s / (s**2 + n * lam)
    return Vt.T @ (shrink * (U.T @ Y))


def ridge(
    X: np.ndarray,
    Y: np.ndarray,
    lam: Optional[float] = None,
    cv_folds: Optional[int] = None,
    seed: int = 0,
    n_lambdas: int = 50,
) -> RegressionFit:
    """
    Ridge regression (X^T X + n lam I)^{-1} X^T Y. Pass lam directly, or
    cv_folds to pick lam from a log grid by cross-validated MSE.
    """
    n, p = X.shape
    require(lam is not None or cv_folds is not None, "ridge needs lam or cv_folds")
    if lam is not None:
        require(lam >= 0, f"ridge lam must be non-negative, got {lam}")

    diagnostics = {}
    if lam is None:
        scale = np.max(np.abs(X.T @ Y)) / n
        if scale == 0:
            return RegressionFit(xi_hat=np.zeros(p), sigma_resid2=float(Y @ Y) / n, method="ridge", lam=0.0)
        grid = np.geomspace(1e3 * scale, 1e-4 * scale, n_lambdas)
        cv_mse = np.zeros(n_lambdas)
        for test in kfold_indices(n, cv_folds, seed):
            train = np.setdiff1d(np.arange(n), test)
            U, s, Vt = la.svd(X[train], full_matrices=False)
            for k, lam_k in enumerate(grid):
                coef = _ridge_svd(U, s, Vt, Y[train], train.size, lam_k)
                cv_mse[k] += np.mean((Y[test] - X[test] @ coef) ** 2)
        best = int(np.argmin(cv_mse))
        lam = float(grid[best])
        diagnostics["cv_mse"] = (cv_mse / cv_folds).tolist()
        logger.debug(f"Ridge CV picked lam={lam:.4g}")

    U, s, Vt = la.svd(X, full_matrices=False)
    coef = _ridge_svd(U, s, Vt, Y, n, lam)
    resid = Y - X @ coef
    return RegressionFit(
        xi_hat=coef, sigma_resid2=float(resid @ resid) / n, method="ridge", lam=lam, diagnostics=diagnostics
    )


def _gram_path(
    Z: np.ndarray,
    y: np.ndarray,
    alphas,
    gram: Optional[np.ndarray] = None,
    xy: Optional[np.ndarray] = None,
    coef_init: Optional[np.ndarray] = None,
) -> np.ndarray:
    """
    Covariance-form coordinate descent over a decreasing penalty grid, warm
    started along the grid. Returns a (len(alphas) x p) coefficient array.
    """
    alphas = np.asarray(alphas, dtype=float)
    p = Z.shape[1]
    if not np.any(y):
        return np.zeros((alphas.size, p))
    gram = Z.T @ Z if gram is None else gram
    xy = Z.T @ y if xy is None else xy
    _, coefs, gaps, n_iters = sk_lasso_path(
        Z,
        y,
        alphas=alphas,
        precompute=gram,
        Xy=xy,
        coef_init=None if coef_init is None else np.asfortranarray(coef_init, dtype=float),
        tol=CD_TOL,
        max_iter=CD_MAX_ITER,
        return_n_iter=True,
    )
    if max(n_iters) >= CD_MAX_ITER:
        raise ConvergenceFailure(
            f"lasso coordinate descent did not converge in {CD_MAX_ITER} sweeps (duality gap {max(gaps):.3g})"
        )
    return coefs.T


def _column_scale(X: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    scale = np.sqrt(np.mean(X**2, axis=0))
    return np.where(scale > 0, scale, 1.0), scale > 0


def _standardize(X: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    scale, nonzero = _column_scale(X)
    Z = X / scale
    Z[:, ~nonzero] = 0.0
    return Z, scale


def lasso_cd(X: np.ndarray, Y: np.ndarray, lam: float, b0: Optional[np.ndarray] = None) -> np.ndarray:
    """Lasso coefficients on the original column scale at penalty lam."""
    require(lam >= 0, f"lasso lam must be non-negative, got {lam}")
    Z, scale = _standardize(X)
    start = None if b0 is None else np.asarray(b0) * scale
    coef = _gram_path(Z, Y, [lam], coef_init=start)[0]
    logger.debug(f"Lasso lam={lam:.4g}: {np.count_nonzero(coef)} nonzeros")
    return coef / scale


def lasso_path(X: np.ndarray, Y: np.ndarray, lambdas: np.ndarray) -> np.ndarray:
    """Coefficients (len(lambdas) x p) along a decreasing lambda grid with warm starts."""
    Z, scale = _standardize(X)
    return _gram_path(Z, Y, lambdas) / scale


def lasso_cv(
    X: np.ndarray, Y: np.ndarray, folds: int = 10, seed: int = 0, n_lambdas: int = 100, eps: float = 1e-3
) -> Tuple[np.ndarray, float]:
    """
    Lasso with the penalty picked by k-fold CV over a log grid from lam_max
    (the smallest penalty giving the all-zero fit) down to eps * lam_max.
    Returns (coefficients, lam_star).
    """
    n, p = X.shape
    test_sets = kfold_indices(n, folds, seed)

    Z, _ = _standardize(X)
    lam_max = float(np.max(np.abs(Z.T @ Y))) / n
    if lam_max == 0:
        return np.zeros(p), 0.0
    grid = np.geomspace(lam_max, eps * lam_max, n_lambdas)

    cv_mse = np.zeros(n_lambdas)
    for test in test_sets:
        train = np.setdiff1d(np.arange(n), test)
        path = lasso_path(X[train], Y[train], grid)
        pred = X[test] @ path.T
        cv_mse += np.mean((Y[test][:, None] - pred) ** 2, axis=0)
    cv_mse /= folds

    # argmin returns the first minimizer, i.e. the largest lam among ties
    best = int(np.argmin(cv_mse))
    coef = lasso_path(X, Y, grid[: best + 1])[-1]
    logger.debug(f"Lasso CV picked lam={grid[best]:.4g} (index {best}), {np.count_nonzero(coef)} nonzeros")
    return coef, float(grid[best])


def scaled_lasso(
    X: np.ndarray, Y: np.ndarray, lam0: Optional[float] = None, tol: float = 1e-6, max_iter: int = 100
) -> Tuple[np.ndarray, float]:
    """Joint lasso coefficients and noise level: alternate b at penalty sigma*lam0 and sigma = ||Y - Xb||/sqrt(n)."""
    n, p = X.shape
    require(n >= 2, f"scaled lasso needs n >= 2, got n={n}")
    if lam0 is None:
        lam0 = math.sqrt(2.0 * math.log(p) / n)

    sigma = math.sqrt(float(np.mean(Y**2)))
    b = np.zeros(p)
    if sigma == 0:
        return b, 0.0

    for it in range(1, max_iter + 1):
        b = lasso_cd(X, Y, sigma * lam0, b0=b)
        resid = Y - X @ b
        sigma_new = float(np.linalg.norm(resid)) / math.sqrt(n)
        if abs(sigma_new - sigma) < tol:
            logger.debug(f"Scaled lasso converged after {it} alternations, sigma={sigma_new:.6g}")
            return b, sigma_new
        sigma = sigma_new
    raise ConvergenceFailure(f"scaled lasso did not converge in {max_iter} alternations")


def nodewise_inverse(X: np.ndarray) -> np.ndarray:
    """
    Approximate inverse of X^T X / n from p node-wise lasso regressions.
    Row j is (e_j - gamma_j) / tau_j^2 where gamma_j regresses column j on the
    rest at penalty sqrt(log p / n) * rms(x_j).
    """
    n, p = X.shape
    require(p >= 2, f"node-wise inverse needs p >= 2, got p={p}")

    S = X.T @ X / n
    Z, scale = _standardize(X)
    rms = np.sqrt(np.diag(S))
    G = Z.T @ Z
    base_lam = math.sqrt(math.log(p) / n)

    M = np.zeros((p, p))
    for j in range(p):
        others = np.delete(np.arange(p), j)
        Zo = Z[:, others]
        coef = _gram_path(
            Zo, X[:, j], [base_lam * rms[j]], gram=G[np.ix_(others, others)], xy=Zo.T @ X[:, j]
        )[0]
        gamma = np.zeros(p)
        gamma[others] = coef / scale[others]
        tau2 = S[j, j] - S[j] @ gamma
        tau2 = max(tau2, 1e-12 * max(S[j, j], 1.0))
        M[j] = -gamma / tau2
        M[j, j] = 1.0 / tau2
    return M


def debiased_lasso(X: np.ndarray, Y: np.ndarray, folds: int = 10, seed: int = 0) -> RegressionFit:
    """De-biased lasso: b + M X^T (Y - Xb) / n with b from lasso_cv and M from nodewise_inverse."""
    n, p = X.shape
    b, lam = lasso_cv(X, Y, folds=folds, seed=seed)
    M = nodewise_inverse(X)
    xi = b + M @ (X.T @ (Y - X @ b)) / n
    _, sigma = scaled_lasso(X, Y)
    return RegressionFit(
        xi_hat=xi,
        sigma_resid2=sigma**2,
        method="debiased-lasso",
        lam=lam,
        diagnostics={"lasso_nonzeros": int(np.count_nonzero(b))},
    )
