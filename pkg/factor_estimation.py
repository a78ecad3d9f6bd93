"""
Latent factor structure of the treatments: loadings (EM maximum likelihood or
PCA), covariance estimates (sample or POET), gamma = Sigma_X^{-1} alpha, and
the number of factors.
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import scipy.linalg as la

from errors import ConvergenceFailure, SingularCovariance, require

logger = logging.getLogger(__name__)


class FactorMethod(str, Enum):
    MLE = "MLE"
    PCA_POET = "PCA+POET"


@dataclass
class FactorFit:
    alpha_hat: np.ndarray
    sigma_x_hat: np.ndarray
    sigma_eps_hat: np.ndarray
    q: int
    method: FactorMethod
    diagnostics: dict = field(default_factory=dict)


@dataclass
class GammaHat:
    gamma: np.ndarray


def sample_covariance(X: np.ndarray) -> np.ndarray:
    """X^T X / n for a column-centered X."""
    return X.T @ X / X.shape[0]


def _top_eigenpairs(X: np.ndarray, k: int):
    """Descending eigenpairs of X^T X / n from a thin SVD, signs fixed for determinism."""
    n = X.shape[0]
    _, s, vt = la.svd(X, full_matrices=False)
    eigvals = s**2 / n
    vecs = vt[:k].T.copy()
    for j in range(vecs.shape[1]):
        if vecs[np.argmax(np.abs(vecs[:, j])), j] < 0:
            vecs[:, j] *= -1
    return eigvals, vecs


def _make_pd(sigma: np.ndarray, jitter: float) -> np.ndarray:
    lam_min = la.eigvalsh(sigma)[0]
    if lam_min <= 0:
        logger.debug(f"Repairing covariance: lambda_min={lam_min:.3e}")
        sigma = sigma + (abs(lam_min) + jitter) * np.eye(sigma.shape[0])
    return sigma


def fa_pca(X: np.ndarray, q: int) -> np.ndarray:
    """Principal component loadings: top-q eigenvectors scaled by sqrt(eigenvalue)."""
    require(q >= 1, f"q must be at least 1, got {q}")
    require(q <= min(X.shape), f"q={q} exceeds min(n, p)={min(X.shape)}")
    eigvals, vecs = _top_eigenpairs(X, q)
    return vecs * np.sqrt(np.maximum(eigvals[:q], 0.0))


def _gaussian_loglik(sigma: np.ndarray, S: np.ndarray) -> float:
    # Average per-sample log-likelihood of N(0, sigma) given sample covariance S.
    p = S.shape[0]
    c, low = la.cho_factor(sigma, lower=True)
    logdet = 2.0 * np.sum(np.log(np.diag(c)))
    trace = np.trace(la.cho_solve((c, low), S))
    return -0.5 * (p * math.log(2 * math.pi) + logdet + trace)


def fa_mle(X: np.ndarray, q: int, tol: float = 1e-8, max_iter: int = 1000) -> FactorFit:
    """
    Gaussian factor analysis with diagonal noise covariance, fitted by EM from
    the PCA solution. Stops when the average log-likelihood improves by less
    than tol, or after max_iter iterations.
    """
    n, p = X.shape
    require(q >= 1, f"q must be at least 1, got {q}")
    require(n > p > q, f"factor MLE needs n > p > q, got n={n}, p={p}, q={q}")

    S = sample_covariance(X)
    s_diag = np.diag(S).copy()
    psi_floor = 1e-6 * np.maximum(s_diag, 1e-12)

    L = fa_pca(X, q)
    psi = np.maximum(s_diag - np.sum(L**2, axis=1), psi_floor)
    loglik = [_gaussian_loglik(L @ L.T + np.diag(psi), S)]
    eye_q = np.eye(q)

    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        # E-step via Woodbury: B = (I + L^T Psi^-1 L)^-1 L^T Psi^-1
        lt_psi = L.T / psi
        G = la.inv(eye_q + lt_psi @ L)
        B = G @ lt_psi
        BS = B @ S
        Ezz = eye_q - B @ L + BS @ B.T

        # M-step
        L = la.solve(Ezz, BS, assume_a="pos").T
        psi = np.maximum(s_diag - np.sum(L * BS.T, axis=1), psi_floor)

        ll = _gaussian_loglik(L @ L.T + np.diag(psi), S)
        if not np.isfinite(ll):
            raise ConvergenceFailure(f"factor EM produced a non-finite log-likelihood at iteration {n_iter}")
        loglik.append(ll)
        if ll - loglik[-2] < tol:
            break

    logger.debug(f"Factor EM stopped after {n_iter} iterations, loglik={loglik[-1]:.6f}")
    sigma_eps = np.diag(psi)
    return FactorFit(
        alpha_hat=L,
        sigma_x_hat=L @ L.T + sigma_eps,
        sigma_eps_hat=sigma_eps,
        q=q,
        method=FactorMethod.MLE,
        diagnostics={"em_iterations": n_iter, "loglik": loglik, "eigenvalues": la.eigvalsh(S)[::-1].tolist()},
    )


def poet(X: np.ndarray, q: int, thresh_const: float = 0.5):
    """
    POET covariance: rank-q spectral part plus a hard-thresholded residual
    covariance. Returns (sigma_x_hat, sigma_eps_hat).
    """
    n, p = X.shape
    require(q >= 0, f"q must be non-negative, got {q}")
    require(q <= min(n, p), f"q={q} exceeds min(n, p)")
    require(thresh_const >= 0, "thresh_const must be non-negative")

    S = sample_covariance(X)
    if q > 0:
        eigvals, vecs = _top_eigenpairs(X, q)
        low_rank = (vecs * eigvals[:q]) @ vecs.T
    else:
        low_rank = np.zeros_like(S)
    R = S - low_rank

    r_diag = np.maximum(np.diag(R), 0.0)
    if np.isinf(thresh_const):
        level = np.full_like(R, np.inf)
    else:
        level = thresh_const * math.sqrt(math.log(p) / n) * np.sqrt(np.outer(r_diag, r_diag))
    R_thr = np.where(np.abs(R) > level, R, 0.0)
    np.fill_diagonal(R_thr, np.diag(R))

    sigma_x = _make_pd(low_rank + R_thr, jitter=1e-6)
    return sigma_x, R_thr


def gamma_from(fit: FactorFit) -> GammaHat:
    """Solve Sigma_X gamma = alpha without forming an explicit inverse."""
    alpha = fit.alpha_hat
    if alpha.shape[1] == 0:
        return GammaHat(gamma=np.zeros_like(alpha))
    try:
        gamma = la.solve(fit.sigma_x_hat, alpha, assume_a="pos")
    except (la.LinAlgError, ValueError) as e:
        raise SingularCovariance(f"cannot solve against Sigma_X: {e}") from e

    resid = np.linalg.norm(fit.sigma_x_hat @ gamma - alpha)
    if not np.isfinite(resid) or resid > 1e-8 * max(np.linalg.norm(alpha), 1e-300):
        raise SingularCovariance(f"Sigma_X solve residual too large: {resid:.3e}")
    return GammaHat(gamma=gamma)


def _edge_slope(eigvals: np.ndarray, j: int) -> float:
    # Slope of eigenvalues j..j+4 (1-based) regressed on (j-1)^{2/3}..(j+3)^{2/3}.
    idx = np.arange(j, min(j + 4, eigvals.size) + 1)
    lam = eigvals[idx - 1]
    x = (idx - 1.0) ** (2.0 / 3.0)
    slope, _ = np.polyfit(x, lam, 1)
    return slope


def select_q(X: np.ndarray, q_max: int, max_rounds: int = 10) -> int:
    """
    Number of factors by the eigenvalue-difference criterion: the largest k <= q_max
    whose eigen-gap lambda_k - lambda_{k+1} reaches a threshold calibrated from the
    slope of the edge eigenvalues against j^{2/3}, iterated to a fixed point.
    """
    n, p = X.shape
    require(q_max >= 0, f"q_max must be non-negative, got {q_max}")
    require(q_max < min(n, p) - 2, f"q_max={q_max} must be below min(n, p) - 2 = {min(n, p) - 2}")
    if q_max == 0:
        return 0

    eigvals, _ = _top_eigenpairs(X, 0)
    if eigvals.size < p:
        eigvals = np.concatenate([eigvals, np.zeros(p - eigvals.size)])
    gaps = eigvals[:q_max] - eigvals[1: q_max + 1]

    j = q_max + 1
    q_hat = 0
    for _ in range(max_rounds):
        threshold = 2.0 * abs(_edge_slope(eigvals, j))
        above = np.flatnonzero(gaps >= threshold)
        q_new = int(above[-1]) + 1 if above.size else 0
        if q_new + 1 == j:
            q_hat = q_new
            break
        q_hat = q_new
        j = q_new + 1
    logger.debug(f"Selected q={q_hat} (q_max={q_max})")
    return q_hat
