"""
Synthetic data generators: the low- and high-dimensional factor designs and
the three synthetic GWAS population-structure models.
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Tuple

import numpy as np
import pandas as pd
import scipy.linalg as la
from pydantic import BaseModel
from scipy import stats
from sklearn.cluster import KMeans

from core_types import Dataset, GroundTruth
from errors import DegenerateSignal, InvalidConfig, NotPositiveDefinite, require

logger = logging.getLogger(__name__)

SNR_GRID = (0.1, 0.5, 0.7, 1.0, 3.0, 5.0, 7.0, 9.0, 11.0, 13.0)
BN_MIXING = (60 / 210, 60 / 210, 90 / 210)
NOISE_OFFDIAG_RATE = 0.05
ALLELE_CLIP = (0.01, 0.99)


class LowDimConfig(BaseModel):
    n: int = 1000
    p: int = 13
    q: int = 3
    s: int = 3
    r: int = 0
    seed: int = 0

    def check(self) -> "LowDimConfig":
        require(self.n >= 1 and self.p >= 1, "n and p must be positive")
        require(1 <= self.q <= self.p, f"need 1 <= q <= p, got q={self.q}, p={self.p}")
        require(1 <= self.s <= self.p, f"need 1 <= s <= p, got s={self.s}, p={self.p}")
        require(self.r >= 0, "r must be non-negative")
        return self


class HighDimConfig(BaseModel):
    n: int = 300
    p: int = 300
    q: int = 3
    s: int = 5
    r: int = 0
    noise_offdiag_mean: float = 0.0
    noise_offdiag_sd: float = 0.0
    seed: int = 0

    def check(self) -> "HighDimConfig":
        require(self.n >= 1 and self.p >= 1, "n and p must be positive")
        require(0 <= self.s <= self.p, f"need s <= p, got s={self.s}, p={self.p}")
        require(1 <= self.q <= self.p, f"need 1 <= q <= p, got q={self.q}")
        require(self.noise_offdiag_sd >= 0, "noise_offdiag_sd must be non-negative")
        require(self.r >= 0, "r must be non-negative")
        return self


class PopulationModel(str, Enum):
    BN = "BN"
    PSD = "PSD"
    SPATIAL = "Spatial"


class GwasConfig(BaseModel):
    model: PopulationModel = PopulationModel.BN
    n: int = 1000
    p: int = 1000
    d: int = 3
    snr: float = 1.0
    causal_fraction: float = 0.01
    causal_value: float = 0.5
    perturb_null_beta: bool = False
    seed: int = 0
    allele_table: Optional[str] = None

    def check(self) -> "GwasConfig":
        require(self.n >= 3 and self.p >= 1, "need n >= 3 and p >= 1")
        require(0 < self.causal_fraction < 1, "causal_fraction must lie in (0, 1)")
        require(self.snr > 0, "snr must be positive")
        require(self.d == 3, "all population models use d = 3")
        return self


@dataclass(frozen=True)
class SnrWeights:
    v_gene: float
    v_conf: float
    v_noise: float

    @property
    def snr(self) -> float:
        return (self.v_gene + self.v_conf) / self.v_noise


def _assemble(rng, n, p, q, alpha, delta, beta, sigma_eps_x, r, unit_lambda_w):
    # Draw order is fixed: U, eps_x, eps_y, then W, eta, lambda.
    U = rng.standard_normal((n, q))
    diag = np.diag(sigma_eps_x)
    if np.count_nonzero(sigma_eps_x - np.diag(diag)) == 0:
        eps_x = rng.standard_normal((n, p)) * np.sqrt(diag)
    else:
        try:
            L = la.cholesky(sigma_eps_x, lower=True)
        except la.LinAlgError as e:
            raise NotPositiveDefinite(f"noise covariance is not positive definite: {e}") from e
        eps_x = rng.standard_normal((n, p)) @ L.T
    eps_y = rng.standard_normal(n)

    X = U @ alpha.T + eps_x
    Y_conf = U @ delta + eps_y

    W = eta = lambda_w = None
    if r > 0:
        W = rng.standard_normal((n, r))
        eta = rng.uniform(-1, 1, size=(p, r))
        lambda_w = np.ones(r) if unit_lambda_w else rng.uniform(-1, 1, size=r)
        X = X + W @ eta.T
        Y_conf = Y_conf + W @ lambda_w
    Y = X @ beta + Y_conf

    truth = GroundTruth(
        beta=beta, q=q, alpha=alpha, delta=delta, U=U,
        sigma_eps_x=sigma_eps_x, eta=eta, lambda_w=lambda_w,
    )
    return Dataset(X=X, Y=Y, W=W), truth


def gen_lowdim(cfg: LowDimConfig) -> Tuple[Dataset, GroundTruth]:
    """Low-dimensional design: beta = (1,..,1,0,..,0), delta = 1, alpha ~ Uniform(-1,1)."""
    cfg.check()
    rng = np.random.default_rng(cfg.seed)
    beta = np.zeros(cfg.p)
    beta[: cfg.s] = 1.0
    delta = np.ones(cfg.q)
    alpha = rng.uniform(-1, 1, size=(cfg.p, cfg.q))
    return _assemble(rng, cfg.n, cfg.p, cfg.q, alpha, delta, beta, np.eye(cfg.p), cfg.r, True)


def gen_highdim(cfg: HighDimConfig) -> Tuple[Dataset, GroundTruth]:
    """High-dimensional design: alpha, delta ~ Uniform(-1,1); noise covariance 2I or sparse."""
    cfg.check()
    rng = np.random.default_rng(cfg.seed)
    beta = np.zeros(cfg.p)
    beta[: cfg.s] = 1.0
    alpha = rng.uniform(-1, 1, size=(cfg.p, cfg.q))
    delta = rng.uniform(-1, 1, size=cfg.q)
    if cfg.noise_offdiag_mean == 0 and cfg.noise_offdiag_sd == 0:
        sigma = 2.0 * np.eye(cfg.p)
    else:
        sigma = gen_sparse_noise_cov(
            cfg.p, cfg.noise_offdiag_mean, cfg.noise_offdiag_sd, NOISE_OFFDIAG_RATE,
            int(rng.integers(2**31)),
        )
    return _assemble(rng, cfg.n, cfg.p, cfg.q, alpha, delta, beta, sigma, cfg.r, False)


def gen_sparse_noise_cov(p: int, mean: float, sd: float, sparsity_rate: float = NOISE_OFFDIAG_RATE,
                         seed: int = 0) -> np.ndarray:
    """
    Symmetric covariance with diagonal 2 and a random sparse subset of
    off-diagonal pairs drawn from N(mean, sd^2). Repaired to be positive
    definite by inflating the diagonal when needed.
    """
    require(p >= 1, "p must be positive")
    require(sd >= 0, "sd must be non-negative")
    rng = np.random.default_rng(seed)
    sigma = 2.0 * np.eye(p)
    rows, cols = np.triu_indices(p, k=1)
    picked = rng.random(rows.size) < sparsity_rate
    values = rng.normal(mean, sd, size=int(picked.sum()))
    sigma[rows[picked], cols[picked]] = values
    sigma[cols[picked], rows[picked]] = values

    lam_min = la.eigvalsh(sigma)[0]
    if lam_min <= 0:
        sigma += (abs(lam_min) + 0.05) * np.eye(p)
        logger.debug(f"Inflated noise covariance diagonal by {abs(lam_min) + 0.05:.4f}")
    return sigma


def snr_weights(snr: float) -> SnrWeights:
    """Variance shares with v_gene = v_conf and (v_gene + v_conf) / v_noise = snr."""
    if not snr > 0:
        raise InvalidConfig(f"snr must be positive, got {snr}")
    v_noise = 1.0 / (1.0 + snr)
    v_half = snr / (2.0 * (1.0 + snr))
    return SnrWeights(v_gene=v_half, v_conf=v_half, v_noise=v_noise)


def _read_allele_table(path: str, p: int, rng) -> Tuple[np.ndarray, np.ndarray]:
    table = pd.read_csv(path, header=None, dtype=float).to_numpy()
    require(table.ndim == 2 and table.shape[1] == 2, "allele table must have two columns (p_i, F_i)")
    rows = rng.integers(0, table.shape[0], size=p)
    return table[rows, 0], table[rows, 1]


def _balding_nichols(rng, d: int, p: int, allele_table: Optional[str]) -> np.ndarray:
    if allele_table is not None:
        freq, fst = _read_allele_table(allele_table, p, rng)
    else:
        freq = rng.uniform(0.05, 0.95, size=p)
        fst = rng.uniform(0.01, 0.10, size=p)
    a = freq * (1 - fst) / fst
    b = (1 - freq) * (1 - fst) / fst
    return rng.beta(a, b, size=(d, p))


def population_structure(model, n: int, p: int, d: int = 3, seed: int = 0,
                         allele_table: Optional[str] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Return the population structure S (n x d) and allele-frequency map Gamma (d x p)."""
    try:
        model = PopulationModel(model)
    except ValueError as e:
        raise InvalidConfig(f"unknown population model {model!r}") from e
    require(d == 3, f"population models use d = 3, got {d}")
    rng = np.random.default_rng(seed)

    if model is PopulationModel.BN:
        gamma = _balding_nichols(rng, d, p, allele_table)
        S = rng.multinomial(1, BN_MIXING, size=n).astype(float)
    elif model is PopulationModel.PSD:
        gamma = _balding_nichols(rng, d, p, allele_table)
        S = rng.dirichlet([0.5] * d, size=n)
    else:
        gamma = np.empty((d, p))
        gamma[:2] = 0.9 * rng.uniform(0, 0.5, size=(2, p))
        gamma[2] = 0.05
        S = np.ones((n, d))
        S[:, :2] = rng.beta(0.1, 0.1, size=(n, 2))
    return S, gamma


def snr_rescale(lambda_vec: np.ndarray, eps_vec: np.ndarray, gene_signal_vec: np.ndarray,
                weights: SnrWeights) -> Tuple[np.ndarray, np.ndarray]:
    """Rescale confounder and noise terms so their variances match the SNR shares."""
    sd_gene = np.std(gene_signal_vec, ddof=1)
    sd_lam = np.std(lambda_vec, ddof=1)
    sd_eps = np.std(eps_vec, ddof=1)
    if min(sd_gene, sd_lam, sd_eps) <= 0:
        raise DegenerateSignal(
            f"zero standard deviation: gene={sd_gene:.3g}, lambda={sd_lam:.3g}, eps={sd_eps:.3g}"
        )
    unit = sd_gene / math.sqrt(weights.v_gene)
    lam = lambda_vec * unit * math.sqrt(weights.v_conf) / sd_lam
    eps = eps_vec * unit * math.sqrt(weights.v_noise) / sd_eps
    return lam, eps


def kmeans(rows: np.ndarray, K: int, seed: int = 0, max_iter: int = 100, n_init: int = 10) -> np.ndarray:
    """Lloyd's k-means with k-means++ seeding and restarts; labels are 1..K."""
    rows = np.asarray(rows, dtype=float)
    require(K >= 1, "K must be at least 1")
    require(rows.shape[0] >= K, f"need at least K={K} rows, got {rows.shape[0]}")
    model = KMeans(n_clusters=K, init="k-means++", n_init=n_init, max_iter=max_iter,
                   random_state=seed, algorithm="lloyd")
    return model.fit_predict(rows).astype(int) + 1


def gen_gwas(cfg: GwasConfig) -> Tuple[Dataset, GroundTruth]:
    """Synthetic GWAS: Binomial genotypes from P = S Gamma, trait y = A beta + lambda + eps."""
    cfg.check()
    rng = np.random.default_rng(cfg.seed)
    S, gamma = population_structure(cfg.model, cfg.n, cfg.p, cfg.d, int(rng.integers(2**31)), cfg.allele_table)
    P = np.clip(S @ gamma, *ALLELE_CLIP)
    A = rng.binomial(2, P).astype(float)

    n_causal = math.ceil(round(cfg.causal_fraction * cfg.p, 9))
    beta = np.zeros(cfg.p)
    beta[:n_causal] = cfg.causal_value
    if cfg.perturb_null_beta:
        beta[n_causal:] = rng.uniform(-0.05, 0.05, size=cfg.p - n_causal)

    labels = kmeans(S, 3, seed=int(rng.integers(2**31)))
    tau2 = stats.invgamma(a=3, scale=1).rvs(size=3, random_state=rng)
    lam = labels.astype(float)
    eps = rng.normal(0.0, np.sqrt(tau2[labels - 1]))

    gene = A @ beta
    lam, eps = snr_rescale(lam, eps, gene, snr_weights(cfg.snr))
    Y = gene + lam + eps
    logger.debug(f"GWAS {cfg.model.value}: n={cfg.n} p={cfg.p} causal={n_causal} snr={cfg.snr}")

    truth = GroundTruth(beta=beta, q=cfg.d, alpha=gamma.T, U=S)
    return Dataset(X=A, Y=Y), truth
