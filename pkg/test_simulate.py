import numpy as np
import pytest

from core_types import dataset_hash
from errors import DegenerateSignal, InvalidConfig
from simulate import (
    SNR_GRID,
    GwasConfig,
    HighDimConfig,
    LowDimConfig,
    PopulationModel,
    gen_gwas,
    gen_highdim,
    gen_lowdim,
    gen_sparse_noise_cov,
    kmeans,
    population_structure,
    snr_rescale,
    snr_weights,
)


def test_lowdim_truth():
    d, truth = gen_lowdim(LowDimConfig(n=200, s=3, seed=1))
    np.testing.assert_array_equal(truth.beta, [1, 1, 1] + [0] * 10)
    np.testing.assert_array_equal(truth.delta, [1, 1, 1])
    assert truth.alpha.shape == (13, 3)
    assert np.all(np.abs(truth.alpha) <= 1)
    assert d.W is None and d.X.shape == (200, 13)


def test_lowdim_is_seeded():
    a, _ = gen_lowdim(LowDimConfig(n=50, seed=4))
    b, _ = gen_lowdim(LowDimConfig(n=50, seed=4))
    c, _ = gen_lowdim(LowDimConfig(n=50, seed=5))
    assert dataset_hash(a) == dataset_hash(b)
    assert dataset_hash(a) != dataset_hash(c)


def test_lowdim_assembles_structural_equations():
    d, truth = gen_lowdim(LowDimConfig(n=100, s=2, seed=3))
    confounded = d.Y - d.X @ truth.beta - truth.U @ truth.delta
    # what remains is the outcome noise
    assert abs(confounded.std() - 1.0) < 0.3


def test_lowdim_measured_confounders():
    d, truth = gen_lowdim(LowDimConfig(n=80, r=3, seed=2))
    assert d.W.shape == (80, 3)
    np.testing.assert_array_equal(truth.lambda_w, np.ones(3))
    assert truth.eta.shape == (13, 3)


def test_lowdim_config_guards():
    with pytest.raises(InvalidConfig):
        gen_lowdim(LowDimConfig(s=0))
    with pytest.raises(InvalidConfig):
        gen_lowdim(LowDimConfig(p=5, s=6))


def test_lowdim_covariance_converges():
    d, truth = gen_lowdim(LowDimConfig(n=20000, seed=11))
    target = truth.alpha @ truth.alpha.T + np.eye(13)
    emp = np.cov(d.X, rowvar=False)
    assert np.linalg.norm(emp - target) / np.linalg.norm(target) < 0.1


def test_highdim_defaults():
    d, truth = gen_highdim(HighDimConfig(n=50, p=60, seed=0))
    np.testing.assert_array_equal(truth.beta[:5], 1.0)
    assert np.count_nonzero(truth.beta) == 5
    np.testing.assert_array_equal(truth.sigma_eps_x, 2.0 * np.eye(60))
    assert np.all(np.abs(truth.delta) <= 1)


def test_highdim_sparse_noise():
    _, truth = gen_highdim(HighDimConfig(n=30, p=40, noise_offdiag_mean=0.1, noise_offdiag_sd=0.2, seed=0))
    sigma = truth.sigma_eps_x
    np.testing.assert_array_equal(sigma, sigma.T)
    assert np.linalg.eigvalsh(sigma)[0] > 0


def test_sparse_noise_cov_degenerate_is_2i():
    np.testing.assert_array_equal(gen_sparse_noise_cov(7, 0.0, 0.0), 2.0 * np.eye(7))


def test_sparse_noise_cov_is_pd():
    sigma = gen_sparse_noise_cov(50, 0.1, 0.2, seed=3)
    np.testing.assert_array_equal(sigma - sigma.T, 0.0)
    assert np.linalg.eigvalsh(sigma)[0] > 0


@pytest.mark.parametrize("snr,expected", [(1.0, (0.25, 0.25, 0.5)), (3.0, (0.375, 0.375, 0.25))])
def test_snr_weights(snr, expected):
    w = snr_weights(snr)
    assert (w.v_gene, w.v_conf, w.v_noise) == pytest.approx(expected)
    assert w.snr == pytest.approx(snr)


def test_snr_grid_and_guard():
    assert {0.1, 0.5, 0.7, 1.0, 3.0, 5.0, 7.0, 9.0, 11.0, 13.0} == set(SNR_GRID)
    for snr in SNR_GRID:
        w = snr_weights(snr)
        assert w.v_gene + w.v_conf + w.v_noise == pytest.approx(1.0)
    with pytest.raises(InvalidConfig):
        snr_weights(0.0)


def test_snr_rescale_matches_formula(rng):
    gene, lam, eps = rng.normal(size=10), rng.normal(size=10), rng.normal(size=10)
    w = snr_weights(3.0)
    lam2, eps2 = snr_rescale(lam, eps, gene, w)
    sd = lambda v: np.std(v, ddof=1)
    np.testing.assert_allclose(lam2, lam * sd(gene) / np.sqrt(w.v_gene) * np.sqrt(w.v_conf) / sd(lam))
    np.testing.assert_allclose(eps2, eps * sd(gene) / np.sqrt(w.v_gene) * np.sqrt(w.v_noise) / sd(eps))
    assert abs(sd(lam2) - sd(gene)) < 1e-10


def test_snr_rescale_degenerate(rng):
    with pytest.raises(DegenerateSignal):
        snr_rescale(np.ones(5), rng.normal(size=5), rng.normal(size=5), snr_weights(1.0))


def test_population_structure_spatial():
    S, gamma = population_structure(PopulationModel.SPATIAL, 30, 20, seed=1)
    np.testing.assert_array_equal(gamma[2], 0.05)
    np.testing.assert_array_equal(S[:, 2], 1.0)
    assert np.all((gamma[:2] >= 0) & (gamma[:2] <= 0.45))


def test_population_structure_bn_one_hot():
    S, gamma = population_structure("BN", 50, 10, seed=2)
    np.testing.assert_array_equal(S.sum(axis=1), 1.0)
    assert set(np.unique(S)) <= {0.0, 1.0}
    assert np.all((gamma > 0) & (gamma < 1))


def test_population_structure_psd_rows_on_simplex():
    S, _ = population_structure(PopulationModel.PSD, 40, 10, seed=3)
    np.testing.assert_allclose(S.sum(axis=1), 1.0)


def test_population_structure_guards():
    with pytest.raises(InvalidConfig):
        population_structure("nope", 10, 10)
    with pytest.raises(InvalidConfig):
        population_structure(PopulationModel.BN, 10, 10, d=2)


def test_kmeans_single_cluster_and_singletons(rng):
    rows = rng.normal(size=(6, 2))
    assert set(kmeans(rows, 1)) == {1}
    assert sorted(kmeans(rows, 6)) == [1, 2, 3, 4, 5, 6]


def test_kmeans_separated_clouds(rng):
    a = rng.normal(0.0, 0.1, size=(20, 2))
    b = rng.normal(10.0, 0.1, size=(20, 2))
    labels = kmeans(np.vstack([a, b]), 2, seed=0)
    assert len(set(labels[:20])) == 1 and len(set(labels[20:])) == 1
    assert labels[0] != labels[-1]


def test_gwas_genotypes_and_beta():
    d, truth = gen_gwas(GwasConfig(n=120, p=200, seed=5))
    assert set(np.unique(d.X)) <= {0.0, 1.0, 2.0}
    assert np.count_nonzero(truth.beta) == 2
    np.testing.assert_array_equal(truth.beta[:2], 0.5)
    assert truth.U.shape == (120, 3)


def test_gwas_perturbed_null_beta():
    _, truth = gen_gwas(GwasConfig(n=60, p=100, perturb_null_beta=True, seed=1))
    null = truth.beta[1:]
    assert np.all(np.abs(null) <= 0.05)
    assert np.count_nonzero(null) > 0


@pytest.mark.parametrize("snr", [1.0, 5.0])
def test_gwas_variance_shares(snr):
    cfg = GwasConfig(n=1000, p=200, snr=snr, seed=9)
    d, truth = gen_gwas(cfg)
    gene = d.X @ truth.beta
    rest = d.Y - gene
    w = snr_weights(snr)
    total = np.var(gene, ddof=1) / w.v_gene
    # gene and confounder shares are equal by construction
    assert np.var(gene, ddof=1) / total == pytest.approx(w.v_gene)
    assert np.var(rest, ddof=1) / total == pytest.approx(w.v_conf + w.v_noise, abs=0.1)
