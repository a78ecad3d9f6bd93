import numpy as np
import pytest

from bundle import read_bundle, write_bundle
from core_types import (
    Dataset,
    GroundTruth,
    SparsityPattern,
    center_columns,
    dataset_hash,
    prepare_for_fit,
    residualize_on_confounders,
    validate_dataset,
)
from errors import DimensionMismatch, EmptyMatrix, InvalidConfig, IoError, NonFiniteEntry, SingularDesign


def _dataset(rng, n=40, p=5, r=0):
    X = rng.normal(size=(n, p))
    Y = rng.normal(size=n)
    W = rng.normal(size=(n, r)) if r else None
    return Dataset(X=X, Y=Y, W=W)


def test_dataset_shapes_and_read_only(rng):
    d = _dataset(rng, n=10, p=3, r=2)
    assert (d.n, d.p, d.r) == (10, 3, 2)
    with pytest.raises(ValueError):
        d.X[0, 0] = 1.0


def test_dataset_copies_input(rng):
    X = rng.normal(size=(5, 2))
    d = Dataset(X=X, Y=np.zeros(5))
    X[0, 0] = 99.0
    assert d.X[0, 0] != 99.0


def test_validate_rejects_bad_shapes_and_values():
    with pytest.raises(DimensionMismatch):
        validate_dataset(Dataset(X=np.zeros((4, 2)), Y=np.zeros(3)))
    with pytest.raises(DimensionMismatch):
        validate_dataset(Dataset(X=np.zeros((4, 2)), Y=np.zeros(4), W=np.zeros((3, 1))))
    X = np.zeros((4, 2))
    X[1, 1] = np.nan
    with pytest.raises(NonFiniteEntry):
        validate_dataset(Dataset(X=X, Y=np.zeros(4)))


def test_center_columns():
    m = np.array([[1.0, 2.0], [3.0, 6.0]])
    np.testing.assert_allclose(center_columns(m), [[-1.0, -2.0], [1.0, 2.0]])
    np.testing.assert_allclose(center_columns(np.array([1.0, 2.0, 3.0])), [-1.0, 0.0, 1.0])
    with pytest.raises(EmptyMatrix):
        center_columns(np.zeros((0, 3)))


def test_residualization_is_orthogonal_to_w(rng):
    d = _dataset(rng, n=60, p=4, r=2)
    out = residualize_on_confounders(d)
    assert out.W is None
    Wc = center_columns(d.W)
    np.testing.assert_allclose(Wc.T @ out.X, 0.0, atol=1e-10)
    np.testing.assert_allclose(Wc.T @ out.Y, 0.0, atol=1e-10)


def test_residualization_errors(rng):
    with pytest.raises(InvalidConfig):
        residualize_on_confounders(_dataset(rng))
    W = rng.normal(size=(10, 1))
    d = Dataset(X=rng.normal(size=(10, 2)), Y=rng.normal(size=10), W=np.hstack([W, 2 * W]))
    with pytest.raises(SingularDesign):
        residualize_on_confounders(d)


def test_prepare_for_fit_centers(rng):
    d = Dataset(X=rng.normal(3.0, 1.0, size=(30, 3)), Y=rng.normal(5.0, 1.0, size=30))
    Xc, Yc = prepare_for_fit(d)
    np.testing.assert_allclose(Xc.mean(axis=0), 0.0, atol=1e-12)
    assert abs(Yc.mean()) < 1e-12


def test_dataset_hash_tracks_content(rng):
    d = _dataset(rng)
    same = Dataset(X=d.X, Y=d.Y)
    other = Dataset(X=d.X, Y=d.Y + 1.0)
    assert dataset_hash(d) == dataset_hash(same)
    assert dataset_hash(d) != dataset_hash(other)


def test_sparsity_pattern_from_beta():
    pattern = SparsityPattern.from_beta(np.array([0.0, 1.0, 0.0, -2.0]))
    assert pattern.support == (1, 3)
    assert pattern.s == 2


def test_bundle_round_trip(tmp_path, rng):
    d = _dataset(rng, n=8, p=3, r=1)
    truth = GroundTruth(beta=np.array([1.0, 0.0, 0.5]), q=2, delta=np.array([1.0, -1.0]))
    write_bundle(tmp_path / "b", d, truth, meta={"seed": 7, "generator": "lowdim"})
    back, back_truth, meta = read_bundle(tmp_path / "b")
    np.testing.assert_array_equal(back.X, d.X)
    np.testing.assert_array_equal(back.Y, d.Y)
    np.testing.assert_array_equal(back.W, d.W)
    np.testing.assert_array_equal(back_truth.beta, truth.beta)
    assert back_truth.alpha is None
    assert meta["n"] == 8 and meta["seed"] == 7 and meta["generator"] == "lowdim"


def test_bundle_missing_directory(tmp_path):
    with pytest.raises(IoError):
        read_bundle(tmp_path / "missing")
