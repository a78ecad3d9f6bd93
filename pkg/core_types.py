"""
Shared data model: datasets, generator-side ground truth, and the
centering / measured-confounder residualization helpers.
"""

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from errors import DimensionMismatch, EmptyMatrix, InvalidConfig, NonFiniteEntry, SingularDesign

logger = logging.getLogger(__name__)


def _frozen(a: Optional[np.ndarray]) -> Optional[np.ndarray]:
    if a is None:
        return None
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Dataset:
    """Treatments X (n x p), outcome Y (n,), optional measured confounders W (n x r)."""

    X: np.ndarray
    Y: np.ndarray
    W: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "X", _frozen(self.X))
        object.__setattr__(self, "Y", _frozen(self.Y))
        object.__setattr__(self, "W", _frozen(self.W))

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def r(self) -> int:
        return 0 if self.W is None else self.W.shape[1]


@dataclass(frozen=True)
class GroundTruth:
    """Generator-side parameters used only for scoring."""

    beta: np.ndarray
    q: int
    alpha: Optional[np.ndarray] = None
    delta: Optional[np.ndarray] = None
    U: Optional[np.ndarray] = None
    sigma_eps_x: Optional[np.ndarray] = None
    eta: Optional[np.ndarray] = None
    lambda_w: Optional[np.ndarray] = None

    def to_dict(self) -> dict:
        out = {"q": self.q}
        for name in ("beta", "alpha", "delta", "U", "sigma_eps_x", "eta", "lambda_w"):
            value = getattr(self, name)
            out[name] = None if value is None else np.asarray(value).tolist()
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "GroundTruth":
        arrays = {
            name: None if data.get(name) is None else np.asarray(data[name], dtype=float)
            for name in ("beta", "alpha", "delta", "U", "sigma_eps_x", "eta", "lambda_w")
        }
        return cls(q=int(data["q"]), **arrays)


@dataclass(frozen=True)
class SparsityPattern:
    support: Tuple[int, ...]
    s: int = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "s", len(self.support))

    @classmethod
    def from_beta(cls, beta: np.ndarray, zero_tol: float = 0.0) -> "SparsityPattern":
        return cls(tuple(int(i) for i in np.flatnonzero(np.abs(beta) > zero_tol)))


def validate_dataset(d: Dataset) -> None:
    """Raise DimensionMismatch or NonFiniteEntry unless every Dataset invariant holds."""
    if d.X.ndim != 2:
        raise DimensionMismatch(f"X must be 2-D, got shape {d.X.shape}")
    n, p = d.X.shape
    if n < 1 or p < 1:
        raise DimensionMismatch(f"X must have positive shape, got {d.X.shape}")
    if d.Y.ndim != 1 or d.Y.shape[0] != n:
        raise DimensionMismatch(f"Y must have length {n}, got shape {d.Y.shape}")
    if d.W is not None and (d.W.ndim != 2 or d.W.shape[0] != n or d.W.shape[1] < 1):
        raise DimensionMismatch(f"W must have {n} rows, got shape {d.W.shape}")

    for name, arr in (("X", d.X), ("Y", d.Y), ("W", d.W)):
        if arr is not None and not np.all(np.isfinite(arr)):
            raise NonFiniteEntry(f"{name} contains NaN or Inf entries")


def center_columns(m: np.ndarray) -> np.ndarray:
    """Subtract column means. Accepts a matrix or a single vector."""
    m = np.asarray(m, dtype=float)
    if m.shape[0] == 0:
        raise EmptyMatrix("cannot center an empty matrix")
    return m - m.mean(axis=0)


def residualize_on_confounders(d: Dataset) -> Dataset:
    """
    Replace X and Y by the residuals of their least-squares regression on W
    (with intercept). The returned dataset has no W.
    """
    if d.W is None:
        raise InvalidConfig("residualization requires measured confounders W")
    n, r = d.W.shape
    if n <= r:
        raise SingularDesign(f"need n > r to regress on W, got n={n}, r={r}")

    Wc = center_columns(d.W)
    if np.linalg.matrix_rank(Wc) < r:
        raise SingularDesign("centered W is rank deficient")

    targets = np.column_stack([center_columns(d.X), center_columns(d.Y)])
    coef, *_ = np.linalg.lstsq(Wc, targets, rcond=None)
    resid = targets - Wc @ coef
    logger.debug(f"Residualized {targets.shape[1]} columns on {r} measured confounders")
    return Dataset(X=resid[:, :-1], Y=resid[:, -1])


def prepare_for_fit(d: Dataset) -> Tuple[np.ndarray, np.ndarray]:
    """Validate, residualize on W when present, and center X and Y."""
    validate_dataset(d)
    if d.W is not None:
        d = residualize_on_confounders(d)
    return center_columns(d.X), center_columns(d.Y)


def dataset_hash(d: Dataset) -> str:
    """SHA-256 fingerprint over the dataset arrays."""
    h = hashlib.sha256()
    for arr in (d.X, d.Y, d.W):
        if arr is None:
            h.update(b"none")
        else:
            h.update(str(arr.shape).encode())
            h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()
