"""
Dataset bundle directories: X.csv, Y.csv, optional W.csv, meta.json and truth.json.
"""

import json
import logging
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
import pandas as pd

from core_types import Dataset, GroundTruth, validate_dataset
from errors import IoError

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"


def _write_csv(path: Path, arr: np.ndarray) -> None:
    pd.DataFrame(arr).to_csv(path, header=False, index=False, float_format=FLOAT_FORMAT)


def _read_csv(path: Path) -> np.ndarray:
    return pd.read_csv(path, header=None, dtype=float, float_precision="round_trip").to_numpy()


def write_bundle(out_dir, d: Dataset, truth: Optional[GroundTruth] = None, meta: Optional[dict] = None) -> Path:
    """Write a dataset (and optionally its ground truth) to a bundle directory."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        _write_csv(out_dir / "X.csv", d.X)
        _write_csv(out_dir / "Y.csv", d.Y.reshape(-1, 1))
        if d.W is not None:
            _write_csv(out_dir / "W.csv", d.W)

        meta = dict(meta or {})
        meta.update({"n": d.n, "p": d.p, "r": d.r})
        meta.setdefault("seed", None)
        meta.setdefault("generator", None)
        meta.setdefault("params", {})
        (out_dir / "meta.json").write_text(json.dumps(meta, indent=2))

        if truth is not None:
            (out_dir / "truth.json").write_text(json.dumps(truth.to_dict()))
    except OSError as e:
        raise IoError(f"failed to write bundle to {out_dir}: {e}") from e

    logger.info(f"Wrote bundle n={d.n} p={d.p} r={d.r} to {out_dir}")
    return out_dir


def read_bundle(in_dir) -> Tuple[Dataset, Optional[GroundTruth], dict]:
    """Read a bundle directory back into (Dataset, GroundTruth or None, meta)."""
    in_dir = Path(in_dir)
    try:
        X = _read_csv(in_dir / "X.csv")
        Y = _read_csv(in_dir / "Y.csv").ravel()
        W = _read_csv(in_dir / "W.csv") if (in_dir / "W.csv").exists() else None
        meta = json.loads((in_dir / "meta.json").read_text()) if (in_dir / "meta.json").exists() else {}
        truth_path = in_dir / "truth.json"
        truth = GroundTruth.from_dict(json.loads(truth_path.read_text())) if truth_path.exists() else None
    except (OSError, ValueError) as e:
        raise IoError(f"failed to read bundle from {in_dir}: {e}") from e

    d = Dataset(X=X, Y=Y, W=W)
    validate_dataset(d)
    return d, truth, meta
