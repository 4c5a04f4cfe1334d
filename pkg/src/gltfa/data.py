"""Dataset ingestion and synthetic data generation.

CSV files ship with rows = time points and columns = features (header row
carries the feature names); internally the matrix is transposed to m x T.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .identification import counting_rule_check, is_uglt
from .model import Dataset, ModelError, column_pivots

__all__ = ["DataError", "GroundTruth", "load_dataset", "save_dataset",
           "simulate_dataset", "dedicated_block_delta"]


class DataError(ModelError):
    pass


@dataclass
class GroundTruth:
    delta: np.ndarray
    lam: np.ndarray
    sigma2: np.ndarray
    factors: np.ndarray
    seed: int


def load_dataset(path, demean: bool = False, standardize: bool = False) -> Dataset:
    """Read a CSV of observations and optionally demean/standardize per feature.

    Standardization divides by the sample standard deviation (ddof=1) and
    implies demeaning.  Constant features cannot be standardized.
    """
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        names = [h.strip() for h in header]
        width = len(names)
        for ln, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != width:
                raise DataError(f"{path}:{ln}: expected {width} cells, got {len(row)}")
            try:
                rows.append([float(c) for c in row])
            except ValueError as exc:
                raise DataError(f"{path}:{ln}: non-numeric cell ({exc})") from None
    if len(names) < 3:
        raise DataError(f"{path}: need at least 3 feature columns, got {len(names)}")
    if len(rows) < 2:
        raise DataError(f"{path}: need at least 2 observation rows, got {len(rows)}")
    y = np.asarray(rows, dtype=np.float64).T  # features x time
    if not np.all(np.isfinite(y)):
        bad = np.argwhere(~np.isfinite(y.T))[0]
        raise DataError(f"{path}:{bad[0] + 2}: non-finite value in column {bad[1] + 1}")
    if demean or standardize:
        y = y - y.mean(axis=1, keepdims=True)
    if standardize:
        sd = y.std(axis=1, ddof=1)
        zero = np.flatnonzero(sd == 0.0)
        if zero.size:
            raise DataError(
                f"{path}: feature {names[zero[0]]!r} is constant; cannot standardize")
        y = y / sd[:, None]
    return Dataset(y=y, feature_names=names, standardized=standardize,
                   demeaned=demean or standardize)


def save_dataset(path, dataset: Dataset):
    """Write a dataset back to CSV (rows = time points)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(dataset.feature_names)
        for t in range(dataset.T):
            writer.writerow([repr(float(v)) for v in dataset.y[:, t]])


def dedicated_block_delta(m: int, r: int, loads_per_factor: int = 0) -> np.ndarray:
    """A round-robin support matrix that satisfies the counting rule.

    Factor j gets pivot row j and loads on rows j, j+r, j+2r, ...; with the
    default every row loads on exactly one factor.
    """
    if r < 1 or m < 2 * r + 1:
        raise DataError(f"cannot place {r} identified factors in {m} rows")
    delta = np.zeros((m, r), dtype=np.int8)
    for j in range(r):
        rows = np.arange(j, m, r)
        if loads_per_factor:
            rows = rows[:loads_per_factor]
        delta[rows, j] = 1
    if not counting_rule_check(delta):
        raise DataError("generated support fails the counting rule; widen it")
    return delta


def simulate_dataset(m: int, T: int, true_delta: np.ndarray, loading_scale: float,
                     sigma2, seed: int, feature_prefix: str = "y",
                     pivot_loading=None):
    """Draw a dataset from the factor model with a known support.

    Loadings are loading_scale * |N(0,1)| with random signs off the pivots
    and positive pivots; factors and errors are standard normal.  With
    ``pivot_loading`` set, pivot cells are pinned to that value instead of
    drawn (handy for recovery studies with a guaranteed signal).  Returns
    ``(Dataset, GroundTruth)``.
    """
    true_delta = np.asarray(true_delta, dtype=np.int8)
    if true_delta.shape[0] != m:
        raise DataError("true_delta row count must equal m")
    if loading_scale <= 0:
        raise DataError("loading_scale must be positive")
    if not is_uglt(true_delta):
        raise DataError("true_delta is not an unordered GLT structure")
    verdict = counting_rule_check(true_delta)
    if not verdict:
        raise DataError(
            f"true_delta is not variance identified (witness {verdict.violating_subset})")
    sigma2 = np.broadcast_to(np.asarray(sigma2, dtype=np.float64), (m,)).copy()
    if np.any(sigma2 <= 0):
        raise DataError("sigma2 must be strictly positive")
    rng = np.random.default_rng(seed)
    r = true_delta.shape[1]
    lam = loading_scale * np.abs(rng.standard_normal((m, r)))
    signs = np.where(rng.random((m, r)) < 0.5, -1.0, 1.0)
    lam *= signs
    piv = column_pivots(true_delta)
    if pivot_loading is None:
        lam[piv, np.arange(r)] = np.abs(lam[piv, np.arange(r)])
    else:
        if pivot_loading <= 0:
            raise DataError("pivot_loading must be positive")
        lam[piv, np.arange(r)] = pivot_loading
    lam *= true_delta
    factors = rng.standard_normal((r, T))
    noise = rng.standard_normal((m, T)) * np.sqrt(sigma2)[:, None]
    y = lam @ factors + noise
    data = Dataset(y=y, feature_names=[f"{feature_prefix}{i + 1}" for i in range(m)])
    return data, GroundTruth(delta=true_delta, lam=lam, sigma2=sigma2,
                             factors=factors, seed=seed)
