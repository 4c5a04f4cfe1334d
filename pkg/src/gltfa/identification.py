"""Structural identification checks and rotation to ordered GLT form.

Variance identification of a binary support matrix is verified with the
3579 counting rule: every subset of q columns must touch at least 2q+1
nonzero rows.  Rotational indeterminacy of a variance-identified draw is
resolved by ordering columns by pivot row and fixing pivot signs.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from typing import Optional

import numpy as np

from .model import ModelError, column_pivots

__all__ = [
    "IdentificationVerdict",
    "is_uglt",
    "counting_rule_check",
    "max_factors",
    "order_to_glt",
]

DEFAULT_MAX_COLUMNS = 25


@dataclass
class IdentificationVerdict:
    variance_identified: bool
    violating_subset: Optional[tuple[int, ...]] = None

    def __post_init__(self):
        if self.variance_identified and self.violating_subset is not None:
            raise ModelError("identified verdicts carry no witness")
        if not self.variance_identified and self.violating_subset is None:
            raise ModelError("non-identified verdicts need a witness subset")

    def __bool__(self) -> bool:
        return self.variance_identified


def is_uglt(delta: np.ndarray) -> bool:
    """True iff the pivots of all nonzero columns lie in different rows."""
    piv = column_pivots(np.asarray(delta))
    piv = piv[piv >= 0]
    return piv.size == np.unique(piv).size


def counting_rule_check(delta_r: np.ndarray,
                        max_columns: int = DEFAULT_MAX_COLUMNS) -> IdentificationVerdict:
    """Check the 3579 counting rule on a matrix of nonzero columns.

    For every q = 1..r and every q-column subset, the submatrix must have
    at least 2q+1 nonzero rows.  Subsets are scanned by increasing q in
    lexicographic order, so the reported witness is deterministic: the
    lexicographically smallest violating subset at the smallest q.

    The scan is exponential in r; matrices wider than ``max_columns``
    are refused.
    """
    delta_r = np.asarray(delta_r)
    if delta_r.ndim != 2:
        raise ModelError("delta must be an m x r matrix")
    m, r = delta_r.shape
    colsums = delta_r.sum(axis=0)
    if np.any(colsums == 0):
        raise ModelError("counting rule applies to nonzero columns only")
    if r > max_columns:
        raise ModelError(
            f"refusing subset enumeration for r={r} > {max_columns} columns "
            f"(2^r subsets); raise max_columns explicitly to override")
    # q = 1 reduces to column sums; cheap scan prunes most failures.
    bad = np.flatnonzero(colsums < 3)
    if bad.size:
        return IdentificationVerdict(False, (int(bad[0]),))
    rows = delta_r.astype(bool)
    for q in range(2, r + 1):
        need = 2 * q + 1
        for subset in combinations(range(r), q):
            nonzero_rows = np.count_nonzero(rows[:, subset].any(axis=1))
            if nonzero_rows < need:
                return IdentificationVerdict(False, tuple(subset))
    return IdentificationVerdict(True)


def max_factors(m: int) -> int:
    """Largest factor dimension that can be variance identified: floor((m-1)/2)."""
    if m < 3:
        raise ModelError(f"no identifiable factor exists for m={m} < 3")
    return (m - 1) // 2


def order_to_glt(delta: np.ndarray, lam: np.ndarray,
                 factors: Optional[np.ndarray] = None,
                 column_values: Optional[dict[str, np.ndarray]] = None):
    """Rotate an active-column draw to its ordered GLT representative.

    Columns are permuted so pivots strictly increase and each column's sign
    is flipped to make its pivot loading positive.  Factors (rows of an
    r x T matrix) are transformed by the transpose signed permutation, and
    any per-column arrays in ``column_values`` are permuted identically
    (no sign flip).  Returns ``(delta, lam, factors, column_values, perm,
    signs)`` where ``perm``/``signs`` record the applied transformation.

    Lambda Lambda' is invariant under the transformation.
    """
    delta = np.asarray(delta)
    lam = np.asarray(lam, dtype=np.float64)
    m, r = delta.shape
    if r == 0:
        return (delta.copy(), lam.copy(),
                None if factors is None else factors.copy(),
                {k: v.copy() for k, v in (column_values or {}).items()},
                np.empty(0, dtype=np.int64), np.empty(0, dtype=np.float64))
    piv = column_pivots(delta)
    if np.any(piv < 0):
        raise ModelError("zero columns cannot be ordered")
    if piv.size != np.unique(piv).size:
        raise ModelError("pivots must be distinct to order the columns")
    perm = np.argsort(piv, kind="stable")
    pivot_loads = lam[piv[perm], perm]
    if np.any(pivot_loads == 0):
        raise ModelError("pivot loading is exactly zero, contradicting the pivot")
    signs = np.where(pivot_loads < 0, -1.0, 1.0)
    new_delta = delta[:, perm].copy()
    new_lam = lam[:, perm] * signs
    new_factors = None
    if factors is not None:
        new_factors = np.asarray(factors)[perm, :] * signs[:, None]
    new_cols = {key: np.asarray(val)[perm].copy()
                for key, val in (column_values or {}).items()}
    return new_delta, new_lam, new_factors, new_cols, perm, signs
