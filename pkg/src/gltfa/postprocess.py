"""Turn raw unordered draws into identified posterior summaries.

Draws are first screened with the counting rule; survivors are rotated to
ordered GLT form (pivots increasing, pivot loadings positive), which makes
sparsity matrices comparable across draws.  Model-level summaries (HPM,
pivot posterior, modal pivot sequence) count ordered forms; loadings are
model-averaged over the draws that share the chosen pivot sequence.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .identification import counting_rule_check, order_to_glt
from .model import ModelError

__all__ = [
    "PostprocessError",
    "SummaryReport",
    "filter_variance_identified",
    "factor_dimension_posterior",
    "communalities",
    "summarize",
]


class PostprocessError(ModelError):
    pass


@dataclass
class SummaryReport:
    m: int
    n_total: int
    n_kept: int
    p_v: float
    r_posterior: dict[int, float]
    r_mode: int
    d_mean: float
    d_quartiles: tuple[float, float, float]
    hpm_delta: np.ndarray
    hpm_freq: float
    hpm_r: int
    hpm_d: int
    hpm_pivots: tuple[int, ...]
    pivot_posterior: np.ndarray          # P(row i is a pivot), length m
    l_star: tuple[int, ...]
    l_star_freq: float
    r_star: int
    bma_pivots: tuple[int, ...]
    bma_n_draws: int
    bma_mean_loadings: np.ndarray        # m x r for the conditioning pivots
    inclusion_prob: np.ndarray           # m x r
    mpm_delta: np.ndarray                # 0.5-thresholded inclusion
    mpm_d: int
    mean_communalities: np.ndarray       # m x r, averaged over the BMA draws
    mean_row_communality: np.ndarray     # length m
    row_zero_prob: np.ndarray            # P(q_i = 0), filtered draws
    alpha_mean: float
    gamma_mean: float


def filter_variance_identified(records, m: int):
    """Keep draws whose active support passes the counting rule.

    Returns ``(kept_records, p_v)``; raises when nothing survives, since
    summaries would be empty (usually a sign the slab prior was too loose).
    """
    records = list(records)
    if not records:
        raise PostprocessError("draw store is empty")
    kept = []
    for rec in records:
        delta = rec.delta_matrix(m)
        if rec.r == 0 or counting_rule_check(delta):
            kept.append(rec)
    p_v = len(kept) / len(records)
    if not kept:
        raise PostprocessError(
            "no draw is variance identified; consider another slab prior family")
    return kept, p_v


def factor_dimension_posterior(records):
    """Empirical law of the active-column count; ties break toward smaller r."""
    counts = Counter(rec.r for rec in records)
    total = sum(counts.values())
    posterior = {r: c / total for r, c in sorted(counts.items())}
    best = max(counts.values())
    mode = min(r for r, c in counts.items() if c == best)
    return posterior, mode


def communalities(lam: np.ndarray, sigma2: np.ndarray):
    """Shares of each feature's variance explained by each factor.

    R2_ij = lam_ij^2 / (sum_l lam_il^2 + sigma2_i); rows sum to the total
    communality R2_i, which equals 1 - sigma2_i / Omega_ii.
    """
    lam = np.asarray(lam, dtype=np.float64)
    sigma2 = np.asarray(sigma2, dtype=np.float64)
    denom = (lam ** 2).sum(axis=1) + sigma2
    r2 = lam ** 2 / denom[:, None]
    return r2, r2.sum(axis=1)


def _ordered_form(rec, m: int):
    delta = rec.delta_matrix(m)
    lam = rec.lam_matrix(m)
    odelta, olam, _, _, perm, _ = order_to_glt(delta, lam)
    piv = tuple(int(np.flatnonzero(odelta[:, j])[0]) for j in range(rec.r))
    return odelta, olam, piv


def summarize(records, m: int, target_r: Optional[int] = None,
              pivot_choice: str = "l_star",
              explicit_pivots: Optional[tuple[int, ...]] = None,
              p_v: float = 1.0, n_total: Optional[int] = None) -> SummaryReport:
    """Build the full posterior summary from variance-identified draws.

    ``pivot_choice`` selects the pivot sequence conditioning the loadings
    average: 'l_star' (modal pivot sequence), 'l_h' (pivots of the highest
    probability model) or 'explicit'.  With ``target_r`` the pivot tallies
    are restricted to draws of that dimension.  ``p_v``/``n_total`` carry
    the filtering metadata through to the report.
    """
    records = list(records)
    if not records:
        raise PostprocessError("no draws to summarize")
    if target_r is not None and not any(rec.r == target_r for rec in records):
        raise PostprocessError(f"no draw has r={target_r}")

    r_posterior, r_mode = factor_dimension_posterior(records)
    d_all = np.array([rec.d for rec in records], dtype=np.float64)
    d_quart = tuple(float(q) for q in np.percentile(d_all, [25, 50, 75]))

    ordered = []
    for rec in records:
        odelta, olam, piv = _ordered_form(rec, m)
        ordered.append((rec, odelta, olam, piv))

    # highest probability model over ordered sparsity matrices
    model_counts = Counter()
    model_repr = {}
    for rec, odelta, olam, piv in ordered:
        key = (rec.r, odelta.tobytes())
        model_counts[key] += 1
        model_repr.setdefault(key, (odelta, piv))
    best = max(model_counts.values())
    hpm_key = min((key for key, c in model_counts.items() if c == best),
                  key=lambda key: (key[0], key[1]))
    hpm_delta, hpm_piv = model_repr[hpm_key]
    hpm_freq = model_counts[hpm_key] / len(records)

    # pivot posteriors, restricted to target_r when given
    pool = [(rec, piv) for rec, _, _, piv in ordered
            if target_r is None or rec.r == target_r]
    pivot_counts = Counter(piv for _, piv in pool)
    best = max(pivot_counts.values())
    l_star = min((piv for piv, c in pivot_counts.items() if c == best),
                 key=lambda piv: (len(piv), piv))
    l_star_freq = pivot_counts[l_star] / len(pool)
    pivot_post = np.zeros(m)
    for _, piv in pool:
        for i in piv:
            pivot_post[i] += 1.0
    pivot_post /= len(pool)

    if pivot_choice == "l_star":
        chosen = tuple(l_star)
    elif pivot_choice == "l_h":
        chosen = tuple(hpm_piv)
    elif pivot_choice == "explicit":
        if explicit_pivots is None:
            raise PostprocessError("explicit pivot choice needs a pivot sequence")
        chosen = tuple(int(i) for i in explicit_pivots)
    else:
        raise PostprocessError(f"unknown pivot_choice {pivot_choice!r}")

    matching = [(rec, odelta, olam) for rec, odelta, olam, piv in ordered
                if piv == chosen]
    if not matching:
        top = pivot_counts.most_common(5)
        raise PostprocessError(
            "no draw matches the chosen pivots "
            f"{chosen}; most frequent sequences: {top}")
    r_c = len(chosen)
    incl = np.zeros((m, r_c))
    lam_sum = np.zeros((m, r_c))
    com_sum = np.zeros((m, r_c))
    row_com_sum = np.zeros(m)
    for rec, odelta, olam in matching:
        incl += odelta
        lam_sum += olam
        r2, row_r2 = communalities(olam, rec.sigma2)
        com_sum += r2
        row_com_sum += row_r2
    n_match = len(matching)
    incl /= n_match
    mpm = (incl >= 0.5).astype(np.int8)

    row_zero = np.zeros(m)
    for _, odelta, _, _ in ordered:
        row_zero += odelta.sum(axis=1) == 0
    row_zero /= len(records)

    return SummaryReport(
        m=m, n_total=n_total if n_total is not None else len(records),
        n_kept=len(records), p_v=p_v,
        r_posterior=r_posterior, r_mode=r_mode,
        d_mean=float(d_all.mean()), d_quartiles=d_quart,
        hpm_delta=hpm_delta, hpm_freq=hpm_freq, hpm_r=int(hpm_key[0]),
        hpm_d=int(hpm_delta.sum()), hpm_pivots=tuple(hpm_piv),
        pivot_posterior=pivot_post, l_star=tuple(l_star),
        l_star_freq=l_star_freq, r_star=len(l_star),
        bma_pivots=chosen, bma_n_draws=n_match,
        bma_mean_loadings=lam_sum / n_match, inclusion_prob=incl,
        mpm_delta=mpm, mpm_d=int(mpm.sum()),
        mean_communalities=com_sum / n_match,
        mean_row_communality=row_com_sum / n_match,
        row_zero_prob=row_zero,
        alpha_mean=float(np.mean([rec.alpha for rec in records])),
        gamma_mean=float(np.mean([rec.gamma for rec in records])))
