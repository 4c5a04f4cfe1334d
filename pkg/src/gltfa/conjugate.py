"""Closed-form conditional posteriors and marginal likelihoods.

Everything here conditions on the factors, so each data row reduces to a
Bayesian regression of y_i on the factor rows selected by delta.  The two
slab families differ only in the prior precision added to the Gram matrix
and in the (1-b) likelihood tempering of the fractional prior:

    hierarchical:  Vinv = V0^-1 + X'X,  c_T = c0 + T/2,        weight = 1
    fractional:    Vinv = X'X,          c_T = c0 + (1-b)T/2,   weight = 1-b

with C_iT = C_i0 + weight * SSR_i / 2 and SSR_i = y'y - c'Vc.  All Beta and
Gamma factors are kept in log space.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import lapack
from scipy.special import gammaln

from .model import ModelError

__all__ = [
    "RowPosterior",
    "row_posterior",
    "null_row_posterior",
    "block_sample",
    "marginal_loglik",
    "column_odds",
    "multimove_indicator_sample",
    "sample_factors",
]

LOG_2PI = float(np.log(2.0 * np.pi))


class SingularFactorGram(ModelError):
    """Factor Gram matrix is singular under the fractional prior.

    The caller should resample the factors; this occurs only when fewer
    linearly independent factor values than loadings are available.
    """


def chol_lower(a: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor; raises on a non-positive-definite input."""
    c, info = lapack.dpotrf(a, lower=1, clean=1, overwrite_a=0)
    if info != 0:
        raise np.linalg.LinAlgError(f"matrix not positive definite (dpotrf info={info})")
    return c


def solve_lower(l: np.ndarray, b: np.ndarray) -> np.ndarray:
    x, info = lapack.dtrtrs(l, b, lower=1, trans=0)
    if info != 0:
        raise np.linalg.LinAlgError(f"triangular solve failed (info={info})")
    return x


def solve_lower_t(l: np.ndarray, b: np.ndarray) -> np.ndarray:
    x, info = lapack.dtrtrs(l, b, lower=1, trans=1)
    if info != 0:
        raise np.linalg.LinAlgError(f"triangular solve failed (info={info})")
    return x


@dataclass
class RowPosterior:
    """Posterior moments of one row's nonzero loadings and variance.

    ``chol`` is the lower Cholesky factor of the information matrix and
    ``x`` solves chol x = c, so that x'x = c'Vc (the quantity entering the
    variance posterior scale).
    """

    chol: np.ndarray
    x: np.ndarray
    c: np.ndarray
    c_T: float
    C_iT: float
    weight: float
    log_det_v0: Optional[float]

    @property
    def q(self) -> int:
        return self.c.shape[0]

    @property
    def B_iT(self) -> float:
        """Posterior variance factor of a dedicated row (q = 1)."""
        if self.q != 1:
            raise ModelError("B_iT is defined for dedicated rows only")
        return 1.0 / (self.chol[0, 0] ** 2)

    @property
    def m_iT(self) -> float:
        if self.q != 1:
            raise ModelError("m_iT is defined for dedicated rows only")
        return float(self.c[0])

    def mean(self) -> np.ndarray:
        """Posterior mean V c of the nonzero loadings."""
        return solve_lower_t(self.chol, self.x)

    def log_det_v(self) -> float:
        """log |V_iT| from the Cholesky diagonal."""
        return -2.0 * float(np.sum(np.log(np.diag(self.chol))))


def _row_core(gram: np.ndarray, c: np.ndarray, yty: float, T: int,
              c0: float, C_i0: float,
              v0_inv_diag: Optional[np.ndarray], b: Optional[float]) -> RowPosterior:
    """Shared assembly from sufficient statistics (Gram, covector, y'y)."""
    if v0_inv_diag is not None:
        vinv = gram + np.diag(v0_inv_diag)
        weight = 1.0
        c_T = c0 + 0.5 * T
        log_det_v0 = -float(np.sum(np.log(v0_inv_diag)))
    else:
        if b is None:
            raise ModelError("fractional prior requires the exponent b")
        vinv = gram
        weight = 1.0 - b
        c_T = c0 + 0.5 * weight * T
        log_det_v0 = None
    try:
        L = chol_lower(vinv)
    except np.linalg.LinAlgError:
        if v0_inv_diag is None:
            raise SingularFactorGram(
                "factor Gram matrix is singular; resample the factors") from None
        raise
    x = solve_lower(L, c)
    C_iT = C_i0 + 0.5 * weight * (yty - float(x @ x))
    if C_iT <= 0:
        raise ModelError("non-positive posterior scale C_iT")
    return RowPosterior(chol=L, x=x, c=c, c_T=c_T, C_iT=C_iT,
                        weight=weight, log_det_v0=log_det_v0)


def row_posterior(y_i: np.ndarray, X: np.ndarray, c0: float, C_i0: float,
                  v0_diag: Optional[np.ndarray] = None,
                  b: Optional[float] = None) -> RowPosterior:
    """Posterior of one row's loadings and variance given its regressors.

    Parameters
    ----------
    y_i : (T,) data row.
    X : (T, q) factor regressors for the row's nonzero cells.
    c0, C_i0 : inverse-Gamma prior of sigma2_i.
    v0_diag : (q,) prior variances (hierarchical slab); None selects the
        fractional prior with exponent ``b``.
    """
    y_i = np.asarray(y_i, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != y_i.shape[0]:
        raise ModelError("regressor matrix must be T x q")
    gram = X.T @ X
    c = X.T @ y_i
    v0_inv = None if v0_diag is None else 1.0 / np.asarray(v0_diag, dtype=np.float64)
    return _row_core(gram, c, float(y_i @ y_i), y_i.shape[0], c0, C_i0, v0_inv, b)


def null_row_posterior(y_i: np.ndarray, c0: float, C_i0: float) -> tuple[float, float]:
    """(shape, scale) of sigma2_i when the row has no nonzero loadings."""
    y_i = np.asarray(y_i, dtype=np.float64)
    return c0 + 0.5 * y_i.shape[0], C_i0 + 0.5 * float(y_i @ y_i)


def _marg_null(yty: float, T: int, c0: float, C_i0: float) -> float:
    c_n = c0 + 0.5 * T
    C_n = C_i0 + 0.5 * yty
    return (gammaln(c_n) + c0 * np.log(C_i0) - 0.5 * T * LOG_2PI
            - gammaln(c0) - c_n * np.log(C_n))


def _marg_nonzero(post: RowPosterior, T: int, c0: float, C_i0: float,
                  b: Optional[float]) -> float:
    if post.log_det_v0 is not None:
        return (-0.5 * T * LOG_2PI
                + 0.5 * (post.log_det_v() - post.log_det_v0)
                + gammaln(post.c_T) + c0 * np.log(C_i0)
                - gammaln(c0) - post.c_T * np.log(post.C_iT))
    return (0.5 * post.q * np.log(b) - 0.5 * T * (1.0 - b) * LOG_2PI
            + gammaln(post.c_T) + c0 * np.log(C_i0)
            - gammaln(c0) - post.c_T * np.log(post.C_iT))


def marginal_loglik(y_i: np.ndarray, delta_row: np.ndarray, factors: np.ndarray,
                    c0: float, C_i0: float,
                    v0_diag_row: Optional[np.ndarray] = None,
                    b: Optional[float] = None) -> float:
    """Log marginal likelihood of one data row given the factors.

    ``delta_row`` selects which factor rows load on this row; the loadings
    and the idiosyncratic variance are integrated out analytically.
    ``v0_diag_row`` holds prior variances for all r cells of the row
    (hierarchical slab); with ``v0_diag_row=None`` the fractional prior
    with exponent ``b`` applies.
    """
    y_i = np.asarray(y_i, dtype=np.float64)
    delta_row = np.asarray(delta_row).astype(bool)
    T = y_i.shape[0]
    yty = float(y_i @ y_i)
    support = np.flatnonzero(delta_row)
    if support.size == 0:
        return float(_marg_null(yty, T, c0, C_i0))
    X = np.asarray(factors, dtype=np.float64)[support, :].T
    v0 = None if v0_diag_row is None else np.asarray(v0_diag_row)[support]
    post = row_posterior(y_i, X, c0, C_i0, v0_diag=v0, b=b)
    return float(_marg_nonzero(post, T, c0, C_i0, b))


def block_sample(Y: np.ndarray, delta: np.ndarray, factors: np.ndarray,
                 c0: float, C_i0: np.ndarray, rng,
                 v0_diag: Optional[np.ndarray] = None,
                 b: Optional[float] = None,
                 gram: Optional[np.ndarray] = None,
                 covec: Optional[np.ndarray] = None,
                 yty: Optional[np.ndarray] = None):
    """Jointly draw all loadings and variances given factors and supports.

    The joint information matrix is block diagonal with one block per
    nonzero row, so each block is factorized independently; the math is
    identical to one banded Cholesky of the stacked system.  Per nonzero
    row i the draw is

        sigma2_i ~ InvGamma(c_T, C_i0 + weight (y'y - x'x) / 2)
        L' beta_i = x + z,   z ~ N(0, sigma2_i I)

    and zero rows draw sigma2_i from the null posterior.  Returns
    ``(lam, sigma2)`` with lam of shape (m, r).  Fractional-prior rows
    whose Gram block is singular keep a NaN row, reported via the third
    return value (list of skipped rows).
    """
    Y = np.asarray(Y, dtype=np.float64)
    delta = np.asarray(delta).astype(bool)
    m, T = Y.shape
    r = delta.shape[1]
    F = np.asarray(factors, dtype=np.float64)
    if gram is None:
        gram = F @ F.T
    if covec is None:
        covec = F @ Y.T
    if yty is None:
        yty = np.einsum("ij,ij->i", Y, Y)
    C_i0 = np.broadcast_to(np.asarray(C_i0, dtype=np.float64), (m,))
    lam = np.zeros((m, r))
    sigma2 = np.empty(m)
    skipped = []
    for i in range(m):
        support = np.flatnonzero(delta[i])
        if support.size == 0:
            c_n, C_n = c0 + 0.5 * T, C_i0[i] + 0.5 * yty[i]
            sigma2[i] = C_n / rng.gamma(c_n, 1.0)
            continue
        sub = gram[np.ix_(support, support)]
        c = covec[support, i]
        v0_inv = None if v0_diag is None else 1.0 / v0_diag[i, support]
        try:
            post = _row_core(sub, c, yty[i], T, c0, C_i0[i], v0_inv, b)
        except SingularFactorGram:
            skipped.append(i)
            sigma2[i] = np.nan
            lam[i, support] = np.nan
            continue
        sigma2[i] = post.C_iT / rng.gamma(post.c_T, 1.0)
        z = rng.standard_normal(support.size) * np.sqrt(sigma2[i])
        lam[i, support] = solve_lower_t(post.chol, post.x + z)
    return lam, sigma2, skipped


def sample_factors(lam_r: np.ndarray, sigma2: np.ndarray, Y: np.ndarray, rng) -> np.ndarray:
    """Draw the r x T factor matrix from its conditional posterior.

    Per time point the posterior is N(A^-1 Lam' Sig^-1 y_t, A^-1) with
    A = I + Lam' Sig^-1 Lam; one Cholesky of A is shared across all t.
    """
    lam_r = np.asarray(lam_r, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    r = lam_r.shape[1]
    if r == 0:
        raise ModelError("sample_factors requires at least one active column")
    S = lam_r.T / np.asarray(sigma2, dtype=np.float64)  # r x m
    A = np.eye(r) + S @ lam_r
    L = chol_lower(A)
    mean = solve_lower_t(L, solve_lower(L, S @ Y))
    z = rng.standard_normal((r, Y.shape[1]))
    return mean + solve_lower_t(L, z)


def _dedicated_null_odds(g_jj: float, h_ji: float, yty_i: float, T: int,
                         c0: float, C_i0: float,
                         b0_jj: Optional[float], b: Optional[float]) -> float:
    """Log likelihood ratio of a dedicated row (delta_ij = 1) vs the null row."""
    c_n = c0 + 0.5 * T
    C_n = C_i0 + 0.5 * yty_i
    if b0_jj is not None:
        B_iT = 1.0 / (1.0 / b0_jj + g_jj)
        c_T = c_n
        C_1 = C_i0 + 0.5 * (yty_i - h_ji * h_ji * B_iT)
        D = 0.5 * np.log(B_iT / b0_jj)
    else:
        if g_jj <= 0:
            raise SingularFactorGram("zero factor column under the fractional prior")
        B_iT = 1.0 / g_jj
        c_T = c0 + 0.5 * (1.0 - b) * T
        C_1 = C_i0 + 0.5 * (1.0 - b) * (yty_i - h_ji * h_ji * B_iT)
        D = 0.5 * (np.log(b) + b * T * LOG_2PI)
    return float(gammaln(c_T) + c_n * np.log(C_n) - gammaln(c_n) - c_T * np.log(C_1) + D)


def _incremental_odds(gram: np.ndarray, c: np.ndarray, yty_i: float, T: int,
                      c0: float, C_i0: float,
                      v0_inv: Optional[np.ndarray],
                      b0_jj: Optional[float], b: Optional[float]) -> float:
    """Log likelihood ratio of delta_ij = 1 vs 0 when the rest of the row loads.

    ``gram``/``c`` describe the row's regression with the target column
    ordered LAST and its indicator set to one.  Dropping the last row and
    column of the Cholesky factor yields the delta_ij = 0 moments, so

        C^0 = C^1 + weight * x_last^2 / 2,
        log |V^1| - log |V^0| = -2 log L_last.
    """
    post = _row_core(gram, c, yty_i, T, c0, C_i0, v0_inv, b)
    x_last = float(post.x[-1])
    l_last = float(post.chol[-1, -1])
    C_1 = post.C_iT
    C_0 = C_1 + 0.5 * post.weight * x_last * x_last
    if b0_jj is not None:
        D = -np.log(l_last) - 0.5 * np.log(b0_jj)
    else:
        D = 0.5 * np.log(b)
    return float(post.c_T * (np.log(C_0) - np.log(C_1)) + D)


def column_odds(rows: np.ndarray, delta_others: np.ndarray,
                gram: np.ndarray, covec: np.ndarray, g_t: np.ndarray, g_tt: float,
                h_t: np.ndarray, yty: np.ndarray, T: int, c0: float,
                C_i0: np.ndarray, v0_others: Optional[np.ndarray],
                v0_target: Optional[np.ndarray], b: Optional[float]) -> np.ndarray:
    """Log likelihood ratios O_ij of delta_ij = 1 vs 0 for a set of rows.

    Parameters describe the candidate (target) column through its Gram
    column ``g_t`` (covariances with the other factor rows), ``g_tt``
    (its squared norm) and ``h_t`` (its covector per data row); the other
    columns enter through the cached ``gram``/``covec`` of the active
    factors.  ``delta_others`` is the m x r support with the target
    column's own entries zeroed.

    Rows whose remaining support is empty use the dedicated-vs-null closed
    form; all other rows use the incremental Cholesky path with the target
    regressor ordered last.
    """
    odds = np.empty(rows.shape[0])
    for n, i in enumerate(rows):
        support = np.flatnonzero(delta_others[i])
        if support.size == 0:
            odds[n] = _dedicated_null_odds(
                g_tt, h_t[i], yty[i], T, c0, C_i0[i],
                None if v0_target is None else v0_target[i], b)
        else:
            q = support.size + 1
            sub = np.empty((q, q))
            sub[:-1, :-1] = gram[np.ix_(support, support)]
            sub[:-1, -1] = g_t[support]
            sub[-1, :-1] = g_t[support]
            sub[-1, -1] = g_tt
            c = np.empty(q)
            c[:-1] = covec[support, i]
            c[-1] = h_t[i]
            if v0_others is not None:
                v0_inv = np.empty(q)
                v0_inv[:-1] = 1.0 / v0_others[i, support]
                v0_inv[-1] = 1.0 / v0_target[i]
                b0_jj = v0_target[i]
            else:
                v0_inv = None
                b0_jj = None
            odds[n] = _incremental_odds(sub, c, yty[i], T, c0, C_i0[i],
                                        v0_inv, b0_jj, b)
    return odds


def multimove_indicator_sample(column: np.ndarray, rows: np.ndarray,
                               odds: np.ndarray, tau_j: float, rng):
    """Flip a set of indicators by independent Metropolis-Hastings moves.

    Each row i proposes 1 - delta_ij and accepts with probability
    min(1, exp(+-(O_ij + O_pr))) where O_pr = log(tau / (1 - tau)).
    Returns the updated column and the number of accepted flips.
    """
    if not 0.0 < tau_j < 1.0:
        raise ModelError("tau_j must lie in (0, 1)")
    new = column.copy()
    prior_odds = np.log(tau_j) - np.log1p(-tau_j)
    post = odds + prior_odds
    log_u = np.log(rng.random(rows.shape[0]))
    cur = column[rows].astype(bool)
    accept = np.where(cur, log_u <= -post, log_u <= post)
    new[rows[accept]] = 1 - new[rows[accept]]
    return new, int(accept.sum())
