"""Trans-dimensional MCMC for the sparse factor model.

One sweep runs, in order: (H) slab-probability hyperparameters and tau,
(D) variable selection below the pivots, (L) pivot moves, (P) joint
loadings/variances, (F) factors, (S) shrinkage scales, (A) boosting, and
(R) the reversible-jump excursion that adds, deletes and tries to
activate spurious columns.  Steps D, L and R are marginalized over the
loadings and variances, so those arrays are regenerated each sweep by
step P.  Draw records snapshot the state at the end of the CFA block
(after A), where all arrays are mutually coherent.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import betaln

from . import conjugate as cj
from .distributions import f_scale_mixture, gamma_rate, gig, inv_gamma, log_gamma_pdf
from .identification import counting_rule_check, max_factors
from .model import ModelError, ModelState, PriorConfig, ShrinkageState, column_pivots

__all__ = [
    "ChainConfig",
    "DrawRecord",
    "Chain",
    "run_chain",
    "split_accept_ratio",
    "merge_accept_ratio",
]

MOVE_TYPES = ("alpha", "gamma", "shift", "switch", "add", "delete",
              "split", "merge", "flip_d", "flip_r")


def split_accept_ratio(a_k, b_k, m, k, r, r_sp):
    """Acceptance ratio of turning a zero column into a spurious one.

    Exact in rational arithmetic when given Fraction inputs.
    """
    return (a_k * (m - r - r_sp) * (k - r - r_sp)
            / ((r_sp + 1) * (b_k + m - r - r_sp - 1)))


def merge_accept_ratio(a_k, b_k, m, k, r, r_sp):
    """Acceptance ratio of the reverse merge; equals 1/split at shifted args."""
    return (r_sp * (b_k + m - r - r_sp)
            / (a_k * (m - r - r_sp + 1) * (k - r - r_sp + 1)))


def propose_spurious_factors(u: float, resid: np.ndarray, sigma2_pivot: float, rng):
    """Factors of a freshly split spurious column, given the variance split u.

    Draws f_t ~ N(u * resid_t / sqrt(sigma2), 1 - u^2); at u = 0 this is the
    standard normal prior.
    """
    mean = u * resid / np.sqrt(sigma2_pivot)
    return mean + np.sqrt(1.0 - u * u) * rng.standard_normal(resid.shape[0])


@dataclass
class ChainConfig:
    """Run length, seed, initialization constants and the prior."""

    n_draws: int
    n_burnin: int = 0
    thin: int = 1
    seed: int = 0
    k: Optional[int] = None            # None -> floor((m - 1) / 2)
    prior: PriorConfig = field(default_factory=PriorConfig)
    r_init: Optional[int] = None       # None -> min(2, k)
    r_sp_init: int = 1
    u1: int = 5                        # first pivot drawn from the top u1 rows
    p0: float = 0.5                    # inclusion probability below initial pivots
    init_gibbs_iters: int = 100
    alpha_init: Optional[float] = None
    gamma_init: Optional[float] = None
    fix_esp_hyper: bool = False        # hold alpha/gamma fixed (validation runs)
    debug_checks: bool = False

    def resolved(self, m: int) -> "ChainConfig":
        """Validate against the data dimension and fill derived defaults."""
        if self.n_draws <= 0:
            raise ModelError("n_draws must be positive")
        if self.n_burnin < 0 or self.thin < 1:
            raise ModelError("invalid burn-in or thinning")
        if not 0.0 < self.p0 < 1.0:
            raise ModelError("p0 must lie in (0, 1)")
        kmax = max_factors(m)
        k = kmax if self.k is None else self.k
        if not 1 <= k <= kmax:
            raise ModelError(f"k={k} outside [1, {kmax}] for m={m}")
        self.k = k
        if self.r_init is None:
            self.r_init = min(2, k)
        if not 1 <= self.r_init <= k:
            raise ModelError("r_init must lie in [1, k]")
        if self.r_sp_init < 0 or self.r_init + self.r_sp_init > k:
            raise ModelError("need r_init + r_sp_init <= k")
        self.prior.validate()
        return self


@dataclass
class DrawRecord:
    """One retained posterior draw in the confirmatory representation."""

    iteration: int
    r: int
    r_sp: int
    d: int
    support: np.ndarray        # (d, 2) row/column indices of nonzero cells
    lam_values: np.ndarray     # (d,) loadings aligned with support
    sigma2: np.ndarray
    tau: np.ndarray            # (r,)
    alpha: float
    gamma: float
    theta: Optional[np.ndarray]
    kappa: Optional[float]
    accept: dict[str, tuple[int, int]]

    def delta_matrix(self, m: int) -> np.ndarray:
        delta = np.zeros((m, self.r), dtype=np.int8)
        if self.d:
            delta[self.support[:, 0], self.support[:, 1]] = 1
        return delta

    def lam_matrix(self, m: int) -> np.ndarray:
        lam = np.zeros((m, self.r))
        if self.d:
            lam[self.support[:, 0], self.support[:, 1]] = self.lam_values
        return lam


class Chain:
    """One MCMC chain owning its state, RNG stream and caches.

    ``frozen_factors`` pins every active factor row to a fixed vector and
    restricts the sweep to the marginalized moves (H-tau, D, L, R); this
    is the harness for exact-posterior validation on enumerable models.
    """

    def __init__(self, config: ChainConfig, data, chain_id: int = 0,
                 frozen_factors: Optional[np.ndarray] = None):
        self.cfg = config.resolved(data.m)
        self.prior = self.cfg.prior
        self.data = data
        self.chain_id = chain_id
        self.Y = np.ascontiguousarray(data.y)
        self.m, self.T = self.Y.shape
        self.k = self.cfg.k
        self.yty = np.einsum("ij,ij->i", self.Y, self.Y)
        self.rng = np.random.default_rng(np.random.SeedSequence(
            entropy=self.cfg.seed, spawn_key=(chain_id,)))
        self.b = (self.prior.fractional_b(self.m, self.T)
                  if self.prior.slab_family == "fractional" else None)
        self.C_i0 = self._idio_scales()
        self.acc = {mv: [0, 0] for mv in MOVE_TYPES}
        self.warn_step_s_noop = 0
        self._frozen = None
        if frozen_factors is not None:
            self._frozen = np.atleast_2d(np.asarray(frozen_factors, dtype=np.float64))
            if self._frozen.shape[1] != self.T:
                raise ModelError("frozen factor rows must have length T")
            if self._frozen.shape[0] < self.k:
                self._frozen = np.broadcast_to(
                    self._frozen[0], (self.k, self.T)).copy()
        self.state = self._init_state()
        self._refresh_cache()
        if self._frozen is None and self.cfg.init_gibbs_iters > 0:
            for _ in range(self.cfg.init_gibbs_iters):
                self.step_p()
                self.step_f()

    # ------------------------------------------------------------------ setup

    def _idio_scales(self) -> np.ndarray:
        pr = self.prior
        if pr.idio_mode == "fixed":
            return np.full(self.m, pr.C0)
        # constraint-aware scaling: C_i0 = (c0 - 1) / (inv covariance estimate)_ii
        sy = self.Y @ self.Y.T
        prec_hat = (pr.nu_o + 0.5 * self.T) * np.linalg.inv(
            pr.nu_o * pr.s_o * np.eye(self.m) + 0.5 * sy)
        return (pr.c0 - 1.0) / np.diag(prec_hat)

    def _init_state(self) -> ModelState:
        cfg, pr, rng = self.cfg, self.prior, self.rng
        m, k, T = self.m, self.k, self.T
        alpha = cfg.alpha_init if cfg.alpha_init is not None else gamma_rate(
            rng, pr.a_alpha, pr.b_alpha)
        if pr.esp_family == "1PB":
            gamma = 1.0
        else:
            gamma = cfg.gamma_init if cfg.gamma_init is not None else gamma_rate(
                rng, pr.a_gamma, pr.b_gamma)
        shrink = None
        if pr.has_shrinkage:
            if pr.kappa_family == "F":
                kappa, b_kappa = f_scale_mixture(rng, pr.a_kappa, pr.c_kappa)
            else:
                kappa, b_kappa = inv_gamma(rng, pr.c_kappa, pr.b_kappa), None
            if pr.theta_family == "F":
                theta, b_theta = f_scale_mixture(rng, pr.a_theta, pr.c_theta, size=k)
            else:
                theta = inv_gamma(rng, pr.c_theta, np.full(k, pr.b_theta))
                b_theta = None
            omega = b_omega = None
            if pr.slab_family == "gaussian_triple":
                omega, b_omega = f_scale_mixture(rng, pr.a_omega, pr.c_omega, size=(m, k))
            shrink = ShrinkageState(theta=np.asarray(theta, dtype=np.float64),
                                    kappa=float(kappa), omega=omega,
                                    aux_b_theta=b_theta, aux_b_omega=b_omega,
                                    aux_b_kappa=b_kappa)
        delta_r = self._init_delta(cfg.r_init)
        r = cfg.r_init
        delta = np.zeros((m, k), dtype=np.int8)
        delta[:, :r] = delta_r
        a_k, b_k = pr.esp_beta_params(alpha, gamma, k)
        tau = np.full(k, 0.5)
        tau[:r] = rng.beta(a_k, b_k, size=r)
        factors = np.zeros((k, T))
        if self._frozen is not None:
            factors[:r] = self._frozen[:r]
        else:
            factors[:r] = rng.standard_normal((r, T))
        state = ModelState(delta=delta, lam=np.zeros((m, k)), sigma2=np.ones(m),
                           factors=factors, tau=tau, alpha=float(alpha),
                           gamma=float(gamma), r=r, r_sp=cfg.r_sp_init,
                           shrink=shrink)
        return state

    def _init_delta(self, r: int) -> np.ndarray:
        """Pivots from the top rows, Bernoulli fill below, counting-rule retries."""
        cfg, rng, m = self.cfg, self.rng, self.m
        last = None
        for _ in range(100):
            pivots = [int(rng.integers(0, min(cfg.u1, m - 1)))]
            # later pivots uniform on unoccupied rows that leave room below
            for _ in range(r - 1):
                free = np.setdiff1d(np.arange(m - 1), pivots)
                pivots.append(int(free[rng.integers(free.size)]))
            delta = np.zeros((m, r), dtype=np.int8)
            for j, p in enumerate(pivots):
                delta[p, j] = 1
                below = rng.random(m - 1 - p) < cfg.p0
                delta[p + 1:, j] = below
            last = delta
            if np.all(delta.sum(axis=0) >= 3) and r <= 25 and counting_rule_check(delta):
                return delta
        # forced fill: three indicators directly below each pivot
        delta = last
        piv = column_pivots(delta)
        for j, p in enumerate(piv):
            delta[p + 1:min(p + 4, self.m), j] = 1
        return delta

    def _refresh_cache(self):
        r = self.state.r
        F = self.state.factors[:r]
        self.G = F @ F.T
        self.H = F @ self.Y.T

    # -------------------------------------------------------- prior plumbing

    def _esp_params(self):
        return self.prior.esp_beta_params(self.state.alpha, self.state.gamma, self.k)

    def _log_col_prior(self, a_k, b_k, pivot0, d):
        """Log marginal prior of one active column given its pivot row."""
        return betaln(a_k + d - 1.0, b_k + self.m - pivot0 - d)

    def _v0_active(self) -> Optional[np.ndarray]:
        """Prior variances (before the sigma2 factor) per active cell, or None."""
        st, pr = self.state, self.prior
        r = st.r
        if pr.slab_family == "fractional":
            return None
        if pr.slab_family == "gaussian_fixed":
            return np.full((self.m, r), pr.A0)
        sh = st.shrink
        v0 = np.broadcast_to(sh.kappa * sh.theta[:r], (self.m, r)).copy()
        if pr.slab_family == "gaussian_triple":
            v0 *= sh.omega[:, :r]
        return v0

    # ----------------------------------------------------------------- step H

    def _esp_log_target(self, alpha: float, gamma: float) -> float:
        pr, st = self.prior, self.state
        m, k = self.m, self.k
        a_k, b_k = pr.esp_beta_params(alpha, gamma, k)
        val = log_gamma_pdf(alpha, pr.a_alpha, pr.b_alpha)
        if pr.esp_family == "2PB":
            val += log_gamma_pdf(gamma, pr.a_gamma, pr.b_gamma)
        val -= k * betaln(a_k, b_k)
        j0 = k - st.r - st.r_sp
        if j0:
            val += j0 * betaln(a_k, b_k + m - st.r - st.r_sp)
        for j_sp in range(1, st.r_sp + 1):
            val += betaln(a_k + 1.0, b_k + m - st.r - j_sp)
        if st.r:
            d = st.delta[:, :st.r].sum(axis=0)
            piv = st.active_pivots()
            val += float(np.sum(betaln(a_k + d - 1.0, b_k + m - piv - d)))
        return float(val)

    def step_h(self):
        """Random-walk MH on (log alpha, log gamma), then refresh tau."""
        st, pr, rng = self.state, self.prior, self.rng
        if not self.cfg.fix_esp_hyper:
            cur = self._esp_log_target(st.alpha, st.gamma)
            prop = st.alpha * np.exp(pr.rw_sd_alpha * rng.standard_normal())
            self.acc["alpha"][1] += 1
            # log-scale proposal needs the alpha'/alpha Jacobian
            ratio = (self._esp_log_target(prop, st.gamma) - cur
                     + np.log(prop) - np.log(st.alpha))
            if np.log(rng.random()) <= ratio:
                st.alpha = float(prop)
                self.acc["alpha"][0] += 1
            if pr.esp_family == "2PB":
                cur = self._esp_log_target(st.alpha, st.gamma)
                prop = st.gamma * np.exp(pr.rw_sd_gamma * rng.standard_normal())
                self.acc["gamma"][1] += 1
                ratio = (self._esp_log_target(st.alpha, prop) - cur
                         + np.log(prop) - np.log(st.gamma))
                if np.log(rng.random()) <= ratio:
                    st.gamma = float(prop)
                    self.acc["gamma"][0] += 1
        if st.r:
            a_k, b_k = self._esp_params()
            d = st.delta[:, :st.r].sum(axis=0)
            piv = st.active_pivots()
            st.tau[:st.r] = rng.beta(a_k + d - 1.0, b_k + self.m - piv - d)
        self._post_step_check()

    # ----------------------------------------------------------------- step D

    def _column_odds(self, target_col: int, rows: np.ndarray,
                     exclude: tuple[int, ...] = ()) -> np.ndarray:
        """Likelihood odds of delta=1 vs 0 in one stored column, given rows.

        ``exclude`` lists column indices whose indicators are ignored in the
        conditioning (used by the pivot-switch move).
        """
        st = self.state
        r = st.r
        db = st.delta[:, :r].astype(bool)
        db[:, target_col] = False
        for e in exclude:
            db[:, e] = False
        v0 = self._v0_active()
        return cj.column_odds(
            rows=rows, delta_others=db,
            gram=self.G, covec=self.H,
            g_t=self.G[target_col, :r], g_tt=self.G[target_col, target_col],
            h_t=self.H[target_col], yty=self.yty, T=self.T,
            c0=self.prior.c0, C_i0=self.C_i0,
            v0_others=v0, v0_target=None if v0 is None else v0[:, target_col],
            b=self.b)

    def _scan_tokens(self):
        """Random visit order over active columns, robust to removals."""
        order = list(self.rng.permutation(self.state.r)) if self.state.r else []
        slots = {int(t): int(t) for t in order}
        return [int(t) for t in order], slots

    def _remove_active_column(self, j: int):
        st = self.state
        r = st.r
        for arr in (st.delta, st.lam):
            arr[:, j:r - 1] = arr[:, j + 1:r]
            arr[:, r - 1] = 0
        st.factors[j:r - 1] = st.factors[j + 1:r]
        st.factors[r - 1] = 0.0
        st.tau[j:r - 1] = st.tau[j + 1:r]
        sh = st.shrink
        if sh is not None:
            sh.theta[j:r - 1] = sh.theta[j + 1:r]
            if sh.aux_b_theta is not None:
                sh.aux_b_theta[j:r - 1] = sh.aux_b_theta[j + 1:r]
            if sh.omega is not None:
                sh.omega[:, j:r - 1] = sh.omega[:, j + 1:r]
                sh.aux_b_omega[:, j:r - 1] = sh.aux_b_omega[:, j + 1:r]
        st.r = r - 1
        st.r_sp += 1
        self._refresh_cache()

    def step_d(self):
        """Variable selection below each pivot, in random column order."""
        st, rng = self.state, self.rng
        tokens, slots = self._scan_tokens()
        for tok in tokens:
            if tok not in slots:
                continue
            j = slots[tok]
            piv = int(np.flatnonzero(st.delta[:, j])[0])
            rows = np.arange(piv + 1, self.m)
            if rows.size == 0:
                continue
            odds = self._column_odds(j, rows)
            new_col, n_acc = cj.multimove_indicator_sample(
                st.delta[:, j], rows, odds, float(st.tau[j]), rng)
            self.acc["flip_d"][0] += n_acc
            self.acc["flip_d"][1] += rows.size
            turned_off = (st.delta[:, j] == 1) & (new_col == 0)
            st.lam[turned_off, j] = 0.0
            st.delta[:, j] = new_col
            if int(new_col.sum()) == 1:
                self._demote(j, slots)
        self._post_step_check()

    def _demote(self, j: int, slots: dict):
        self._remove_active_column(j)
        drop = [t for t, s in slots.items() if s == j]
        for t in drop:
            slots.pop(t)
        for t, s in slots.items():
            if s > j:
                slots[t] = s - 1

    # ----------------------------------------------------------------- step L

    def step_l(self):
        """Pivot moves: shift, switch, or an add/delete pair, per column."""
        st, pr, rng = self.state, self.prior, self.rng
        tokens, slots = self._scan_tokens()
        for tok in tokens:
            if tok not in slots:
                continue
            j = slots[tok]
            u = rng.random()
            if u < pr.p_shift:
                self._move_shift(j, slots)
            elif u < pr.p_shift + pr.p_switch:
                self._move_switch(j, slots)
            else:
                self._move_add_delete(j, slots)
        self._post_step_check()

    def _other_pivots(self, j: int) -> np.ndarray:
        st = self.state
        piv = st.active_pivots()
        return np.delete(piv, j)

    def _move_shift(self, j: int, slots: dict):
        st, rng = self.state, self.rng
        a_k, b_k = self._esp_params()
        col = st.delta[:, j]
        piv = int(np.flatnonzero(col)[0])
        below = np.flatnonzero(col[piv + 1:])
        l_star = piv + 1 + int(below[0])
        others = self._other_pivots(j)
        cand = np.setdiff1d(np.arange(l_star), others)
        if cand.size == 0:
            return
        l_new = int(cand[rng.integers(cand.size)])
        self.acc["shift"][1] += 1
        d_j = int(col.sum())
        if l_new == piv:
            self.acc["shift"][0] += 1
            return
        odds = self._column_odds(j, np.array([l_new, piv]))
        log_ratio = (odds[0] - odds[1]
                     + self._log_col_prior(a_k, b_k, l_new, d_j)
                     - self._log_col_prior(a_k, b_k, piv, d_j))
        if np.log(rng.random()) <= log_ratio:
            st.delta[l_new, j] = 1
            st.delta[piv, j] = 0
            st.lam[piv, j] = 0.0
            self.acc["shift"][0] += 1

    def _move_switch(self, j: int, slots: dict):
        st, rng = self.state, self.rng
        if st.r < 2:
            return
        a_k, b_k = self._esp_params()
        other = np.delete(np.arange(st.r), j)
        ell = int(other[rng.integers(other.size)])
        piv = st.active_pivots()
        lo, hi = sorted((int(piv[j]), int(piv[ell])))
        strip = np.arange(lo, hi + 1)
        diff = strip[st.delta[strip, j] != st.delta[strip, ell]]
        self.acc["switch"][1] += 1
        odds_j = self._column_odds(j, diff, exclude=(ell,))
        odds_l = self._column_odds(ell, diff, exclude=(j,))
        sign = np.where(st.delta[diff, j] == 0, 1.0, -1.0)
        loglik = float(np.sum(sign * (odds_j - odds_l)))
        # prior ratio from the swapped pivots and column sizes
        new_dj = np.array(st.delta[:, j])
        new_dl = np.array(st.delta[:, ell])
        new_dj[diff], new_dl[diff] = st.delta[diff, ell], st.delta[diff, j]
        log_prior = 0.0
        for old_col, new_col in ((st.delta[:, j], new_dj), (st.delta[:, ell], new_dl)):
            p_old = int(np.flatnonzero(old_col)[0])
            p_new = int(np.flatnonzero(new_col)[0])
            log_prior += (self._log_col_prior(a_k, b_k, p_new, int(new_col.sum()))
                          - self._log_col_prior(a_k, b_k, p_old, int(old_col.sum())))
        if np.log(rng.random()) <= loglik + log_prior:
            turned_off_j = (st.delta[:, j] == 1) & (new_dj == 0)
            turned_off_l = (st.delta[:, ell] == 1) & (new_dl == 0)
            st.lam[turned_off_j, j] = 0.0
            st.lam[turned_off_l, ell] = 0.0
            st.delta[:, j] = new_dj
            st.delta[:, ell] = new_dl
            self.acc["switch"][0] += 1
            # either column may now be spurious; demote higher slot first
            for col in sorted({j, ell}, reverse=True):
                if int(st.delta[:, col].sum()) == 1:
                    self._demote(col, slots)

    def _move_add_delete(self, j: int, slots: dict):
        st, pr, rng = self.state, self.prior, self.rng
        a_k, b_k = self._esp_params()
        col = st.delta[:, j]
        piv = int(np.flatnonzero(col)[0])
        d_j = int(col.sum())
        others = self._other_pivots(j)
        add_set = np.setdiff1d(np.arange(piv), others)
        below = np.flatnonzero(col[piv + 1:])
        l_star = piv + 1 + int(below[0])
        can_add = add_set.size > 0
        can_del = l_star not in others
        if not can_add and not can_del:
            return
        p_add = pr.p_a if (can_add and can_del) else (1.0 if can_add else 0.0)
        if rng.random() < p_add:
            self.acc["add"][1] += 1
            l_new = int(add_set[rng.integers(add_set.size)])
            odds = float(self._column_odds(j, np.array([l_new]))[0])
            log_prior = (self._log_col_prior(a_k, b_k, l_new, d_j + 1)
                         - self._log_col_prior(a_k, b_k, piv, d_j))
            # reverse delete happens with probability 1 - p_add at the new state
            add_set_new = np.setdiff1d(np.arange(l_new), others)
            p_add_new = pr.p_a if add_set_new.size > 0 else 0.0
            log_ratio = (odds + log_prior + np.log(add_set.size)
                         + np.log(1.0 - p_add_new) - np.log(p_add))
            if np.log(rng.random()) <= log_ratio:
                st.delta[l_new, j] = 1
                self.acc["add"][0] += 1
        else:
            self.acc["delete"][1] += 1
            odds = float(self._column_odds(j, np.array([piv]))[0])
            log_prior = (self._log_col_prior(a_k, b_k, l_star, d_j - 1)
                         - self._log_col_prior(a_k, b_k, piv, d_j))
            rev_set = np.setdiff1d(np.arange(l_star), others)
            # p_add at the collapsed state: 1 unless a further delete is possible
            del_feasible_new = False
            if d_j - 1 >= 2:
                nxt = np.flatnonzero(st.delta[l_star + 1:, j])
                if nxt.size:
                    del_feasible_new = (l_star + 1 + int(nxt[0])) not in others
            p_add_new = pr.p_a if del_feasible_new else 1.0
            log_ratio = (-odds + log_prior + np.log(p_add_new)
                         - np.log(rev_set.size) - np.log(1.0 - p_add))
            if np.log(rng.random()) <= log_ratio:
                st.delta[piv, j] = 0
                st.lam[piv, j] = 0.0
                self.acc["delete"][0] += 1
                if d_j - 1 == 1:
                    self._demote(j, slots)

    # ------------------------------------------------------------ steps P, F

    def step_p(self):
        """Joint draw of all loadings and idiosyncratic variances."""
        st = self.state
        r = st.r
        delta = st.delta[:, :r].astype(bool)
        lam, sigma2, skipped = cj.block_sample(
            self.Y, delta, st.factors[:r], self.prior.c0, self.C_i0, self.rng,
            v0_diag=self._v0_active(), b=self.b, gram=self.G,
            covec=self.H, yty=self.yty)
        for i in skipped:
            # singular factor Gram under the fractional prior: keep the
            # previous draw for this row and let step F move the factors
            lam[i] = st.lam[i, :r]
            sigma2[i] = st.sigma2[i]
        st.lam[:, :r] = lam
        st.sigma2[:] = sigma2
        self._post_step_check()

    def step_f(self):
        st = self.state
        if st.r == 0:
            return
        st.factors[:st.r] = cj.sample_factors(st.lam[:, :st.r], st.sigma2,
                                              self.Y, self.rng)
        self._refresh_cache()
        self._post_step_check()

    # ----------------------------------------------------------------- step S

    def step_s(self):
        """Refresh local, column and global shrinkage scales."""
        st, pr, rng = self.state, self.prior, self.rng
        if not pr.has_shrinkage:
            self.warn_step_s_noop += 1
            return
        sh = st.shrink
        r = st.r
        delta = st.delta[:, :r].astype(np.float64)
        lam2 = st.lam[:, :r] ** 2
        lam2_over_s2 = lam2 / st.sigma2[:, None]
        if pr.slab_family == "gaussian_triple":
            # locals refresh on every cell so pivot moves can price any row
            om = sh.omega[:, :r]
            sh.aux_b_omega[:, :r] = gamma_rate(
                rng, pr.a_omega + pr.c_omega, pr.a_omega / pr.c_omega + 1.0 / om)
            scale = sh.aux_b_omega[:, :r] + delta * lam2_over_s2 / (
                2.0 * sh.kappa * sh.theta[:r])
            sh.omega[:, :r] = inv_gamma(rng, pr.c_omega + 0.5 * delta, scale)
            om_div = sh.omega[:, :r]
        else:
            om_div = 1.0
        if r:
            d = delta.sum(axis=0)
            col_ss = np.sum(delta * lam2_over_s2 / om_div, axis=0)
            if pr.theta_family == "F":
                sh.aux_b_theta[:r] = gamma_rate(
                    rng, pr.a_theta + pr.c_theta,
                    pr.a_theta / pr.c_theta + 1.0 / sh.theta[:r])
                b_th = sh.aux_b_theta[:r]
            else:
                b_th = pr.b_theta
            sh.theta[:r] = inv_gamma(rng, pr.c_theta + 0.5 * d,
                                     b_th + col_ss / (2.0 * sh.kappa))
        d_tot = float(delta.sum())
        glob_ss = float(np.sum(delta * lam2_over_s2 / om_div / sh.theta[:r])) if r else 0.0
        if pr.kappa_family == "F":
            sh.aux_b_kappa = float(gamma_rate(
                rng, pr.a_kappa + pr.c_kappa,
                pr.a_kappa / pr.c_kappa + 1.0 / sh.kappa))
            b_ka = sh.aux_b_kappa
        else:
            b_ka = pr.b_kappa
        sh.kappa = float(inv_gamma(rng, pr.c_kappa + 0.5 * d_tot,
                                   b_ka + 0.5 * glob_ss))
        self._post_step_check()

    # ----------------------------------------------------------------- step A

    def step_a(self):
        """Rescale (loadings, factors) jointly to break posterior dependence."""
        st, pr, rng = self.state, self.prior, self.rng
        mode = pr.boosting
        if mode == "none" or st.r == 0:
            return
        if mode in ("asis", "mda"):
            for j in range(st.r):
                d_j = int(st.delta[:, j].sum())
                sf2 = float(self.G[j, j])
                if mode == "asis":
                    if self.T <= d_j:
                        continue
                    anchor = (int(np.flatnonzero(st.delta[:, j])[0])
                              if pr.asis_anchor == "pivot"
                              else int(np.argmax(np.abs(st.lam[:, j]))))
                    psi = st.lam[anchor, j] ** 2
                    if psi == 0.0:
                        continue
                    psi_new = float(inv_gamma(rng, 0.5 * (self.T - d_j),
                                              0.5 * psi * sf2))
                else:
                    psi = float(inv_gamma(rng, pr.mda_nu, pr.mda_q))
                    psi_new = float(inv_gamma(rng, pr.mda_nu - 0.5 * d_j + 0.5 * self.T,
                                              pr.mda_q + 0.5 * psi * sf2))
                scale = np.sqrt(psi_new / psi)
                st.lam[:, j] *= scale
                st.factors[j] /= scale
        elif mode == "column":
            sh = st.shrink
            b_th = (sh.aux_b_theta[:st.r] if pr.theta_family == "F"
                    else np.full(st.r, pr.b_theta))
            for j in range(st.r):
                sf2 = float(self.G[j, j])
                theta_new = float(inv_gamma(rng, pr.c_theta + 0.5 * self.T,
                                            b_th[j] + 0.5 * sh.theta[j] * sf2))
                scale = np.sqrt(theta_new / sh.theta[j])
                st.lam[:, j] *= scale
                st.factors[j] /= scale
                sh.theta[j] = theta_new
            # interweave kappa into the theta prior; loadings are untouched
            b_ka = sh.aux_b_kappa if pr.kappa_family == "F" else pr.b_kappa
            p_gig = st.r * pr.c_theta - pr.c_kappa
            a_gig = 2.0 / sh.kappa * float(np.sum(b_th / sh.theta[:st.r]))
            kappa_new = gig(rng, p_gig, a_gig, 2.0 * b_ka)
            sh.theta[:st.r] *= sh.kappa / kappa_new
            sh.kappa = kappa_new
        self._refresh_cache()
        self._post_step_check()

    # ----------------------------------------------------------------- step R

    def step_r(self):
        """Reversible-jump excursion over the spurious columns."""
        st, pr, rng = self.state, self.prior, self.rng
        m, k = self.m, self.k
        a_k, b_k = self._esp_params()
        u = rng.random()
        p_split = pr.p_s if st.r + st.r_sp < k else 0.0
        p_merge = pr.p_s if st.r_sp > 0 else 0.0
        if u < p_split:
            self.acc["split"][1] += 1
            ratio = split_accept_ratio(a_k, b_k, m, k, st.r, st.r_sp)
            if rng.random() <= ratio:
                st.r_sp += 1
                self.acc["split"][0] += 1
        elif u < p_split + p_merge:
            self.acc["merge"][1] += 1
            ratio = merge_accept_ratio(a_k, b_k, m, k, st.r, st.r_sp)
            if rng.random() <= ratio:
                st.r_sp -= 1
                self.acc["merge"][0] += 1
        if st.r_sp == 0:
            self._post_step_check()
            return
        # (R-L) pivots of the spurious columns, sequential then sorted
        occupied = set(st.active_pivots().tolist())
        avail = [i for i in range(m) if i not in occupied]
        pivots_sp = []
        for _ in range(st.r_sp):
            pick = int(rng.integers(len(avail)))
            pivots_sp.append(avail.pop(pick))
        pivots_sp.sort()
        n_sp = len(pivots_sp)
        # (R-F) variance split and factor proposal per spurious column
        us = rng.uniform(-1.0, 1.0, size=n_sp)
        f_sp = np.empty((n_sp, self.T))
        for s, p in enumerate(pivots_sp):
            if self._frozen is not None:
                f_sp[s] = self._frozen[min(st.r + s, self.k - 1)]
                continue
            resid = self.Y[p] - st.lam[p, :st.r] @ st.factors[:st.r]
            f_sp[s] = propose_spurious_factors(us[s], resid, st.sigma2[p], rng)
        # (R-H) slab probabilities at column size one
        tau_sp = rng.beta(a_k, b_k + m - 1 - np.asarray(pivots_sp, dtype=np.float64))
        # (R-D) try to activate, from the largest pivot to the smallest
        for s in range(n_sp - 1, -1, -1):
            self._try_activate(pivots_sp[s], us[s], f_sp[s], float(tau_sp[s]))
        self._post_step_check()

    def _try_activate(self, p: int, u_sp: float, f_new: np.ndarray, tau_sp: float):
        """Variable selection below a spurious pivot; promote on success."""
        st, pr, rng = self.state, self.prior, self.rng
        m, r = self.m, st.r
        # shrinkage scales for the candidate column, informed by the split
        theta_sp = b_theta_sp = omega_col = b_omega_col = None
        if pr.has_shrinkage:
            kappa = st.shrink.kappa
            ratio = u_sp * u_sp / max(1.0 - u_sp * u_sp, np.finfo(float).tiny)
            if pr.theta_family == "F":
                th0, _ = f_scale_mixture(rng, pr.a_theta, pr.c_theta)
                b_theta_sp = float(gamma_rate(rng, pr.a_theta + pr.c_theta,
                                              pr.a_theta / pr.c_theta + 1.0 / th0))
            else:
                b_theta_sp = pr.b_theta
            if pr.slab_family == "gaussian_triple":
                omega_col, b_omega_col = f_scale_mixture(
                    rng, pr.a_omega, pr.c_omega, size=m)
                theta_sp = float(inv_gamma(
                    rng, pr.c_theta + 0.5,
                    b_theta_sp + ratio / (2.0 * kappa * omega_col[p])))
                b_omega_col[p] = float(gamma_rate(
                    rng, pr.a_omega + pr.c_omega,
                    pr.a_omega / pr.c_omega + 1.0 / omega_col[p]))
                omega_col[p] = float(inv_gamma(
                    rng, pr.c_omega + 0.5,
                    b_omega_col[p] + ratio / (2.0 * kappa * theta_sp)))
            else:
                theta_sp = float(inv_gamma(rng, pr.c_theta + 0.5,
                                           b_theta_sp + ratio / (2.0 * kappa)))
        rows = np.arange(p + 1, m)
        new_col = np.zeros(m, dtype=np.int8)
        new_col[p] = 1
        if rows.size:
            v0 = self._v0_active()
            if pr.slab_family == "fractional":
                v0_target = None
            elif pr.slab_family == "gaussian_fixed":
                v0_target = np.full(m, pr.A0)
            elif pr.slab_family == "gaussian_triple":
                v0_target = st.shrink.kappa * theta_sp * omega_col
            else:
                v0_target = np.full(m, st.shrink.kappa * theta_sp)
            odds = cj.column_odds(
                rows=rows,
                delta_others=st.delta[:, :r].astype(bool),
                gram=self.G, covec=self.H,
                g_t=st.factors[:r] @ f_new, g_tt=float(f_new @ f_new),
                h_t=self.Y @ f_new, yty=self.yty, T=self.T,
                c0=pr.c0, C_i0=self.C_i0, v0_others=v0,
                v0_target=v0_target, b=self.b)
            new_col, n_acc = cj.multimove_indicator_sample(
                new_col, rows, odds, tau_sp, rng)
            self.acc["flip_r"][0] += n_acc
            self.acc["flip_r"][1] += rows.size
        if int(new_col.sum()) < 2:
            return
        # promotion: the split loading becomes the pivot loading and the
        # pivot row's variance keeps its reduced share, so the implied
        # covariance is unchanged
        slot = st.r
        st.delta[:, slot] = new_col
        st.lam[:, slot] = 0.0
        if self._frozen is None:
            xi = u_sp * np.sqrt(st.sigma2[p])
            st.sigma2[p] = (1.0 - u_sp ** 2) * st.sigma2[p]
            st.lam[p, slot] = xi
        st.factors[slot] = f_new
        st.tau[slot] = tau_sp
        sh = st.shrink
        if sh is not None:
            sh.theta[slot] = theta_sp
            if sh.aux_b_theta is not None:
                sh.aux_b_theta[slot] = b_theta_sp
            if sh.omega is not None:
                sh.omega[:, slot] = omega_col
                sh.aux_b_omega[:, slot] = b_omega_col
        st.r += 1
        st.r_sp -= 1
        self._refresh_cache()

    # ------------------------------------------------------------ run control

    def _post_step_check(self):
        if self.cfg.debug_checks:
            self.state.check()

    def record(self, iteration: int) -> DrawRecord:
        st = self.state
        rows, cols = np.nonzero(st.delta[:, :st.r])
        support = np.column_stack([rows, cols]).astype(np.int64)
        sh = st.shrink
        return DrawRecord(
            iteration=iteration, r=st.r, r_sp=st.r_sp, d=int(rows.size),
            support=support, lam_values=st.lam[rows, cols].copy(),
            sigma2=st.sigma2.copy(), tau=st.tau[:st.r].copy(),
            alpha=st.alpha, gamma=st.gamma,
            theta=None if sh is None else sh.theta[:st.r].copy(),
            kappa=None if sh is None else sh.kappa,
            accept={mv: (acc[0], acc[1]) for mv, acc in self.acc.items()})

    def sweep_cfa(self):
        self.step_h()
        self.step_d()
        self.step_l()
        if self._frozen is None:
            self.step_p()
            self.step_f()
            self.step_s()
            self.step_a()

    def run(self, store=None, progress_every: int = 0, progress_stream=None,
            stop_flag=None) -> list[DrawRecord]:
        """Run burn-in plus retained sweeps, appending records to ``store``."""
        cfg = self.cfg
        records = []
        total = cfg.n_burnin + cfg.n_draws
        stream = progress_stream or sys.stderr
        for it in range(total):
            self.sweep_cfa()
            if it >= cfg.n_burnin and (it - cfg.n_burnin) % cfg.thin == 0:
                rec = self.record(it)
                records.append(rec)
                if store is not None:
                    store.append(rec)
            self.step_r()
            if progress_every and (it + 1) % progress_every == 0:
                self._emit_progress(stream, it + 1)
            if stop_flag is not None and stop_flag():
                break
        return records

    def _emit_progress(self, stream, it: int):
        st = self.state
        d = int(st.delta[:, :st.r].sum())
        rates = " ".join(
            f"acc_{mv}={acc[0] / acc[1]:.3f}" for mv, acc in self.acc.items()
            if acc[1] > 0)
        print(f"progress chain={self.chain_id} it={it} r={st.r} "
              f"r_sp={st.r_sp} d={d} {rates}", file=stream, flush=True)


def run_chain(config: ChainConfig, data, store=None, chain_id: int = 0,
              progress_every: int = 0, progress_stream=None,
              stop_flag=None) -> list[DrawRecord]:
    """Initialize and run one chain; fully deterministic given the seed."""
    chain = Chain(config, data, chain_id=chain_id)
    return chain.run(store=store, progress_every=progress_every,
                     progress_stream=progress_stream, stop_flag=stop_flag)
