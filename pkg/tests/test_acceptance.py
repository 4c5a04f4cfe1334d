"""Acceptance criteria, one test per criterion at its stated tolerance.

Each test prints one machine-greppable verdict line; run with ``pytest -s``
to see them.  Criterion 6 is implemented exactly as stated and is expected
to FAIL: the sampler's dimension-boundary bookkeeping (position-forgetting
demotion plus uniform re-materialization) provably cannot be in detailed
balance with the enumerated pivot-anchored prior for any parameter values,
so the chain's stationary law inflates the negligible-mass boundary states.
The same test asserts first (and passes) the exact sub-checks that ARE
attainable: within a fixed-pivot block the conditional law matches the
enumeration.  See the companion kernel diagnostic in test_exact_kernel.py,
which verifies the implementation reproduces the literal algorithm's
stationary law.
"""

import time
from fractions import Fraction
from itertools import combinations, product

import numpy as np
import pytest
from scipy import stats
from scipy.special import betaln

from gltfa.conjugate import block_sample, column_odds, marginal_loglik, row_posterior
from gltfa.data import Dataset, dedicated_block_delta, simulate_dataset
from gltfa.identification import counting_rule_check
from gltfa.model import PriorConfig
from gltfa.postprocess import factor_dimension_posterior, filter_variance_identified
from gltfa.sampler import (Chain, ChainConfig, merge_accept_ratio, run_chain,
                           split_accept_ratio)
from gltfa.store import encode_record


def verdict(n, name, ok, extra=""):
    print(f"[acceptance] criterion {n} ({name}): {'PASS' if ok else 'FAIL'} {extra}",
          flush=True)
    assert ok, f"criterion {n} ({name}) failed: {extra}"


def standardized(data):
    y = data.y
    y = (y - y.mean(axis=1, keepdims=True)) / y.std(axis=1, ddof=1, keepdims=True)
    return Dataset(y=y, feature_names=data.feature_names, standardized=True)


# --------------------------------------------------------------- criterion 1

def naive_counting_rule(delta):
    m, r = delta.shape
    rows = delta.astype(bool)
    for q in range(1, r + 1):
        for subset in combinations(range(r), q):
            if np.count_nonzero(rows[:, subset].any(axis=1)) < 2 * q + 1:
                return False
    return True


def test_criterion_1_counting_rule_oracle():
    rng = np.random.default_rng(20240)
    t0 = time.time()
    n_checked = 0
    disagreements = 0
    while n_checked < 10_000:
        m = int(rng.integers(3, 13))
        r = int(rng.integers(1, 6))
        delta = (rng.random((m, r)) < rng.uniform(0.15, 0.85)).astype(np.int8)
        if np.any(delta.sum(axis=0) == 0):
            continue
        n_checked += 1
        if bool(counting_rule_check(delta)) != naive_counting_rule(delta):
            disagreements += 1
    elapsed = time.time() - t0
    verdict(1, "counting rule oracle equivalence",
            disagreements == 0 and elapsed < 30.0,
            f"{n_checked} matrices, {disagreements} disagreements, {elapsed:.1f}s")


# --------------------------------------------------------------- criterion 2

def test_criterion_2_marginal_likelihood_consistency():
    rng = np.random.default_rng(20241)
    worst = 0.0
    n_instances = 0
    while n_instances < 1000:
        hierarchical = n_instances % 2 == 0
        m = int(rng.integers(4, 9))
        T = int(rng.integers(8, 31))
        r = int(rng.integers(1, 4))
        F = rng.standard_normal((r, T))
        delta = (rng.random((m, r)) < 0.5).astype(np.int8)
        Y = rng.standard_normal((m, T))
        v0 = rng.uniform(0.3, 3.0, size=(m, r)) if hierarchical else None
        b = None if hierarchical else 1.0 / (m * T)
        C_i0 = rng.uniform(0.5, 2.0, size=m)
        j = int(rng.integers(r))
        others = delta.astype(bool)
        others[:, j] = False
        gram = F @ F.T
        covec = F @ Y.T
        yty = np.einsum("ij,ij->i", Y, Y)
        rows = np.arange(m)
        odds = column_odds(rows, others, gram, covec, gram[j], gram[j, j],
                           covec[j], yty, T, 2.5, C_i0, v0,
                           None if v0 is None else v0[:, j], b)
        for i in rows:
            on = others[i].astype(int).copy()
            off = on.copy()
            on[j], off[j] = 1, 0
            v0r = None if v0 is None else v0[i]
            want = (marginal_loglik(Y[i], on, F, 2.5, C_i0[i], v0_diag_row=v0r, b=b)
                    - marginal_loglik(Y[i], off, F, 2.5, C_i0[i], v0_diag_row=v0r, b=b))
            rel = abs(odds[i] - want) / max(abs(want), 1e-8)
            worst = max(worst, rel)
        n_instances += 1
    verdict(2, "marginal likelihood consistency", worst < 1e-8,
            f"1000 instances, worst relative error {worst:.2e}")


# --------------------------------------------------------------- criterion 3

def test_criterion_3_block_sampler_moments():
    rng = np.random.default_rng(20242)
    m, T = 3, 40
    r = 2
    F = rng.standard_normal((r, T))
    Y = rng.standard_normal((m, T)) + np.array([[1.0], [0.5], [-0.7]]) * F[0]
    delta = np.array([[1, 0], [1, 1], [0, 1]], dtype=bool)
    v0 = np.full((m, r), 1.5)
    c0 = 2.5
    C_i0 = np.ones(m)
    gram = F @ F.T
    covec = F @ Y.T
    yty = np.einsum("ij,ij->i", Y, Y)

    posts = []
    for i in range(m):
        sup = np.flatnonzero(delta[i])
        posts.append(row_posterior(Y[i], F[sup].T, c0, C_i0[i], v0_diag=v0[i, sup]))
    # x'x identity against a dense solve, checked per row on every draw's
    # deterministic block system
    for i, post in enumerate(posts):
        sup = np.flatnonzero(delta[i])
        vinv = np.diag(1.0 / v0[i, sup]) + gram[np.ix_(sup, sup)]
        c = covec[sup, i]
        cvc = float(c @ np.linalg.solve(vinv, c))
        assert abs(float(post.x @ post.x) - cvc) <= 1e-10 * max(1.0, abs(cvc))

    n = 100_000
    lam_draws = np.empty((n, m, r))
    sig_draws = np.empty((n, m))
    for s in range(n):
        lam, sig, skipped = block_sample(Y, delta, F, c0, C_i0, rng,
                                         v0_diag=v0, gram=gram, covec=covec,
                                         yty=yty)
        assert not skipped
        lam_draws[s] = lam
        sig_draws[s] = sig
    ok = True
    msgs = []
    for i, post in enumerate(posts):
        sup = np.flatnonzero(delta[i])
        want_lam = post.mean()
        got = lam_draws[:, i, sup]
        se = got.std(axis=0) / np.sqrt(n)
        z_lam = np.abs(got.mean(axis=0) - want_lam) / se
        want_sig = post.C_iT / (post.c_T - 1)
        se_s = sig_draws[:, i].std() / np.sqrt(n)
        z_sig = abs(sig_draws[:, i].mean() - want_sig) / se_s
        ok &= bool(np.all(z_lam < 3) and z_sig < 3)
        msgs.append(f"row{i}: max z_lam={z_lam.max():.2f} z_sig={z_sig:.2f}")
    verdict(3, "block sampler moments + x'x identity", ok, "; ".join(msgs))


# --------------------------------------------------------------- criterion 4

def test_criterion_4_rj_acceptance_algebra():
    a_k, b_k = Fraction(7, 10), Fraction(13, 10)
    n_checked = 0
    exact = True
    for m in range(3, 64):
        kmax = min(31, (m - 1) // 2)
        for k in range(1, kmax + 1):
            for r in range(0, k + 1):
                for r_sp in range(1, k - r + 1):
                    prod = (merge_accept_ratio(a_k, b_k, m, k, r, r_sp)
                            * split_accept_ratio(a_k, b_k, m, k, r, r_sp - 1))
                    exact &= prod == 1
                    n_checked += 1
    worked = split_accept_ratio(1, 1, 10, 4, 2, 0)
    verdict(4, "RJ acceptance algebra", exact and worked == 2,
            f"{n_checked} rational identities, worked value {worked}")


# --------------------------------------------------------------- criterion 5

def test_criterion_5_cfa_efa_and_boosting_invariance():
    from gltfa.model import collapse_efa_to_cfa, expand_cfa_to_efa, implied_covariance
    from tests.test_model import random_state

    rng = np.random.default_rng(20243)
    worst_cov = 0.0
    for _ in range(1000):
        state = random_state(rng, m=8, k=3, r=2, r_sp=1)
        piv = set(state.active_pivots().tolist())
        free = [i for i in range(state.m) if i not in piv]
        u = rng.uniform(-0.99, 0.99)
        l_sp = free[int(rng.integers(len(free)))]
        xi = u * np.sqrt(state.sigma2[l_sp])
        efa = expand_cfa_to_efa(state, [l_sp], [xi])
        back = collapse_efa_to_cfa(efa)
        base = implied_covariance(state, "cfa")
        worst_cov = max(worst_cov,
                        np.abs(implied_covariance(efa, "efa") - base).max(),
                        np.abs(implied_covariance(back, "cfa") - base).max())
    assert worst_cov < 1e-10

    # boosting: the loading-factor product is elementwise invariant
    delta = dedicated_block_delta(9, 2)
    data, _ = simulate_dataset(9, 60, delta, 1.0, 0.3, seed=5)
    data = standardized(data)
    worst_prod = 0.0
    for slab, mode in (("fractional", "asis"), ("fractional", "mda"),
                       ("gaussian_column", "column"), ("gaussian_triple", "column")):
        prior = PriorConfig(slab_family=slab, boosting=mode, idio_mode="fixed")
        cfg = ChainConfig(n_draws=1, seed=5, k=4, prior=prior, init_gibbs_iters=10)
        chain = Chain(cfg, data)
        st = chain.state
        for _ in range(250):
            prod = st.lam[:, :st.r] @ st.factors[:st.r]
            chain.step_a()
            worst_prod = max(worst_prod,
                             np.abs(st.lam[:, :st.r] @ st.factors[:st.r] - prod).max())
    verdict(5, "CFA/EFA and boosting invariance",
            worst_cov < 1e-10 and worst_prod < 1e-10,
            f"cov err {worst_cov:.2e}, product err {worst_prod:.2e}")


# --------------------------------------------------------------- criterion 6

def frozen_toy():
    """m=4, k=1, T=20 toy with pinned factors and fixed hyperparameters."""
    m, T = 4, 20
    A0, c0, C0 = 1.5, 1.0 * 2.5, 1.0
    alpha0, gamma0 = 0.7 / 1.3, 1.3        # a_k = 0.7, b_k = 1.3
    rng = np.random.default_rng(99)
    fstar = rng.standard_normal(T)
    Y = np.vstack([
        1.0 * fstar + 0.5 * rng.standard_normal(T),
        -0.8 * fstar + 0.5 * rng.standard_normal(T),
        rng.standard_normal(T),
        rng.standard_normal(T),
    ])
    data = Dataset(y=Y, feature_names=list("abcd"))
    prior = PriorConfig(esp_family="2PB", slab_family="gaussian_fixed", A0=A0,
                        c0=c0, idio_mode="fixed", C0=C0, boosting="none")
    cfg = ChainConfig(n_draws=1, seed=2024, k=1, prior=prior, r_init=1,
                      r_sp_init=0, alpha_init=alpha0, gamma_init=gamma0,
                      fix_esp_hyper=True, init_gibbs_iters=0)
    return data, cfg, fstar, (0.7, 1.3, A0, c0, C0)


def enumerate_toy_target(data, fstar, params):
    """Unnormalized posterior: column prior (pivot-anchored) x marginal lik."""
    a_k, b_k, A0, c0, C0 = params
    m = data.m
    F = fstar[None, :]
    ml_on = np.array([marginal_loglik(data.y[i], [1], F, c0, C0,
                                      v0_diag_row=np.array([A0]))
                      for i in range(m)])
    ml_off = np.array([marginal_loglik(data.y[i], [0], F, c0, C0)
                       for i in range(m)])
    logw = {("zero",): betaln(a_k, b_k + m) - betaln(a_k, b_k) + ml_off.sum()}
    logw[("sp",)] = (np.log(m) + betaln(a_k + 1, b_k + m - 1)
                     - betaln(a_k, b_k) + ml_off.sum())
    for p in range(m - 1):
        for nsel in range(1, m - p):
            for B in combinations(range(p + 1, m), nsel):
                col = np.zeros(m, dtype=int)
                col[p] = 1
                col[list(B)] = 1
                d = 1 + nsel
                logw[("active", p, tuple(col))] = (
                    -np.log(m) + betaln(a_k + d - 1, b_k + m - p - d)
                    - betaln(a_k, b_k)
                    + sum(ml_on[i] if col[i] else ml_off[i] for i in range(m)))
    keys = sorted(logw, key=str)
    lw = np.array([logw[s] for s in keys])
    target = np.exp(lw - lw.max())
    return keys, target / target.sum()


def toy_state_key(chain):
    st = chain.state
    if st.r == 1:
        col = st.delta[:, 0]
        return ("active", int(np.flatnonzero(col)[0]),
                tuple(int(v) for v in col))
    return ("sp",) if st.r_sp == 1 else ("zero",)


def test_criterion_6_exact_posterior_toy():
    data, cfg, fstar, params = frozen_toy()
    keys, target = enumerate_toy_target(data, fstar, params)
    index = {s: i for i, s in enumerate(keys)}
    chain = Chain(cfg, data, frozen_factors=fstar)
    n_sweeps = 100_000
    t0 = time.time()
    visits = np.zeros((n_sweeps, len(keys)))
    for it in range(n_sweeps):
        chain.step_h()
        chain.step_d()
        chain.step_l()
        chain.step_r()
        visits[it, index[toy_state_key(chain)]] = 1.0
    elapsed = time.time() - t0
    assert elapsed < 300.0, f"toy chain too slow: {elapsed:.0f}s"
    freq = visits.mean(axis=0)

    # batch-means standard errors (the occupancy series is autocorrelated)
    n_batches = 100
    batch = visits.reshape(n_batches, -1, len(keys)).mean(axis=1)
    se = batch.std(axis=0, ddof=1) / np.sqrt(n_batches)
    se_floor = np.sqrt(np.maximum(target * (1 - target), 1e-12) / n_sweeps)
    z = np.abs(freq - target) / np.maximum(se, se_floor)

    # sub-check with an attainable target: conditional on the dominant pivot
    # block, the chain law matches the enumeration (steps H/D are exact MH
    # within a fixed-pivot column)
    block = [i for i, s in enumerate(keys) if s[0] == "active" and s[1] == 0]
    cond_freq = freq[block] / freq[block].sum()
    cond_tgt = target[block] / target[block].sum()
    cond_se = se[block] / freq[block].sum()
    z_block = np.abs(cond_freq - cond_tgt) / np.maximum(cond_se, 1e-6)
    print(f"[acceptance] criterion 6 diagnostic: fixed-pivot-block conditional "
          f"max z = {z_block.max():.2f} (PASS expected)", flush=True)
    assert np.all(z_block < 3), "within-block conditional law mismatch"

    worst = int(np.argmax(z))
    detail = (f"{n_sweeps} sweeps in {elapsed:.0f}s; max z = {z.max():.1f} at "
              f"state {keys[worst]} (chain {freq[worst]:.2e} vs enum "
              f"{target[worst]:.2e}); boundary states are inflated by the "
              f"position-forgetting demotion bookkeeping, see decisions ledger")
    verdict(6, "exact posterior toy", bool(np.all(z < 3)), detail)


# --------------------------------------------------------------- criterion 7

def test_criterion_7_synthetic_recovery():
    m, r_true, T, k = 15, 3, 500, 7
    n_rep = 10
    hits = 0
    details = []
    for rep in range(n_rep):
        t0 = time.time()
        delta = dedicated_block_delta(m, r_true)
        data, _ = simulate_dataset(m, T, delta, 1.0, 0.3, seed=1000 + rep,
                                   pivot_loading=1.0)
        data = standardized(data)
        prior = PriorConfig(esp_family="2PB", slab_family="fractional",
                            a_alpha=6.0, b_alpha=3.0, a_gamma=6.0, b_gamma=6.0,
                            c0=2.5, idio_mode="heywood")
        cfg = ChainConfig(n_draws=20_000, n_burnin=10_000, seed=1000 + rep,
                          k=k, prior=prior, r_init=2, r_sp_init=1)
        recs = run_chain(cfg, data)
        kept, p_v = filter_variance_identified(recs, m)
        post, mode = factor_dimension_posterior(kept)
        p_mode = post.get(r_true, 0.0)
        elapsed = time.time() - t0
        ok = mode == r_true and p_mode > 0.5 and p_v > 0.8 and elapsed < 900
        hits += ok
        details.append(f"rep{rep}: mode={mode} P(r={r_true})={p_mode:.3f} "
                       f"p_V={p_v:.3f} {elapsed:.0f}s {'ok' if ok else 'MISS'}")
        print(f"[acceptance] criterion 7 {details[-1]}", flush=True)
    verdict(7, "synthetic recovery", hits >= 9, f"{hits}/10 replicates pass")


# --------------------------------------------------------------- criterion 8

def test_criterion_8_determinism():
    delta = dedicated_block_delta(9, 2)
    data, _ = simulate_dataset(9, 80, delta, 1.0, 0.3, seed=17)
    data = standardized(data)
    blobs = []
    for _ in range(2):
        cfg = ChainConfig(n_draws=40, n_burnin=10, seed=99, k=4,
                          prior=PriorConfig(slab_family="gaussian_triple"),
                          init_gibbs_iters=20)
        recs = run_chain(cfg, data)
        blobs.append("\n".join(encode_record(r) for r in recs))
    verdict(8, "determinism", blobs[0] == blobs[1],
            f"{len(blobs[0])} bytes of serialized draws compared")


# --------------------------------------------------------------- criterion 9

def test_criterion_9_distributional_checks():
    # tau | l_j, d_j follows the stated Beta law (iid given frozen support)
    delta = dedicated_block_delta(9, 2)
    data, _ = simulate_dataset(9, 40, delta, 1.0, 0.3, seed=3)
    y5 = data.y[:5]
    d5 = Dataset(y=(y5 - y5.mean(1, keepdims=True)) / y5.std(1, ddof=1, keepdims=True),
                 feature_names=list("abcde"), standardized=True)
    prior = PriorConfig(esp_family="2PB", idio_mode="fixed")
    cfg = ChainConfig(n_draws=1, seed=5, k=1, r_init=1, r_sp_init=0,
                      init_gibbs_iters=0, prior=prior, alpha_init=1.0,
                      gamma_init=1.0, fix_esp_hyper=True)
    chain = Chain(cfg, d5)
    st = chain.state
    st.delta[:, 0] = 0
    st.delta[[0, 2, 4], 0] = 1
    st.lam[:, 0] = 0.0
    n = 10_000
    tau_draws = np.empty(n)
    for i in range(n):
        chain.step_h()
        tau_draws[i] = st.tau[0]
    ks_tau = stats.kstest(tau_draws, stats.beta(3, 3).cdf)

    # unused local scales keep their F prior (thinned to de-correlate)
    data9 = standardized(simulate_dataset(9, 60, delta, 1.0, 0.3, seed=4)[0])
    prior = PriorConfig(slab_family="gaussian_triple", idio_mode="fixed")
    cfg = ChainConfig(n_draws=1, seed=6, k=4, prior=prior, init_gibbs_iters=5)
    chain = Chain(cfg, data9)
    st = chain.state
    i0, j0 = 8, 0
    st.delta[i0, j0] = 0
    st.lam[i0, j0] = 0.0
    om_draws = np.empty(n)
    for s in range(n):
        for _ in range(5):
            chain.step_s()
        om_draws[s] = st.shrink.omega[i0, j0]
    a, c = prior.a_omega, prior.c_omega
    ks_om = stats.kstest(om_draws, lambda x: stats.f(2 * a, 2 * c).cdf(x))

    crit = 1.36 / np.sqrt(n)   # 5% KS critical value at n = 1e4
    verdict(9, "distributional unit checks",
            ks_tau.statistic < crit and ks_om.statistic < crit,
            f"KS tau {ks_tau.statistic:.4f}, KS omega {ks_om.statistic:.4f}, "
            f"critical {crit:.4f}")
