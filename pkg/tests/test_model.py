"""Core state types and the CFA/EFA algebra."""

import numpy as np
import pytest

from gltfa.model import (Dataset, ModelError, ModelState, SparsityMatrix,
                         classify_columns, collapse_efa_to_cfa,
                         expand_cfa_to_efa, implied_covariance)


def make_state(delta, lam, sigma2, r=None, r_sp=0, T=4):
    delta = np.asarray(delta, dtype=np.int8)
    lam = np.asarray(lam, dtype=np.float64)
    m, k = delta.shape
    if r is None:
        r = k
    return ModelState(delta=delta, lam=lam, sigma2=np.asarray(sigma2, dtype=np.float64),
                      factors=np.zeros((k, T)), tau=np.full(k, 0.5),
                      alpha=1.0, gamma=1.0, r=r, r_sp=r_sp)


def random_state(rng, m=8, k=3, r=2, r_sp=1):
    """A random valid CFA state with materializable spurious columns."""
    while True:
        piv = rng.choice(m - 3, size=r, replace=False)
        delta = np.zeros((m, k), dtype=np.int8)
        for j, p in enumerate(np.sort(piv)):
            delta[p, j] = 1
            below = p + 1 + np.flatnonzero(rng.random(m - p - 1) < 0.6)
            delta[below, j] = 1
        if np.all(delta[:, :r].sum(axis=0) >= 2):
            break
    lam = rng.standard_normal((m, k)) * delta
    sigma2 = 0.2 + rng.random(m)
    return make_state(delta, lam, sigma2, r=r, r_sp=r_sp)


class TestDataset:
    def test_accepts_valid(self):
        y = np.arange(12.0).reshape(3, 4)
        ds = Dataset(y=y, feature_names=["a", "b", "c"])
        assert ds.m == 3 and ds.T == 4

    def test_rejects_small_m(self):
        with pytest.raises(ModelError):
            Dataset(y=np.zeros((2, 5)), feature_names=["a", "b"])

    def test_rejects_nonfinite(self):
        y = np.zeros((3, 4))
        y[1, 2] = np.nan
        with pytest.raises(ModelError):
            Dataset(y=y, feature_names=list("abc"))

    def test_standardized_flag_checked(self):
        rng = np.random.default_rng(0)
        y = rng.standard_normal((3, 50))
        with pytest.raises(ModelError):
            Dataset(y=y, feature_names=list("abc"), standardized=True)
        z = (y - y.mean(axis=1, keepdims=True)) / y.std(axis=1, ddof=1, keepdims=True)
        Dataset(y=z, feature_names=list("abc"), standardized=True)


class TestClassifyColumns:
    def test_all_zero(self):
        classes, r, r_sp, j0 = classify_columns(np.zeros((4, 3), dtype=int))
        assert classes == ["zero"] * 3 and (r, r_sp, j0) == (0, 0, 3)

    def test_mixed_sums(self):
        delta = np.zeros((5, 3), dtype=int)
        delta[:3, 0] = 1   # sum 3 -> active
        delta[0, 1] = 1    # sum 1 -> spurious
        classes, r, r_sp, j0 = classify_columns(delta)
        assert classes == ["active", "spurious", "zero"]
        assert (r, r_sp, j0) == (1, 1, 1)

    def test_counts_match_recount(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            delta = (rng.random((6, 4)) < 0.4).astype(int)
            classes, r, r_sp, j0 = classify_columns(delta)
            sums = delta.sum(axis=0)
            assert r == int(np.sum(sums >= 2))
            assert r_sp == int(np.sum(sums == 1))
            assert j0 == int(np.sum(sums == 0))
            assert r + r_sp + j0 == 4


class TestSparsityMatrix:
    def test_pivot_bookkeeping(self):
        delta = np.array([[1, 0], [1, 1], [0, 1]])
        sm = SparsityMatrix(delta)
        assert list(sm.pivots) == [0, 1]
        assert sm.r == 2

    def test_rejects_colliding_pivots(self):
        delta = np.array([[1, 1], [1, 1], [0, 0]])
        with pytest.raises(ModelError):
            SparsityMatrix(delta)


class TestImpliedCovariance:
    def test_zero_loadings_gives_diagonal(self):
        state = make_state(np.zeros((3, 2), dtype=int), np.zeros((3, 2)),
                           [1.0, 2.0, 3.0], r=0)
        np.testing.assert_allclose(implied_covariance(state, "efa"),
                                   np.diag([1.0, 2.0, 3.0]))

    def test_single_column_arithmetic(self):
        # Lambda = (1, 2)' on two of three rows, Sigma = I
        delta = np.array([[1], [1], [0]])
        lam = np.array([[1.0], [2.0], [0.0]])
        state = make_state(delta, lam, [1.0, 1.0, 1.0])
        got = implied_covariance(state, "cfa")
        np.testing.assert_allclose(got[:2, :2], [[2.0, 2.0], [2.0, 5.0]])

    def test_efa_and_cfa_agree_after_expansion(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            state = random_state(rng)
            piv = set(state.active_pivots().tolist())
            free = [i for i in range(state.m) if i not in piv]
            l_sp = free[0]
            xi = 0.5 * np.sqrt(state.sigma2[l_sp])
            efa = expand_cfa_to_efa(state, [l_sp], [xi])
            np.testing.assert_allclose(implied_covariance(efa, "efa"),
                                       implied_covariance(efa, "cfa"),
                                       atol=1e-12)

    def test_signed_permutation_invariance(self):
        rng = np.random.default_rng(5)
        state = random_state(rng, r_sp=0)
        base = implied_covariance(state, "cfa")
        perm = rng.permutation(state.r)
        signs = rng.choice([-1.0, 1.0], size=state.r)
        other = state.copy()
        other.delta[:, :state.r] = state.delta[:, perm]
        other.lam[:, :state.r] = state.lam[:, perm] * signs
        np.testing.assert_allclose(implied_covariance(other, "cfa"), base, atol=1e-12)

    def test_nonfinite_state_rejected(self):
        state = make_state(np.zeros((3, 1), dtype=int), np.zeros((3, 1)),
                           [1.0, 1.0, 1.0], r=0)
        state.lam[0, 0] = np.inf
        with pytest.raises(ModelError):
            implied_covariance(state, "efa")


class TestExpandCollapse:
    def test_no_spurious_is_identity(self):
        rng = np.random.default_rng(11)
        state = random_state(rng, r_sp=0)
        out = expand_cfa_to_efa(state, [], [])
        np.testing.assert_array_equal(out.delta, state.delta)
        np.testing.assert_array_equal(out.lam, state.lam)

    def test_variance_split_arithmetic(self):
        # m=3, sigma2_2 = 1, Xi = 0.6 at row index 1 -> new sigma2_2 = 0.64
        delta = np.array([[1], [0], [1]])
        lam = np.array([[1.0], [0.0], [0.5]])
        state = make_state(delta, lam, [1.0, 1.0, 1.0], r=1, r_sp=1, T=4)
        state.delta = np.column_stack([state.delta, np.zeros((3, 1), dtype=np.int8)])
        state.lam = np.column_stack([state.lam, np.zeros((3, 1))])
        state.factors = np.zeros((2, 4))
        state.tau = np.full(2, 0.5)
        out = expand_cfa_to_efa(state, [1], [0.6])
        assert out.sigma2[1] == pytest.approx(0.64, abs=1e-15)
        assert out.lam[1, 1] == 0.6 and out.delta[1, 1] == 1

    def test_rejects_oversized_loading(self):
        rng = np.random.default_rng(13)
        state = random_state(rng)
        piv = set(state.active_pivots().tolist())
        l_sp = next(i for i in range(state.m) if i not in piv)
        xi = np.sqrt(state.sigma2[l_sp]) * 1.01
        with pytest.raises(ModelError):
            expand_cfa_to_efa(state, [l_sp], [xi])

    def test_roundtrip_restores_state(self):
        rng = np.random.default_rng(17)
        for _ in range(20):
            state = random_state(rng)
            piv = set(state.active_pivots().tolist())
            free = [i for i in range(state.m) if i not in piv]
            u = rng.uniform(-1, 1)
            l_sp = free[0]
            xi = u * np.sqrt(state.sigma2[l_sp])
            efa = expand_cfa_to_efa(state, [l_sp], [xi])
            back = collapse_efa_to_cfa(efa)
            np.testing.assert_array_equal(back.delta, state.delta)
            np.testing.assert_allclose(back.sigma2, state.sigma2, rtol=1e-12)
            np.testing.assert_allclose(back.lam, state.lam, rtol=1e-12)
            np.testing.assert_allclose(implied_covariance(efa, "efa"),
                                       implied_covariance(state, "cfa"), atol=1e-12)

    def test_invariants_checked(self):
        rng = np.random.default_rng(19)
        state = random_state(rng)
        state.check()
        state.sigma2[0] = -1.0
        with pytest.raises(ModelError):
            state.check()
