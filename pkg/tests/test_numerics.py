import numpy as np
import pytest

from safelmdp.numerics import (
    DegenerateAnchorError, RidgeState, SingularGramError, complement_projector,
    inv_weighted_norm, normalize, project_onto_anchor, quad_norms, ridge_solve,
    ridge_update, spd_inverse,
)


def test_normalize_examples():
    assert np.allclose(normalize([3, 4]), [0.6, 0.8])
    e = np.eye(5)[0]
    assert np.array_equal(normalize(e), e)
    with pytest.raises(DegenerateAnchorError, match="degenerate anchor"):
        normalize([0.0, 0.0])


def test_projection_examples():
    par, orth = project_onto_anchor([0.6, 0.8], [1.0, 0.0])
    assert np.allclose(par, [0.6, 0.0]) and np.allclose(orth, [0.0, 0.8])
    a = np.array([0.2, 0.5, 0.3])
    par, orth = project_onto_anchor(a, a)
    assert np.allclose(par, a) and np.allclose(orth, 0.0, atol=1e-15)
    with pytest.raises(DegenerateAnchorError):
        project_onto_anchor([1.0, 2.0], [0.0, 0.0])


def test_projection_recomposition_battery():
    rng = np.random.default_rng(0)
    for _ in range(100):
        d = rng.integers(2, 11)
        x, a = rng.standard_normal(d), rng.standard_normal(d)
        par, orth = project_onto_anchor(x, a)
        assert np.max(np.abs(par + orth - x)) <= 1e-12
        assert abs(orth @ normalize(a)) <= 1e-10
        u = normalize(a)
        assert np.linalg.norm(par - (par @ u) * u) <= 1e-10


def test_projection_stacked_rows_match_single():
    rng = np.random.default_rng(1)
    X, a = rng.standard_normal((7, 4)), rng.standard_normal(4)
    par, orth = project_onto_anchor(X, a)
    for i in range(7):
        p1, o1 = project_onto_anchor(X[i], a)
        assert np.allclose(par[i], p1) and np.allclose(orth[i], o1)
    P = complement_projector(a)
    assert np.allclose(X @ P, orth)
    assert np.allclose(P @ P, P)


def test_ridge_update_examples():
    st = RidgeState(2, lam=1.0)
    ridge_update(st, [1.0, 0.0], 2.0)
    assert np.array_equal(st.gram, np.diag([2.0, 1.0]))
    assert np.array_equal(st.target, [2.0, 0.0])

    x = np.array([0.3, -0.7])
    a, b = RidgeState(2), RidgeState(2)
    a.update(x, 1.5).update(x, 1.5)
    b.gram += 2 * np.outer(x, x)
    b.target += 3.0 * x
    assert np.allclose(a.gram, b.gram) and np.allclose(a.target, b.target)


def test_ridge_update_rejects_non_finite():
    st = RidgeState(2)
    with pytest.raises(ValueError):
        st.update([np.nan, 0.0], 1.0)
    with pytest.raises(ValueError):
        st.update([1.0, 0.0], np.inf)


def test_ridge_gram_matches_scratch():
    rng = np.random.default_rng(2)
    lam = 0.7
    st = RidgeState(6, lam)
    X = rng.standard_normal((50, 6))
    for x in X:
        st.update(x, 0.0)
    assert np.max(np.abs(st.gram - (lam * np.eye(6) + X.T @ X))) <= 1e-10


def test_ridge_solve_examples():
    st = RidgeState(3, 1.0)
    assert np.array_equal(ridge_solve(st), np.zeros(3))
    st.update([1.0, 0.0, 0.0], 4.0)
    assert np.allclose(ridge_solve(st), [2.0, 0.0, 0.0])


def test_ridge_consistency_noiseless():
    rng = np.random.default_rng(3)
    d = 6
    w_star = rng.standard_normal(d)
    X = rng.standard_normal((200, d))
    st = RidgeState(d, 1e-6).update_batch(X, X @ w_star)
    assert np.linalg.norm(ridge_solve(st) - w_star) <= 1e-3


def test_ridge_singular_gram_rejected():
    st = RidgeState(3, 1e-14)
    st.update([1.0, 0.0, 0.0], 1.0)
    with pytest.raises(SingularGramError):
        st.solve()


def test_ridge_incremental_vs_scratch_battery():
    rng = np.random.default_rng(4)
    for _ in range(100):
        d = int(rng.integers(1, 11))
        lam = float(rng.uniform(0.1, 2.0))
        n = int(rng.integers(1, 40))
        X, y = rng.standard_normal((n, d)), rng.standard_normal(n)
        st = RidgeState(d, lam)
        for i in range(n):
            st.update(X[i], y[i])
            st.solve()  # forces a factorization between updates
        ref = np.linalg.solve(lam * np.eye(d) + X.T @ X, X.T @ y)
        assert np.linalg.norm(st.solve() - ref) <= 1e-9
        batch = RidgeState(d, lam).update_batch(X, y)
        assert np.linalg.norm(batch.solve() - ref) <= 1e-9


def test_inv_weighted_norm_examples():
    st = RidgeState(2, 1.0)
    assert inv_weighted_norm(st, [1.0, 0.0]) == pytest.approx(1.0)
    assert inv_weighted_norm(st, [0.0, 0.0]) == 0.0
    st = RidgeState.from_moments(np.diag([4.0, 1.0]), np.zeros(2), 1.0)
    assert inv_weighted_norm(st, [2.0, 0.0]) == pytest.approx(1.0)


def test_inv_weighted_norm_rows_and_quad_norms():
    rng = np.random.default_rng(5)
    st = RidgeState(4, 0.5).update_batch(rng.standard_normal((10, 4)), np.zeros(10))
    Y = rng.standard_normal((6, 4))
    ref = np.sqrt(np.einsum("ij,jk,ik->i", Y, np.linalg.inv(st.gram), Y))
    assert np.allclose(st.inv_norm(Y), ref)
    assert np.allclose(quad_norms(Y, st.inverse()), ref)
    assert np.allclose(spd_inverse(st.gram), np.linalg.inv(st.gram))


def test_inv_norm_monotone_under_rank_one_battery():
    rng = np.random.default_rng(6)
    for _ in range(100):
        d = int(rng.integers(1, 9))
        st = RidgeState(d, float(rng.uniform(0.1, 2))).update_batch(rng.standard_normal((5, d)), np.zeros(5))
        Y = rng.standard_normal((5, d))
        before = st.inv_norm(Y)
        st.update(rng.standard_normal(d), 0.0)
        assert np.all(st.inv_norm(Y) <= before + 1e-10)


def test_norm_domination_battery():
    """Complement-space norm never exceeds the full-feature norm on the same stream."""
    from safelmdp.safety import SafetyState
    rng = np.random.default_rng(7)
    for _ in range(100):
        d = int(rng.integers(2, 9))
        lam = float(rng.uniform(0.1, 2))
        X = rng.standard_normal((int(rng.integers(0, 30)), d)).reshape(-1, d)
        anchor = rng.standard_normal(d)
        full = RidgeState(d, lam).update_batch(X, np.zeros(len(X))) if len(X) else RidgeState(d, lam)
        st = SafetyState.from_moments(anchor, X.T @ X, np.zeros(d), 0.5, 0.1, 1.0, lam)
        Y = rng.standard_normal((5, d))
        assert np.all(st.bonus_norm(Y) <= full.inv_norm(Y) + 1e-10)
