import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from udl.errors import ShapeError
from udl.linops import (
    ConvDictionary,
    DenseDictionary,
    RankOneConvDictionary,
    as_matrix,
    lipschitz,
    project_unit_norm,
)


def rng(seed=0):
    return np.random.default_rng(seed)


def naive_product(D, Z):
    m, n = D.shape
    T = Z.shape[1]
    out = np.zeros((m, T))
    for i in range(m):
        for j in range(T):
            s = 0.0
            for k in range(n):
                s += D[i, k] * Z[k, j]
            out[i, j] = s
    return out


def naive_rank1(u, v, z):
    """Explicit sum over atoms, channels, lags and time of the rank-1 model."""
    S, n = u.shape
    t = v.shape[0]
    L = z.shape[1]
    out = np.zeros((S, L + t - 1))
    for k in range(n):
        for s in range(S):
            for tau in range(t):
                for j in range(L):
                    out[s, j + tau] += u[s, k] * v[tau, k] * z[k, j]
    return out


class TestDense:
    def test_identity_apply(self):
        D = DenseDictionary(np.eye(2))
        np.testing.assert_array_equal(D.apply(np.array([1.5, 0.0])), [1.5, 0.0])

    def test_identity_adjoint(self):
        D = DenseDictionary(np.eye(2))
        np.testing.assert_array_equal(D.adjoint(np.array([2.0, 0.3])), [2.0, 0.3])

    def test_apply_matches_triple_loop(self):
        r = rng(1)
        D = r.standard_normal((30, 50))
        Z = r.standard_normal((50, 7)) * (r.random((50, 7)) < 0.3)
        np.testing.assert_allclose(DenseDictionary(D).apply(Z), naive_product(D, Z),
                                   rtol=0, atol=1e-12)

    def test_shape_mismatch_names_both_shapes(self):
        D = DenseDictionary(np.ones((3, 4)))
        with pytest.raises(ShapeError, match=r"\(3, 4\).*\(5,\)"):
            D.apply(np.ones(5))
        with pytest.raises(ShapeError):
            D.adjoint(np.ones(2))

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            DenseDictionary(np.array([[np.nan]]))

    def test_immutable(self):
        D = DenseDictionary(np.ones((2, 2)))
        with pytest.raises(ValueError):
            D.data[0, 0] = 3.0

    def test_adjoint_identity_random(self):
        r = rng(2)
        for _ in range(20):
            D = DenseDictionary(r.standard_normal((30, 50)))
            z, res = r.standard_normal(50), r.standard_normal(30)
            lhs = np.dot(D.apply(z), res)
            rhs = np.dot(z, D.adjoint(res))
            assert abs(lhs - rhs) <= 1e-10 * abs(lhs) + 1e-12


@settings(max_examples=40, deadline=None)
@given(m=st.integers(1, 12), n=st.integers(1, 12), T=st.integers(1, 5),
       seed=st.integers(0, 10_000))
def test_dense_adjointness_property(m, n, T, seed):
    r = rng(seed)
    D = DenseDictionary(r.standard_normal((m, n)))
    z, res = r.standard_normal((n, T)), r.standard_normal((m, T))
    gap = abs(np.vdot(D.apply(z), res) - np.vdot(z, D.adjoint(res)))
    assert gap <= 1e-10 * np.linalg.norm(z) * np.linalg.norm(res) + 1e-300


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 4), t=st.integers(1, 40), extra=st.integers(0, 20),
       batch=st.integers(1, 3), seed=st.integers(0, 10_000))
def test_conv1d_adjointness_property(n, t, extra, batch, seed):
    r = rng(seed)
    d = ConvDictionary(r.standard_normal((n, t)))
    T = t + extra
    z = r.standard_normal((batch, n, T - t + 1))
    res = r.standard_normal((batch, T))
    gap = abs(np.vdot(d.apply(z), res) - np.vdot(z, d.adjoint(res)))
    assert gap <= 1e-10 * np.linalg.norm(z) * np.linalg.norm(res)


@settings(max_examples=20, deadline=None)
@given(n=st.integers(1, 3), t=st.integers(1, 5), extra=st.integers(0, 4),
       seed=st.integers(0, 10_000))
def test_conv2d_adjointness_property(n, t, extra, seed):
    r = rng(seed)
    d = ConvDictionary(r.standard_normal((n, t, t)))
    H = t + extra
    z = r.standard_normal((n, H - t + 1, H - t + 1))
    res = r.standard_normal((H, H))
    gap = abs(np.vdot(d.apply(z), res) - np.vdot(z, d.adjoint(res)))
    assert gap <= 1e-10 * np.linalg.norm(z) * np.linalg.norm(res)


@settings(max_examples=30, deadline=None)
@given(S=st.integers(1, 5), n=st.integers(1, 4), t=st.integers(1, 10),
       extra=st.integers(0, 10), seed=st.integers(0, 10_000))
def test_rank1_adjointness_property(S, n, t, extra, seed):
    r = rng(seed)
    d = RankOneConvDictionary(r.standard_normal((S, n)), r.standard_normal((t, n)))
    T = t + extra
    z = r.standard_normal((n, T - t + 1))
    res = r.standard_normal((S, T))
    gap = abs(np.vdot(d.apply(z), res) - np.vdot(z, d.adjoint(res)))
    assert gap <= 1e-10 * np.linalg.norm(z) * np.linalg.norm(res)


class TestConvolutional:
    def test_fft_and_direct_paths_agree(self):
        r = rng(3)
        k_short = r.standard_normal((2, 32))
        k_long = np.concatenate([k_short, np.zeros((2, 1))], axis=1)  # 33 > threshold
        z = r.standard_normal((2, 100))
        res = r.standard_normal(132)
        a = ConvDictionary(k_short).apply(z)
        b = ConvDictionary(k_long).apply(np.concatenate([z, np.zeros((2, 1))], axis=1))
        np.testing.assert_allclose(b[:131], a, atol=1e-10)
        adj_long = ConvDictionary(k_long).adjoint(np.concatenate([res[:131], [0.0]]))
        np.testing.assert_allclose(adj_long[:, :100], ConvDictionary(k_short).adjoint(res[:131]),
                                   atol=1e-10)

    def test_valid_code_length(self):
        d = ConvDictionary(np.ones((3, 5)))
        assert d.code_shape((4, 20)) == (4, 3, 16)
        with pytest.raises(ShapeError):
            d.code_shape((4,))

    def test_long_kernel_matches_materialized(self):
        r = rng(4)
        d = ConvDictionary(r.standard_normal((2, 40)))
        z = r.standard_normal((2, 11))
        M = as_matrix(d, (2, 11))
        np.testing.assert_allclose(d.apply(z), M @ z.ravel(), atol=1e-10)


class TestRankOne:
    def test_impulse_response(self):
        u = np.array([[1.0], [0.0]])
        v = np.zeros((4, 1))
        v[0] = 1.0
        d = RankOneConvDictionary(u, v)
        z = np.zeros((1, 10))
        z[0, 6] = 1.0
        y = d.apply(z)
        expected = np.zeros((2, 13))
        expected[0, 6] = 1.0
        np.testing.assert_array_equal(y, expected)

    def test_apply_matches_naive_sum(self):
        r = rng(5)
        u, v = r.standard_normal((3, 2)), r.standard_normal((4, 2))
        z = r.standard_normal((2, 13))
        d = RankOneConvDictionary(u, v)
        np.testing.assert_allclose(d.apply(z), naive_rank1(u, v, z), atol=1e-12)

    def test_adjoint_matches_materialized(self):
        r = rng(6)
        S, t, n, T = 3, 4, 2, 16
        d = RankOneConvDictionary(r.standard_normal((S, n)), r.standard_normal((t, n)))
        shape = (n, T - t + 1)
        M = as_matrix(d, shape)
        res = r.standard_normal((S, T))
        np.testing.assert_allclose(d.adjoint(res).ravel(), M.T @ res.ravel(), atol=1e-12)

    def test_materialized_equivalence_small_instances(self):
        r = rng(7)
        for S in (1, 2, 4):
            for t in (1, 3, 5):
                for n in (1, 2, 3):
                    if S * t * n > 200:
                        continue
                    d = RankOneConvDictionary(r.standard_normal((S, n)),
                                              r.standard_normal((t, n)))
                    shape = (n, 7)
                    z = r.standard_normal(shape)
                    M = as_matrix(d, shape)
                    np.testing.assert_allclose(d.apply(z).ravel(), M @ z.ravel(), atol=1e-12)

    def test_atoms_have_rank_one(self):
        r = rng(8)
        d = RankOneConvDictionary(r.standard_normal((5, 3)), r.standard_normal((6, 3)))
        for atom in d.atoms():
            assert np.linalg.matrix_rank(atom.reshape(5, 6)) <= 1


class TestParamGradient:
    """``param_gradient(a, w)`` is the gradient of ``<a, D w>`` in the parameters."""

    @pytest.mark.parametrize("form", ["dense", "conv1", "conv2", "rank1"])
    def test_matches_finite_differences(self, form):
        r = rng(9)
        if form == "dense":
            d = DenseDictionary(r.standard_normal((4, 3)))
            w, a = r.standard_normal((3, 2)), r.standard_normal((4, 2))
        elif form == "conv1":
            d = ConvDictionary(r.standard_normal((2, 3)))
            w, a = r.standard_normal((2, 2, 6)), r.standard_normal((2, 8))
        elif form == "conv2":
            d = ConvDictionary(r.standard_normal((2, 2, 2)))
            w, a = r.standard_normal((2, 3, 3)), r.standard_normal((4, 4))
        else:
            d = RankOneConvDictionary(r.standard_normal((3, 2)), r.standard_normal((3, 2)))
            w, a = r.standard_normal((2, 2, 5)), r.standard_normal((2, 3, 7))
        grads = d.param_gradient(a, w)
        h = 1e-6
        for p_idx, p in enumerate(d.params):
            fd = np.zeros(p.shape)
            for idx in np.ndindex(p.shape):
                plus = [np.array(q) for q in d.params]
                minus = [np.array(q) for q in d.params]
                plus[p_idx][idx] += h
                minus[p_idx][idx] -= h
                fp = np.vdot(a, d.with_params(plus).apply(w))
                fm = np.vdot(a, d.with_params(minus).apply(w))
                fd[idx] = (fp - fm) / (2 * h)
            np.testing.assert_allclose(grads[p_idx], fd, atol=1e-7)


class TestLipschitz:
    def test_identity(self):
        est = lipschitz(DenseDictionary(np.eye(5)))
        assert est.value == pytest.approx(1.0, rel=1e-6)

    def test_scalar(self):
        assert lipschitz(DenseDictionary(np.array([[2.0]]))).value == pytest.approx(4.0, rel=1e-6)

    def test_matches_eigensolver(self):
        r = rng(10)
        D = r.standard_normal((30, 50))
        est = lipschitz(DenseDictionary(D))
        oracle = np.linalg.eigvalsh(D.T @ D)[-1]
        assert abs(est.value - oracle) <= 1e-6 * oracle * 2
        assert est.value >= oracle * (1 - 1e-6)

    def test_zero_dictionary_flagged(self):
        est = lipschitz(DenseDictionary(np.zeros((3, 4))))
        assert est.value == 0 and est.is_zero

    def test_upper_bounds_random_rayleigh_quotients(self):
        r = rng(11)
        D = DenseDictionary(r.standard_normal((20, 30)))
        est = lipschitz(D)
        zs = r.standard_normal((30, 100))
        zs /= np.linalg.norm(zs, axis=0)
        ratios = np.linalg.norm(D.adjoint(D.apply(zs)), axis=0)
        assert est.value * (1 + 1e-6) >= ratios.max()

    def test_convolutional_forms_match_materialized(self):
        r = rng(12)
        d = RankOneConvDictionary(r.standard_normal((3, 2)), r.standard_normal((5, 2)))
        shape = (2, 20)
        M = as_matrix(d, shape)
        oracle = np.linalg.eigvalsh(M.T @ M)[-1]
        est = lipschitz(d, code_shape=shape, max_iters=50_000, tol=1e-12)
        assert est.value == pytest.approx(oracle, rel=1e-6)

    def test_deterministic(self):
        d = DenseDictionary(rng(13).standard_normal((8, 9)))
        assert lipschitz(d).value == lipschitz(d).value


class TestProjection:
    def test_column(self):
        out = project_unit_norm(DenseDictionary(np.array([[3.0], [4.0]])))
        np.testing.assert_allclose(out.data[:, 0], [0.6, 0.8], rtol=1e-15)

    def test_idempotent_on_unit_columns(self):
        D = rng(14).standard_normal((6, 8))
        D /= np.linalg.norm(D, axis=0)
        out = project_unit_norm(DenseDictionary(D))
        np.testing.assert_allclose(out.data, D, atol=1e-15)

    def test_zero_column_replaced_and_reported(self):
        D = np.ones((3, 2))
        D[:, 1] = 0
        out, replaced = project_unit_norm(DenseDictionary(D), return_replaced=True)
        assert list(replaced) == [1]
        assert np.linalg.norm(out.data[:, 1]) == pytest.approx(1.0, abs=1e-12)

    def test_unit_norm_invariant(self):
        out = project_unit_norm(DenseDictionary(rng(15).standard_normal((30, 50)) * 7))
        np.testing.assert_allclose(np.linalg.norm(out.data, axis=0), 1.0, rtol=1e-12)

    def test_conv_kernels_unit_frobenius(self):
        out = project_unit_norm(ConvDictionary(rng(16).standard_normal((4, 3, 3))))
        np.testing.assert_allclose(np.linalg.norm(out.kernels.reshape(4, -1), axis=1), 1.0,
                                   rtol=1e-12)

    def test_rank1_rule(self):
        u = np.array([[2.0, 0.1], [0.0, 0.0]])
        v = np.array([[0.3, 1.0], [0.4, 0.0]])
        out = project_unit_norm(RankOneConvDictionary(u, v))
        np.testing.assert_allclose(np.linalg.norm(out.u, axis=0), 1.0)
        # atom 0: v scaled by |u| = 2 gives norm 1 exactly, not clipped
        np.testing.assert_allclose(out.v[:, 0], [0.6, 0.8])
        # atom 1: v scaled by 0.1 stays inside the ball
        np.testing.assert_allclose(out.v[:, 1], [0.1, 0.0])
        assert np.all(np.linalg.norm(out.v, axis=0) <= 1 + 1e-12)

    def test_rank1_idempotent(self):
        r = rng(17)
        once = project_unit_norm(RankOneConvDictionary(r.standard_normal((4, 3)),
                                                       r.standard_normal((5, 3))))
        twice = project_unit_norm(once)
        np.testing.assert_allclose(twice.u, once.u, atol=1e-15)
        np.testing.assert_allclose(twice.v, once.v, atol=1e-15)

    def test_feasible_point_leaves_lasso_solution_unchanged(self):
        from udl.sparse_coding import UnrollConfig, fista

        r = rng(18)
        D = r.standard_normal((10, 12))
        D /= np.linalg.norm(D, axis=0)
        y = r.standard_normal(10)
        cfg = UnrollConfig(200, 0.2, "fista")
        z1, _ = fista(DenseDictionary(D), y, cfg)
        z2, _ = fista(project_unit_norm(DenseDictionary(D)), y, cfg)
        np.testing.assert_allclose(z1, z2, atol=1e-12)
