import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from udl.datagen import gen_gaussian_dict, perturb_dict
from udl.errors import ShapeError
from udl.linops import ConvDictionary, DenseDictionary, RankOneConvDictionary
from udl.metrics import (
    INDETERMINATE,
    NO_ANGLE,
    assignment_score,
    cosine_angle,
    loss_line_scan,
    psnr,
    rank1_recovery,
    recovery_score,
    relative_angle_difference,
    shift_correlation,
    snr,
)
from udl.sparse_coding import UnrollConfig


def brute_force_score(C):
    C = np.abs(C)
    n = C.shape[0]
    if n == 0:
        return 1.0
    return max(sum(C[p[i], i] for i in range(n)) for p in itertools.permutations(range(n))) / n


class TestAssignment:
    def test_examples(self):
        assert assignment_score(np.eye(3)) == 1.0
        assert assignment_score(np.array([[0.0, -1.0], [1.0, 0.0]])) == 1.0
        assert assignment_score(np.array([[0.9, 0.1], [0.8, 0.2]])) == pytest.approx(0.55)

    def test_requires_square(self):
        with pytest.raises(ShapeError):
            assignment_score(np.ones((2, 3)))

    @settings(max_examples=200, deadline=None)
    @given(n=st.integers(1, 6), seed=st.integers(0, 100_000))
    def test_matches_brute_force(self, n, seed):
        C = np.random.default_rng(seed).uniform(-1, 1, (n, n))
        assert assignment_score(C) == pytest.approx(brute_force_score(C), abs=1e-12)


class TestRecoveryScore:
    def test_self_score_is_one(self):
        D = gen_gaussian_dict(10, 7, seed=0)
        assert recovery_score(D, D) == pytest.approx(1.0, abs=1e-12)

    @settings(max_examples=300, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_sign_and_permutation_invariance(self, seed):
        r = np.random.default_rng(seed)
        A = gen_gaussian_dict(8, 6, seed)
        B = gen_gaussian_dict(8, 6, seed + 1)
        perm = r.permutation(6)
        signs = r.choice([-1.0, 1.0], 6)
        B2 = DenseDictionary(B.data[:, perm] * signs)
        assert recovery_score(A, B2) == recovery_score(A, B)
        A2 = DenseDictionary(A.data[:, r.permutation(6)] * r.choice([-1.0, 1.0], 6))
        assert recovery_score(A2, B) == recovery_score(A, B)

    def test_in_unit_interval(self):
        for s in range(10):
            v = recovery_score(gen_gaussian_dict(5, 5, s), gen_gaussian_dict(5, 5, s + 100))
            assert 0.0 <= v <= 1.0

    def test_atom_count_mismatch(self):
        with pytest.raises(ShapeError):
            recovery_score(np.ones((3, 2)), np.ones((3, 4)))

    def test_perturbation_ordering(self):
        worse = 0
        for s in range(20):
            D = gen_gaussian_dict(30, 50, s)
            near = recovery_score(D, perturb_dict(D, 0.5, s))
            far = recovery_score(D, gen_gaussian_dict(30, 50, s + 1000))
            assert near < 1.0
            worse += near > far
        assert worse == 20

    def test_convolutional_shift_tolerance(self):
        k = np.random.default_rng(1).standard_normal((3, 12))
        rolled = np.roll(k, 4, axis=1)[[2, 0, 1]] * -1
        assert recovery_score(ConvDictionary(k), ConvDictionary(rolled)) == pytest.approx(1.0)

    def test_2d_kernels(self):
        k = np.random.default_rng(2).standard_normal((2, 5, 5))
        shifted = np.roll(k, (1, 2), axis=(1, 2))
        assert recovery_score(ConvDictionary(k), ConvDictionary(shifted)) == pytest.approx(1.0)

    def test_rank1_factors(self):
        r = np.random.default_rng(3)
        u, v = r.standard_normal((4, 3)), r.standard_normal((10, 3))
        ref = RankOneConvDictionary(u / np.linalg.norm(u, axis=0), v)
        est = RankOneConvDictionary(-ref.u[:, [1, 2, 0]], np.roll(ref.v, 3, axis=0)[:, [1, 2, 0]])
        score = rank1_recovery(est, ref)
        assert score.u == pytest.approx(1.0) and score.v == pytest.approx(1.0)
        np.testing.assert_array_equal(score.assignment, [1, 2, 0])


def test_shift_correlation_detects_circular_shift():
    a = np.zeros((1, 8))
    a[0, 1] = 1.0
    b = np.roll(a, 3, axis=1)
    assert shift_correlation(a, b)[0, 0] == pytest.approx(1.0)


class TestAngles:
    def test_cosine_examples(self):
        assert cosine_angle(np.array([1.0, 0]), np.array([2.0, 0])) == pytest.approx(1.0)
        assert cosine_angle(np.array([1.0, 0]), np.array([0, 3.0])) == pytest.approx(0.0)
        assert cosine_angle(np.zeros(2), np.ones(2)) is NO_ANGLE

    def test_relative_difference(self):
        g_ref = np.array([1.0, 0.0])
        g1 = np.array([1.0, 1.0])
        g2 = np.array([1.0, 0.1])
        c1, c2 = cosine_angle(g1, g_ref), cosine_angle(g2, g_ref)
        assert relative_angle_difference(g1, g2, g_ref) == pytest.approx((c2 - c1) / (1 - c1))
        assert relative_angle_difference(g_ref, g2, g_ref) is INDETERMINATE
        assert relative_angle_difference(np.zeros(2), g2, g_ref) is NO_ANGLE

    def test_tuple_parameters(self):
        g = (np.ones(2), np.ones(3))
        assert cosine_angle(g, g) == pytest.approx(1.0)


class TestImageMetrics:
    def test_psnr_examples(self):
        ref = np.zeros((4, 4))
        assert psnr(ref, ref) == float("inf")
        assert psnr(ref, np.full((4, 4), 0.1)) == pytest.approx(20.0)
        with pytest.raises(ShapeError):
            psnr(ref, np.zeros(3))

    def test_snr(self):
        assert snr(1.0, 0.1) == pytest.approx(10.0)
        with pytest.raises(ValueError):
            snr(1.0, 0.0)


class TestLineScan:
    def test_endpoints_and_shape(self):
        D = gen_gaussian_dict(6, 8, 0)
        B = gen_gaussian_dict(6, 8, 1)
        Y = np.random.default_rng(0).standard_normal((6, 10))
        cfg = UnrollConfig(20, 0.1)
        scan = loss_line_scan(D, B, Y, cfg, n_points=5)
        assert scan.t[0] == 0 and scan.t[-1] == 1 and len(scan.loss) == 5
        assert not scan.projected
        from udl.sparse_coding import lasso_cost, solve
        assert scan.loss[0] == pytest.approx(lasso_cost(D, solve(D, Y, cfg)[0], Y, 0.1))

    def test_validation(self):
        D = gen_gaussian_dict(3, 3, 0)
        with pytest.raises(ValueError):
            loss_line_scan(D, D, np.ones((3, 1)), UnrollConfig(2, 0.1), n_points=1)
        with pytest.raises(TypeError):
            loss_line_scan(D, ConvDictionary(np.ones((3, 2))), np.ones((3, 1)),
                           UnrollConfig(2, 0.1))
