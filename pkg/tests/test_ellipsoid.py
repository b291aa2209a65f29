import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from etr.ellipsoid import (
    EllipsoidMatrix,
    GradientHistory,
    a_inv_norm,
    a_norm,
    build_ellipsoid,
    certify_uniform_equivalence,
    eigen_bounds,
    epsilon_upper_limit,
    update_history,
)
from etr.errors import NumericalError


def random_spd(rng, d, floor=0.1):
    m = rng.standard_normal((d, d))
    return m @ m.T + floor * np.eye(d)


class TestNorms:
    def test_identity_norm_is_euclidean(self):
        A = EllipsoidMatrix.uniform(2)
        assert a_norm([3, 4], A) == 5.0
        assert a_inv_norm([3, 4], A) == 5.0

    def test_diagonal_norm(self):
        # direct evaluation: w^T A w = 2*1 + 5*1
        assert a_norm([1, -1], EllipsoidMatrix.diagonal([2, 5])) == pytest.approx(
            2.6457513, abs=1e-7
        )

    def test_axis_intercepts(self):
        # A = diag(1/a) meets axis i at sqrt(a_i) * delta
        a = np.array([4.0, 9.0])
        A = EllipsoidMatrix.diagonal(1.0 / a)
        delta = 2.0
        assert a_norm([4.0, 0.0], A) == pytest.approx(delta)
        assert a_norm([0.0, 6.0], A) == pytest.approx(delta)

    def test_inverse_norm_diagonal(self):
        assert a_inv_norm([2, 0], EllipsoidMatrix.diagonal([4, 4])) == pytest.approx(1.0)

    def test_inverse_norm_full_matches_explicit_inverse(self):
        M = np.array([[2.0, 1.0], [1.0, 2.0]])
        # 2x2 inverse by the adjugate formula
        det = M[0, 0] * M[1, 1] - M[0, 1] * M[1, 0]
        inv = np.array([[M[1, 1], -M[0, 1]], [-M[1, 0], M[0, 0]]]) / det
        w = np.array([1.0, 1.0])
        expected = math.sqrt(w @ inv @ w)
        assert expected == pytest.approx(0.8164966, abs=1e-7)
        assert a_inv_norm(w, EllipsoidMatrix.full(M)) == pytest.approx(expected, rel=1e-14)

    def test_zero_vector_has_zero_norm(self):
        A = EllipsoidMatrix.full(random_spd(np.random.default_rng(0), 4))
        assert a_norm(np.zeros(4), A) == 0.0

    @pytest.mark.parametrize("fn", [a_norm, a_inv_norm])
    def test_dimension_mismatch(self, fn):
        with pytest.raises(ValueError):
            fn([1.0, 2.0, 3.0], EllipsoidMatrix.uniform(2))

    def test_cholesky_failure_is_numeric_error(self):
        A = EllipsoidMatrix.full(np.eye(2))
        object.__setattr__(A, "matrix", np.array([[1.0, 2.0], [2.0, 1.0]]))
        with pytest.raises(NumericalError):
            a_inv_norm([1.0, 0.0], A)


class TestEllipsoidMatrix:
    def test_rejects_nonpositive_diagonal(self):
        with pytest.raises(ValueError):
            EllipsoidMatrix.diagonal([1.0, 0.0])

    def test_rejects_entries_below_floor(self):
        with pytest.raises(ValueError):
            EllipsoidMatrix.diagonal([0.5, 2.0], epsilon=1.0)

    def test_rejects_asymmetric(self):
        with pytest.raises(ValueError):
            EllipsoidMatrix.full([[2.0, 1.0], [0.0, 2.0]])

    def test_rejects_indefinite(self):
        with pytest.raises(ValueError):
            EllipsoidMatrix.full([[1.0, 2.0], [2.0, 1.0]])

    def test_full_size_limit(self):
        with pytest.raises(ValueError):
            EllipsoidMatrix.full(np.eye(513))

    def test_uniform_matches_unit_diagonal(self):
        rng = np.random.default_rng(1)
        U, D = EllipsoidMatrix.uniform(5), EllipsoidMatrix.diagonal(np.ones(5))
        for _ in range(10):
            w = rng.standard_normal(5)
            assert a_norm(w, U) == a_norm(w, D)
            assert np.array_equal(U.solve(w), D.solve(w))
            assert np.array_equal(U.whiten(w), D.whiten(w))

    @pytest.mark.parametrize("shape", ["uniform", "diag", "full"])
    def test_sphere_maps(self, shape):
        rng = np.random.default_rng(2)
        d = 4
        A = {
            "uniform": EllipsoidMatrix.uniform(d),
            "diag": EllipsoidMatrix.diagonal(rng.uniform(0.5, 3.0, d)),
            "full": EllipsoidMatrix.full(random_spd(rng, d)),
        }[shape]
        s = rng.standard_normal(d)
        g = rng.standard_normal(d)
        assert np.linalg.norm(A.to_sphere(s)) == pytest.approx(a_norm(s, A), rel=1e-12)
        assert np.allclose(A.from_sphere(A.to_sphere(s)), s, rtol=1e-12, atol=1e-12)
        assert np.linalg.norm(A.whiten(g)) == pytest.approx(a_inv_norm(g, A), rel=1e-12)

    @pytest.mark.parametrize(
        "A",
        [
            EllipsoidMatrix.uniform(3),
            EllipsoidMatrix.diagonal([0.5, 2.0, 1.0], epsilon=0.25),
            EllipsoidMatrix.full([[2.0, 1.0], [1.0, 2.0]], epsilon=0.5),
        ],
    )
    def test_json_round_trip(self, A):
        doc = json.loads(json.dumps(A.to_dict()))
        assert doc["shape"] == A.shape
        B = EllipsoidMatrix.from_dict(doc)
        assert B.shape == A.shape and B.epsilon == A.epsilon
        assert np.array_equal(B.dense(), A.dense())

    def test_json_layout(self):
        assert EllipsoidMatrix.diagonal([1.0, 2.0], 0.5).to_dict() == {
            "shape": "diag",
            "epsilon": 0.5,
            "entries": [1.0, 2.0],
        }
        assert "matrix" in EllipsoidMatrix.full(np.eye(2)).to_dict()


class TestEigenBounds:
    def test_diagonal(self):
        assert eigen_bounds(EllipsoidMatrix.diagonal([0.5, 2, 1])) == (0.5, 2.0)

    def test_identity(self):
        assert eigen_bounds(EllipsoidMatrix.uniform(3)) == (1.0, 1.0)

    def test_full_against_characteristic_polynomial(self):
        a, b, c = 2.0, 1.0, 2.0
        # roots of x^2 - (a+c) x + (ac - b^2)
        tr, det = a + c, a * c - b * b
        disc = math.sqrt(tr * tr - 4 * det)
        lo, hi = (tr - disc) / 2, (tr + disc) / 2
        assert (lo, hi) == (1.0, 3.0)
        got = eigen_bounds(EllipsoidMatrix.full([[a, b], [b, c]]))
        assert got == pytest.approx((lo, hi), rel=1e-14)


class TestHistory:
    def test_rms_diag_update(self):
        h = GradientHistory("rms_diag", 2, beta=0.9)
        update_history(h, [1.0, 2.0])
        assert h.accumulator == pytest.approx([0.1, 0.4], rel=1e-15)
        assert h.step_count == 1

    def test_ada_zero_gradient_is_noop(self):
        h = GradientHistory("ada_diag", 2, accumulator=np.ones(2))
        update_history(h, [0.0, 0.0])
        assert np.array_equal(h.accumulator, [1.0, 1.0])

    def test_rms_full_matches_batched_form(self):
        beta = 0.5
        h = GradientHistory("rms_full", 2, beta=beta)
        g1, g2 = np.array([1.0, 0.0]), np.array([0.0, 1.0])
        update_history(h, g1)
        update_history(h, g2)
        G = np.column_stack([g1, g2])
        batched = (1 - beta) * G @ np.diag([beta**1, beta**0]) @ G.T
        assert np.allclose(batched, [[0.25, 0.0], [0.0, 0.5]])
        assert np.allclose(h.accumulator, batched, rtol=0, atol=1e-16)

    @pytest.mark.parametrize("t", [1, 7, 50])
    def test_recursive_equals_batched(self, t):
        rng = np.random.default_rng(t)
        d, beta = 6, 0.8
        G = rng.standard_normal((d, t))
        full = GradientHistory("rms_full", d, beta=beta)
        diag = GradientHistory("rms_diag", d, beta=beta)
        for i in range(t):
            update_history(full, G[:, i])
            update_history(diag, G[:, i])
        weights = beta ** np.arange(t - 1, -1, -1)
        batched = (1 - beta) * (G * weights) @ G.T
        scale = np.abs(batched).max()
        assert np.abs(full.accumulator - batched).max() <= 1e-10 * scale
        assert np.abs(diag.accumulator - np.diag(batched)).max() <= 1e-10 * scale

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            update_history(GradientHistory("ada_diag", 3), [1.0, 2.0])

    def test_invalid_beta(self):
        with pytest.raises(ValueError):
            GradientHistory("rms_diag", 3, beta=1.0)

    def test_adagrad_lambda_max_nondecreasing(self):
        rng = np.random.default_rng(3)
        for mode in ("ada_diag", "ada_full"):
            h = GradientHistory(mode, 5)
            prev = -math.inf
            for _ in range(100):
                update_history(h, rng.standard_normal(5))
                hi = eigen_bounds(build_ellipsoid(h, 1e-8, "one"))[1]
                assert hi >= prev
                prev = hi


class TestBuild:
    def test_empty_history(self):
        A = build_ellipsoid(GradientHistory("rms_diag", 3), 1e-8, "one")
        assert np.array_equal(A.dense(), 1e-8 * np.eye(3))

    def test_square_root_entries(self):
        h = GradientHistory("rms_diag", 2, accumulator=np.array([0.1, 0.4]))
        A = build_ellipsoid(h, 0.0, "half")
        assert A.entries == pytest.approx([0.3162278, 0.6324555], abs=1e-7)

    @pytest.mark.parametrize("mode", ["rms_diag", "rms_full", "ada_diag", "ada_full"])
    @pytest.mark.parametrize("exponent", ["one", "half"])
    def test_floor(self, mode, exponent):
        rng = np.random.default_rng(4)
        h = GradientHistory(mode, 6)
        for _ in range(20):
            update_history(h, rng.standard_normal(6) * 10.0 ** rng.uniform(-3, 3))
        eps = 1e-8
        A = build_ellipsoid(h, eps, exponent)
        lo, hi = eigen_bounds(A)
        floor = eps if exponent == "one" else math.sqrt(eps)
        assert lo >= floor - 1e-12 * max(1.0, hi)

    def test_half_is_matrix_square_root(self):
        rng = np.random.default_rng(5)
        h = GradientHistory("rms_full", 4)
        for _ in range(10):
            update_history(h, rng.standard_normal(4))
        one = build_ellipsoid(h, 1e-3, "one").dense()
        half = build_ellipsoid(h, 1e-3, "half").dense()
        assert np.allclose(half @ half, one, rtol=1e-10, atol=1e-12)


class TestCertificate:
    def test_typical_epsilon_valid(self):
        for beta, t in [(0.9, 10), (0.999, 1000), (0.5, 0)]:
            assert certify_uniform_equivalence(None, 1e6, beta, t, 1e-8).valid

    def test_typical_epsilon_invalid_for_large_gradients(self):
        cert = certify_uniform_equivalence(None, 2e8, 1e-300, 0, 1e-8)
        assert not cert.valid

    def test_boundary_root(self):
        L2 = 3.0
        eps = 0.5 * (math.sqrt(L2 * L2 + 4) - L2)
        assert eps == pytest.approx(epsilon_upper_limit(L2), rel=1e-14)
        assert eps * eps + L2 * eps - 1 == pytest.approx(0.0, abs=1e-15)
        assert certify_uniform_equivalence(None, L2, 0.0, 0, eps).valid

    def test_default_epsilon_threshold(self):
        # epsilon = 1e-8 stays valid up to L_H^2 just below 1e8
        assert epsilon_upper_limit(9.9e7) > 1e-8

    def test_bounds_and_constants(self):
        cert = certify_uniform_equivalence(None, 4.0, 0.5, 1, 0.01)
        assert cert.lambda_min_bound == 0.01
        assert cert.lambda_max_bound == pytest.approx((1 - 0.25) * 4.0 + 0.01)
        assert cert.zeta == pytest.approx(100.0)
        assert cert.mu == pytest.approx(10.0)
        assert cert.valid
        # valid certificates satisfy the spectral sandwich with zeta = 1/eps
        assert cert.lambda_min_bound >= 1 / cert.zeta and cert.lambda_max_bound <= cert.zeta

    def test_half_exponent_bounds(self):
        cert = certify_uniform_equivalence(None, 4.0, 0.5, 1, 0.01, exponent="half")
        assert cert.lambda_min_bound == pytest.approx(0.1)
        assert cert.lambda_max_bound == pytest.approx(math.sqrt(3.01))

    def test_actual_matrix_outside_bounds_invalidates(self):
        A = EllipsoidMatrix.diagonal([1e-2, 100.0])
        assert not certify_uniform_equivalence(A, 1.0, 0.9, 5, 1e-2).valid

    def test_norm_sandwich(self):
        rng = np.random.default_rng(6)
        d, beta, eps = 8, 0.9, 1e-3
        h = GradientHistory("rms_full", d, beta=beta)
        L2 = 0.0
        for _ in range(30):
            g = rng.standard_normal(d)
            L2 = max(L2, g @ g)
            update_history(h, g)
        A = build_ellipsoid(h, eps, "one")
        cert = certify_uniform_equivalence(A, L2, beta, h.step_count, eps)
        assert cert.valid
        for _ in range(1000):
            w = rng.standard_normal(d) * 10.0 ** rng.uniform(-3, 3)
            an, n2 = a_norm(w, A), np.linalg.norm(w)
            assert an / cert.mu <= n2 * (1 + 1e-9)
            assert n2 <= cert.mu * an * (1 + 1e-9)


@pytest.mark.parametrize("beta", [0.5, 0.9, 0.999])
def test_geometric_series_identity(beta):
    for t in (0, 1, 10, 100, 1000):
        direct = math.fsum(beta**i for i in range(t + 1))
        assert direct == pytest.approx((1 - beta ** (t + 1)) / (1 - beta), rel=1e-12)


@settings(max_examples=100, deadline=None)
@given(
    seed=st.integers(0, 2**32 - 1),
    d=st.integers(1, 20),
    t=st.integers(1, 200),
    beta=st.sampled_from([0.5, 0.9, 0.99]),
    full=st.booleans(),
)
def test_rms_spectrum_within_bounds(seed, d, t, beta, full):
    rng = np.random.default_rng(seed)
    L_H = 10.0 ** rng.uniform(-2, 3)
    eps = 1e-8
    h = GradientHistory("rms_full" if full else "rms_diag", d, beta=beta)
    for _ in range(t):
        g = rng.standard_normal(d)
        g *= L_H * rng.uniform() / np.linalg.norm(g)
        update_history(h, g)
    lo, hi = eigen_bounds(build_ellipsoid(h, eps, "one"))
    assert lo >= eps - 1e-12 * max(1.0, hi)
    assert hi <= (1 - beta ** (t + 1)) * L_H**2 + eps + 1e-9 * hi
