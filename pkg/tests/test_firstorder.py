import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from etr.ellipsoid import EllipsoidMatrix, a_inv_norm, a_norm
from etr.errors import ConfigError
from etr.firstorder import (
    FirstOrderConfig,
    ZeroGradientWarning,
    first_order_run,
    first_order_tr_step,
    kkt_residuals,
    preconditioned_step,
    verify_kkt,
)
from etr.problems import QuadraticSpec, make_quadratic


def random_spd_ellipsoid(rng, d):
    kind = rng.integers(3)
    if kind == 0:
        return EllipsoidMatrix.uniform(d)
    if kind == 1:
        return EllipsoidMatrix.diagonal(10.0 ** rng.uniform(-2, 2, d))
    M = rng.standard_normal((d, d))
    return EllipsoidMatrix.full(M @ M.T + 0.05 * np.eye(d))


class TestPreconditionedStep:
    def test_identity_is_gradient_descent(self):
        g = np.array([0.3, -1.7, 2.2])
        s = preconditioned_step(np.zeros(3), g, EllipsoidMatrix.uniform(3), 0.1)
        assert np.array_equal(s, -0.1 * g)

    def test_diagonal(self):
        s = preconditioned_step(np.zeros(2), [8.0, 2.0], EllipsoidMatrix.diagonal([4, 1]), 1.0)
        assert np.array_equal(s, [-2.0, -2.0])

    def test_zero_gradient_flagged(self):
        with pytest.warns(ZeroGradientWarning):
            s = preconditioned_step(np.zeros(2), [0.0, 0.0], EllipsoidMatrix.uniform(2), 1.0)
        assert not np.any(s)

    @settings(max_examples=200, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), d=st.integers(1, 10), eta=st.floats(1e-3, 1.0))
    def test_norm_identity(self, seed, d, eta):
        rng = np.random.default_rng(seed)
        A = random_spd_ellipsoid(rng, d)
        g = rng.standard_normal(d)
        s = preconditioned_step(np.zeros(d), g, A, eta)
        assert a_norm(s, A) == pytest.approx(eta * a_inv_norm(g, A), rel=1e-10)


class TestTrustRegionStep:
    def test_unit_step(self):
        s = first_order_tr_step([3.0, 4.0], EllipsoidMatrix.uniform(2), 1.0)
        assert s == pytest.approx([-0.6, -0.8], rel=1e-15)

    def test_zero_gradient_errors(self):
        with pytest.raises(ValueError):
            first_order_tr_step([0.0, 0.0], EllipsoidMatrix.uniform(2), 1.0)

    def test_matches_preconditioned(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            d = int(rng.integers(1, 11))
            A = random_spd_ellipsoid(rng, d)
            g = rng.standard_normal(d)
            eta = 10.0 ** rng.uniform(-3, 0)
            s_tr = first_order_tr_step(g, A, eta * a_inv_norm(g, A))
            s_pc = preconditioned_step(np.zeros(d), g, A, eta)
            assert np.linalg.norm(s_tr - s_pc) <= 1e-10 * np.linalg.norm(s_pc)

    def test_monte_carlo_optimality(self):
        rng = np.random.default_rng(1)
        M = rng.standard_normal((3, 3))
        A = EllipsoidMatrix.full(M @ M.T + 0.1 * np.eye(3))
        g = rng.standard_normal(3)
        radius = 0.7
        s_star = first_order_tr_step(g, A, radius)
        # uniform samples of the A-ball: map unit-ball samples through A^{-1/2}
        u = rng.standard_normal((100_000, 3))
        u *= (rng.uniform(size=(100_000, 1)) ** (1 / 3)) / np.linalg.norm(u, axis=1, keepdims=True)
        S = np.array([A.from_sphere(radius * x) for x in u])
        assert np.all(np.sqrt(np.einsum("ij,jk,ik->i", S, A.dense(), S)) <= radius * (1 + 1e-12))
        assert g @ s_star <= (S @ g).min()

    @settings(max_examples=200, deadline=None)
    @given(
        seed=st.integers(0, 2**32 - 1),
        d=st.integers(1, 10),
        radius=st.floats(1e-3, 10.0),
        c=st.floats(1e-3, 1e3),
    )
    def test_boundary_and_scale_invariance(self, seed, d, radius, c):
        rng = np.random.default_rng(seed)
        A = random_spd_ellipsoid(rng, d)
        g = rng.standard_normal(d)
        s = first_order_tr_step(g, A, radius)
        assert a_norm(s, A) == pytest.approx(radius, rel=1e-10)
        s_scaled = first_order_tr_step(c * g, A, radius)
        assert np.allclose(s_scaled, s, rtol=1e-10, atol=1e-12 * radius)


class TestKkt:
    def test_preconditioned_step_passes(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            d = int(rng.integers(1, 11))
            A = random_spd_ellipsoid(rng, d)
            g = rng.standard_normal(d)
            eta = 10.0 ** rng.uniform(-3, 0)
            assert verify_kkt(preconditioned_step(np.zeros(d), g, A, eta), g, A, eta, 1e-8)

    def test_unpreconditioned_step_fails(self):
        A = EllipsoidMatrix.diagonal([4.0, 1.0])
        g = np.array([1.0, 1.0])
        res = kkt_residuals(-0.5 * g, g, A, 0.5)
        assert res["stationarity"] > 0.1
        assert not verify_kkt(-0.5 * g, g, A, 0.5)

    def test_interior_point_fails_slackness(self):
        rng = np.random.default_rng(3)
        A = random_spd_ellipsoid(rng, 4)
        g = rng.standard_normal(4)
        s = 0.5 * preconditioned_step(np.zeros(4), g, A, 0.3)
        res = kkt_residuals(s, g, A, 0.3)
        assert res["complementarity"] == pytest.approx(0.5)
        assert res["primal"] == 0.0
        assert not verify_kkt(s, g, A, 0.3)

    def test_infeasible_point_fails(self):
        A = EllipsoidMatrix.uniform(2)
        g = np.array([1.0, 0.0])
        assert not verify_kkt(2.0 * preconditioned_step(np.zeros(2), g, A, 0.3), g, A, 0.3)


class TestConfig:
    def test_invalid(self):
        with pytest.raises(ConfigError):
            FirstOrderConfig(method="adam")
        with pytest.raises(ConfigError):
            FirstOrderConfig(epsilon=0.0)

    def test_round_trip(self):
        cfg = FirstOrderConfig("rmsprop", eta=0.1, seed=3)
        assert FirstOrderConfig.from_dict(cfg.to_dict()) == cfg


class TestRun:
    @pytest.mark.parametrize("method", ["sgd", "adagrad", "rmsprop", "adagrad_full"])
    def test_zero_stepsize_keeps_iterate(self, method):
        obj = make_quadratic(QuadraticSpec(3, 20.0))
        w0 = obj.initial_point(0)
        run = first_order_run(obj, FirstOrderConfig(method, eta=0.0), w0=w0, max_iterations=20)
        assert np.array_equal(run.w, w0)
        assert len(run.trace) == 20

    def test_sgd_matches_hand_loop(self):
        obj = make_quadratic(QuadraticSpec(2, 20.0))
        w = obj.initial_point(4)
        run = first_order_run(obj, FirstOrderConfig("sgd", eta=0.04), w0=w, max_iterations=30)
        for _ in range(30):
            w = w - 0.04 * obj.grad(w)
        assert np.array_equal(run.w, w)

    def test_adagrad_matches_hand_loop(self):
        obj = make_quadratic(QuadraticSpec(2, 20.0))
        w = obj.initial_point(5)
        cfg = FirstOrderConfig("adagrad", eta=0.3)
        run = first_order_run(obj, cfg, w0=w, max_iterations=30)
        acc = np.zeros(2)
        for _ in range(30):
            g = obj.grad(w)
            acc += g * g
            w = w - 0.3 * g / np.sqrt(acc + cfg.epsilon)
        assert np.allclose(run.w, w, rtol=1e-14, atol=0)

    def test_kappa_one_gradient_descent_one_step(self):
        obj = make_quadratic(QuadraticSpec(4, 1.0))
        run = first_order_run(obj, FirstOrderConfig("sgd", eta=1.0), max_iterations=1)
        assert np.allclose(run.w, obj.optimum, atol=1e-15)

    def test_trace_schema(self):
        obj = make_quadratic(QuadraticSpec(2, 2.0))
        run = first_order_run(obj, FirstOrderConfig("rmsprop", eta=0.1), max_iterations=5)
        rec = run.trace[-1]
        assert rec.backprops == 5 and rec.epoch_fraction == 5.0
        assert np.isnan(rec.rho) and rec.delta == 0.1 and rec.termination == "FirstOrder"

    def test_budget(self):
        obj = make_quadratic(QuadraticSpec(2, 2.0))
        run = first_order_run(obj, FirstOrderConfig(), backprop_budget=7)
        assert len(run.trace) == 7 and run.stop_reason == "backprop_budget"

    def test_non_finite_aborts(self):
        obj = make_quadratic(QuadraticSpec(2, 20.0))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            run = first_order_run(obj, FirstOrderConfig("sgd", eta=1e3), max_iterations=500)
        assert run.stop_reason == "non_finite"
        assert run.trace[-1].termination == "NonFiniteLoss"

    def test_full_matrix_beats_diagonal_on_rotated_problem(self):
        obj = make_quadratic(QuadraticSpec(2, 20.0, rotation="random", rotation_seed=1))
        final = {}
        for method in ("adagrad", "adagrad_full"):
            losses = []
            for seed in range(10):
                run = first_order_run(
                    obj, FirstOrderConfig(method, eta=0.3, seed=seed), max_iterations=60
                )
                losses.append(obj.loss(run.w))
            final[method] = np.median(losses)
        assert final["adagrad_full"] < final["adagrad"]
