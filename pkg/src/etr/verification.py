"""Seeded property suites that back the ``etr verify`` command.

Each suite returns a JSON-serializable report with ``passed``, the number
of checks, the failures and the worst observed errors.
"""

from __future__ import annotations

import math
import time

import numpy as np

from etr.data import gaussian_blobs
from etr.ellipsoid import (
    EllipsoidMatrix,
    GradientHistory,
    a_inv_norm,
    a_norm,
    build_ellipsoid,
    certify_uniform_equivalence,
    eigen_bounds,
    update_history,
)
from etr.firstorder import first_order_tr_step, preconditioned_step, verify_kkt
from etr.problems import MlpSpec, fd_gradient, fd_hvp, make_mlp
from etr.subproblem import QuadraticModel, cauchy_decrease, solve_exact, solve_steihaug

SUITES = ("Theorem1", "Spectrum", "Steihaug", "Derivatives")


def _random_spd(rng, d, kind):
    if kind == "uniform":
        return EllipsoidMatrix.uniform(d)
    if kind == "diag":
        return EllipsoidMatrix.diagonal(10.0 ** rng.uniform(-2, 2, d))
    M = rng.standard_normal((d, d))
    return EllipsoidMatrix.full(M @ M.T + 0.05 * np.eye(d))


class _Report:
    def __init__(self, suite):
        self.suite = suite
        self.checks = 0
        self.failures = []
        self.max_errors = {}
        self.extra = {}
        self._start = time.perf_counter()

    def error(self, name, value):
        self.max_errors[name] = max(self.max_errors.get(name, 0.0), float(value))

    def check(self, ok, detail):
        self.checks += 1
        if not ok and len(self.failures) < 20:
            self.failures.append(detail)
        elif not ok:
            self.failures.append(None)

    def finish(self):
        failed = len(self.failures)
        return {
            "suite": self.suite,
            "passed": failed == 0,
            "checks": self.checks,
            "failures": failed,
            "failure_details": [f for f in self.failures if f is not None],
            "max_errors": self.max_errors,
            "seconds": round(time.perf_counter() - self._start, 3),
            **self.extra,
        }


def theorem1_suite(instances=1000, seed=0):
    """Closed-form first-order TR step equals the preconditioned step."""
    rep = _Report("Theorem1")
    rng = np.random.default_rng(seed)
    kkt_passes = 0
    for i in range(instances):
        d = int(rng.integers(1, 11))
        A = _random_spd(rng, d, ("uniform", "diag", "full")[i % 3])
        g = rng.standard_normal(d)
        eta = 10.0 ** rng.uniform(-3, 0)
        s_pc = preconditioned_step(np.zeros(d), g, A, eta)
        s_tr = first_order_tr_step(g, A, eta * a_inv_norm(g, A))
        rel = float(np.linalg.norm(s_tr - s_pc) / np.linalg.norm(s_pc))
        rep.error("step_relative", rel)
        kkt = verify_kkt(s_pc, g, A, eta, 1e-8)
        kkt_passes += kkt
        rep.check(rel <= 1e-10 and kkt, {"instance": i, "relative_error": rel, "kkt": kkt})
    rep.extra["kkt_passes"] = kkt_passes
    return rep.finish()


def spectrum_suite(sequences=100, seed=0, epsilon=1e-8):
    """Eigenvalues of RMS ellipsoids stay inside the proven bounds."""
    rep = _Report("Spectrum")
    rng = np.random.default_rng(seed)
    for i in range(sequences):
        d = int(rng.integers(1, 21))
        t = int(rng.integers(1, 201))
        beta = float(rng.choice([0.5, 0.9, 0.99, 0.999]))
        L_H = 10.0 ** rng.uniform(-2, 3)
        h = GradientHistory("rms_full" if i % 2 else "rms_diag", d, beta=beta)
        for _ in range(t):
            g = rng.standard_normal(d)
            g *= L_H * rng.uniform() / np.linalg.norm(g)
            update_history(h, g)
        lo, hi = eigen_bounds(build_ellipsoid(h, epsilon, "one"))
        upper = (1.0 - beta ** (t + 1)) * L_H**2 + epsilon
        # eigensolver round-off scales with the largest eigenvalue
        low_violation = max(epsilon - lo, 0.0) / hi
        high_violation = max(hi - upper, 0.0) / hi
        rep.error("lower_relative", low_violation)
        rep.error("upper_relative", high_violation)
        rep.check(
            low_violation <= 1e-9 and high_violation <= 1e-9,
            {"sequence": i, "lambda_min": lo, "lambda_max": hi, "upper": upper},
        )
    valid = certify_uniform_equivalence(None, 1e6, 0.9, 10, 1e-8).valid
    invalid = not certify_uniform_equivalence(None, 2e8, 1e-300, 0, 1e-8).valid
    rep.check(valid, {"predicate": "eps=1e-8 valid at L_H^2=1e6", "valid": valid})
    rep.check(invalid, {"predicate": "eps=1e-8 invalid at L_H^2=2e8", "invalid": invalid})
    rep.extra["epsilon_valid_at_1e6"] = valid
    rep.extra["epsilon_invalid_at_2e8"] = invalid
    return rep.finish()


def steihaug_suite(instances=1000, seed=0):
    """Cauchy <= Steihaug <= exact, and all steps are feasible."""
    rep = _Report("Steihaug")
    rng = np.random.default_rng(seed)
    for i in range(instances):
        d = int(rng.integers(1, 21))
        M = rng.standard_normal((d, d))
        convex = i % 2 == 0
        B = M @ M.T + 0.01 * np.eye(d) if convex else 0.5 * (M + M.T)
        g = rng.standard_normal(d)
        A = _random_spd(rng, d, ("uniform", "diag", "full")[i % 3])
        delta = 10.0 ** rng.uniform(-2, 1)
        model = QuadraticModel.from_matrix(B, g)
        c = cauchy_decrease(model, A, delta)
        cg = solve_steihaug(model, A, delta)
        ex = solve_exact(model, A, delta)
        gap_cauchy = c - cg.model_decrease
        gap_exact = cg.model_decrease - ex.model_decrease
        infeasible = max(a_norm(cg.step, A), a_norm(ex.step, A)) / delta - 1.0
        rep.error("cauchy_over_steihaug", max(gap_cauchy, 0.0))
        rep.error("steihaug_over_exact", max(gap_exact, 0.0))
        rep.error("feasibility_relative", max(infeasible, 0.0))
        rep.check(
            gap_cauchy <= 1e-10 and gap_exact <= 1e-10 and infeasible <= 1e-9,
            {"instance": i, "cauchy": c, "steihaug": cg.model_decrease, "exact": ex.model_decrease},
        )
    return rep.finish()


def derivatives_suite(probes=20, seed=0, h=1e-5):
    """MLP gradients and Hessian-vector products against central differences."""
    rep = _Report("Derivatives")
    rng = np.random.default_rng(seed)
    ds = gaussian_blobs(10, 40, 3.0, seed, n_per_class=10)
    objectives = {
        "mlp_tanh_ce": make_mlp(MlpSpec([40, 30, 10]), ds),
        "autoencoder_bce": make_mlp(MlpSpec.autoencoder([40, 12, 4]), ds),
    }
    rep.extra["dimensions"] = {k: o.dim for k, o in objectives.items()}
    for name, obj in objectives.items():
        for p in range(probes):
            w = obj.initial_point(int(rng.integers(1 << 31))) + 0.2 * rng.standard_normal(obj.dim)
            batch = rng.choice(obj.n, size=16, replace=False)
            g = obj.grad(w, batch)
            g_err = np.abs(g - fd_gradient(obj, w, batch, h)).max() / (1.0 + np.abs(g).max())
            v = rng.standard_normal(obj.dim)
            hv = obj.hvp(w, v, batch)
            h_err = np.abs(hv - fd_hvp(obj, w, v, batch, h)).max() / (1.0 + np.abs(hv).max())
            rep.error("gradient_relative", g_err)
            rep.error("hvp_relative", h_err)
            rep.check(
                g_err < 1e-6 and h_err < 1e-5,
                {"objective": name, "probe": p, "gradient": g_err, "hvp": h_err},
            )
    return rep.finish()


_RUNNERS = {
    "Theorem1": theorem1_suite,
    "Spectrum": spectrum_suite,
    "Steihaug": steihaug_suite,
    "Derivatives": derivatives_suite,
}


def run_verification(suite, seed=0):
    """Run one named suite with a fixed seed and return its report."""
    try:
        runner = _RUNNERS[suite]
    except KeyError:
        raise ValueError(f"unknown suite {suite!r}; choose from {SUITES}") from None
    report = runner(seed=seed)
    for key, value in report["max_errors"].items():
        if not math.isfinite(value):
            report["passed"] = False
    return report
