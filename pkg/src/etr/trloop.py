"""Stochastic ellipsoidal trust-region method.

Each iteration samples independent loss, gradient and Hessian batches,
folds the gradient into the adaptive history, builds the ellipsoid, solves
the subproblem with truncated CG, and accepts or rejects the step from the
actual-over-predicted decrease measured on the loss batch.

Cost accounting (backprop-equivalents): a gradient on ``b`` samples costs
``b``, a Hessian-vector product on ``b`` samples costs ``2b``, and loss
evaluations are forward passes tracked separately.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from etr.data import BatchSampler
from etr.ellipsoid import (
    EllipsoidMatrix,
    GradientHistory,
    build_ellipsoid,
    certify_uniform_equivalence,
    update_history,
)
from etr.errors import ConfigError, DegenerateModelError
from etr.subproblem import BOUNDARY, QuadraticModel, SubproblemResult, solve_steihaug

logger = logging.getLogger(__name__)

ELLIPSOID_MODES = ("uniform", "ada_diag", "rms_diag", "rms_full", "ada_full")

VERY_SUCCESSFUL = "VerySuccessful"
SUCCESSFUL = "Successful"
UNSUCCESSFUL = "Unsuccessful"

TRACE_HEADER = [
    "iteration",
    "epoch_fraction",
    "backprops",
    "loss_batch",
    "grad_norm",
    "delta",
    "rho",
    "accepted",
    "outcome",
    "cg_iterations",
    "termination",
]

ACCOUNTING = (
    "backprops: gradient on b samples = b; Hessian-vector product on b samples = 2b; "
    "loss evaluations are forward passes (0 backprops). epoch_fraction: cumulative "
    "gradient-batch samples / n."
)


@dataclass
class TRConfig:
    """Trust-region settings; defaults follow the published parameter table.

    ``gamma2`` defaults to 1.75 for RMS ellipsoids and 1.5 otherwise.
    ``model_order=1`` replaces the quadratic model by the linear one, whose
    constrained minimizer has a closed form; no Hessian products are used.
    """

    delta0: float = 1e-4
    delta_max: float = 10.0
    eta1: float = 1e-4
    eta2: float = 0.95
    gamma1: float = 1.1
    gamma2: float | None = None
    kappa_K: float = 0.1
    batch_loss: int = 512
    batch_grad: int = 512
    batch_hess: int = 512
    ellipsoid_mode: str = "uniform"
    beta: float = 0.9
    epsilon: float = 1e-8
    exponent: str = "half"
    max_iterations: int = 1000
    max_cg_iterations: int | None = None
    model_order: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.gamma2 is None:
            self.gamma2 = 1.75 if self.ellipsoid_mode.startswith("rms") else 1.5
        bad = {}
        if self.ellipsoid_mode not in ELLIPSOID_MODES:
            bad["ellipsoid_mode"] = f"must be one of {ELLIPSOID_MODES}"
        if not 0 < self.eta1 < self.eta2 < 1:
            bad["eta1/eta2"] = "need 0 < eta1 < eta2 < 1"
        if not self.gamma1 > 1:
            bad["gamma1"] = "must exceed 1"
        if not self.gamma2 > 1:
            bad["gamma2"] = "must exceed 1"
        if not 0 < self.delta0 <= self.delta_max:
            bad["delta0/delta_max"] = "need 0 < delta0 <= delta_max"
        if not 0 < self.kappa_K < 1:
            bad["kappa_K"] = "must lie in (0, 1)"
        if not 0 < self.beta < 1:
            bad["beta"] = "must lie in (0, 1)"
        if not self.epsilon > 0:
            bad["epsilon"] = "must be positive"
        if self.exponent not in ("half", "one"):
            bad["exponent"] = "must be 'half' or 'one'"
        for name in ("batch_loss", "batch_grad", "batch_hess"):
            if getattr(self, name) < 1:
                bad[name] = "must be a positive count"
        if self.model_order not in (1, 2):
            bad["model_order"] = "must be 1 (linear model) or 2 (quadratic model)"
        if self.max_iterations < 0:
            bad["max_iterations"] = "must be nonnegative"
        if bad:
            raise ConfigError(bad)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError({k: "unknown TRConfig field" for k in unknown})
        return cls(**data)


@dataclass
class TRState:
    w: np.ndarray
    delta: float
    history: GradientHistory | None
    iteration: int = 0
    backprop_count: int = 0
    forward_passes: int = 0
    samples_seen: int = 0
    max_grad_norm_sq: float = 0.0


@dataclass
class IterationRecord:
    iteration: int
    epoch_fraction: float
    backprops: int
    loss_batch: float
    grad_norm: float
    delta: float
    rho: float
    accepted: bool
    outcome: str
    cg_iterations: int
    termination: str

    def to_row(self):
        row = []
        for name in TRACE_HEADER:
            value = getattr(self, name)
            if isinstance(value, bool):
                value = "true" if value else "false"
            elif isinstance(value, float):
                value = repr(value)
            row.append(value)
        return row


@dataclass
class TRRun:
    """Result of :func:`tr_minimize`; unpacks as ``w, trace``."""

    w: np.ndarray
    trace: list[IterationRecord]
    state: TRState
    certificate: object = None
    stop_reason: str = ""
    ellipsoid: EllipsoidMatrix | None = field(default=None, repr=False)

    def __iter__(self):
        return iter((self.w, self.trace))


def rho_guard(loss_before):
    return 1e-14 * (1.0 + abs(loss_before))


def compute_rho(loss_before, loss_after, model_decrease):
    """Actual over predicted decrease; both losses on the same batch."""
    if not model_decrease > rho_guard(loss_before):
        raise DegenerateModelError(
            f"predicted decrease {model_decrease:.3e} is below the guard "
            f"{rho_guard(loss_before):.3e}"
        )
    return (loss_before - loss_after) / model_decrease


def classify(rho, cfg):
    if rho > cfg.eta2:
        return VERY_SUCCESSFUL
    if rho >= cfg.eta1:
        return SUCCESSFUL
    return UNSUCCESSFUL


def update_radius(delta, rho, cfg):
    if not delta > 0:
        raise ValueError("radius must be positive")
    if rho > cfg.eta2:
        return min(cfg.gamma1 * delta, cfg.delta_max)
    if rho >= cfg.eta1:
        return delta
    return delta / cfg.gamma2


def accept_step(w, s, rho, eta1):
    w = np.asarray(w, dtype=float)
    s = np.asarray(s, dtype=float)
    if w.shape != s.shape:
        raise ValueError("iterate and step dimensions differ")
    return w + s if rho >= eta1 else w


def make_history(cfg, dim):
    if cfg.ellipsoid_mode == "uniform":
        return None
    return GradientHistory(cfg.ellipsoid_mode, dim, beta=cfg.beta)


def current_ellipsoid(history, cfg, dim):
    if history is None:
        return EllipsoidMatrix.uniform(dim)
    return build_ellipsoid(history, cfg.epsilon, cfg.exponent)


def make_samplers(cfg, n):
    seqs = np.random.SeedSequence(cfg.seed).spawn(3)
    sizes = (cfg.batch_loss, cfg.batch_grad, cfg.batch_hess)
    return [BatchSampler(n, b, np.random.default_rng(s)) for b, s in zip(sizes, seqs)]


def hessian_operator(objective, w, batch):
    op = getattr(objective, "hessian_operator", None)
    if op is not None:
        return op(w, batch)
    return lambda v: objective.hvp(w, v, batch)


def tr_minimize(
    objective,
    cfg,
    w0=None,
    max_iterations=None,
    grad_tol=0.0,
    backprop_budget=math.inf,
    callback=None,
):
    """Run the stochastic ellipsoidal trust-region method.

    Stops after ``max_iterations`` (default ``cfg.max_iterations``), once
    the sampled gradient norm is ``<= grad_tol``, or once the cumulative
    backprop count reaches ``backprop_budget``.  ``callback(state, record)``
    is invoked after each iteration; a truthy return value stops the run.
    """
    if max_iterations is None:
        max_iterations = cfg.max_iterations
    d = objective.dim
    w = np.array(objective.initial_point(cfg.seed) if w0 is None else w0, dtype=float)
    if w.shape != (d,):
        raise ValueError(f"initial point must have length {d}")
    n = max(int(objective.n), 1)
    loss_sampler, grad_sampler, hess_sampler = make_samplers(cfg, n)
    state = TRState(w=w, delta=cfg.delta0, history=make_history(cfg, d))
    trace = []
    stop_reason = "max_iterations"
    A = None

    while True:
        if state.iteration >= max_iterations:
            break
        if state.backprop_count >= backprop_budget:
            stop_reason = "backprop_budget"
            break
        s_loss = loss_sampler.next_batch()
        s_grad = grad_sampler.next_batch()
        s_hess = hess_sampler.next_batch()

        g = objective.grad(state.w, s_grad)
        state.backprop_count += len(s_grad)
        state.samples_seen += len(s_grad)
        grad_norm = float(np.linalg.norm(g))
        if not math.isfinite(grad_norm):
            trace.append(_abort_record(state, n, grad_norm, "NonFiniteGradient"))
            stop_reason = "non_finite"
            logger.warning("non-finite gradient at iteration %d", state.iteration)
            break
        state.max_grad_norm_sq = max(state.max_grad_norm_sq, grad_norm * grad_norm)
        if grad_norm <= grad_tol:
            stop_reason = "grad_tol"
            break

        if state.history is not None:
            update_history(state.history, g)
        A = current_ellipsoid(state.history, cfg, d)

        loss_before = objective.loss(state.w, s_loss)
        state.forward_passes += len(s_loss)
        if not math.isfinite(loss_before):
            trace.append(_abort_record(state, n, grad_norm, "NonFiniteLoss"))
            stop_reason = "non_finite"
            logger.warning("non-finite loss at iteration %d", state.iteration)
            break

        if cfg.model_order == 1:
            result = _linear_model_step(g, A, state.delta)
        else:
            model = QuadraticModel(
                g=g, hvp=hessian_operator(objective, state.w, s_hess), f0=loss_before
            )
            result = solve_steihaug(model, A, state.delta, cfg.kappa_K, cfg.max_cg_iterations)
            state.backprop_count += 2 * len(s_hess) * result.cg_iterations

        try:
            if not result.model_decrease > rho_guard(loss_before):
                raise DegenerateModelError("vanishing predicted decrease")
            w_trial = state.w + result.step
            loss_after = objective.loss(w_trial, s_loss)
            state.forward_passes += len(s_loss)
            rho = compute_rho(loss_before, loss_after, result.model_decrease)
        except DegenerateModelError:
            rho = -math.inf
        if math.isnan(rho):
            trace.append(_abort_record(state, n, grad_norm, "NonFiniteLoss", loss_before))
            stop_reason = "non_finite"
            logger.warning("non-finite trial loss at iteration %d", state.iteration)
            break

        outcome = classify(rho, cfg)
        accepted = rho >= cfg.eta1
        record = IterationRecord(
            iteration=state.iteration,
            epoch_fraction=state.samples_seen / n,
            backprops=state.backprop_count,
            loss_batch=loss_before,
            grad_norm=grad_norm,
            delta=state.delta,
            rho=rho,
            accepted=accepted,
            outcome=outcome,
            cg_iterations=result.cg_iterations,
            termination=result.termination,
        )
        if accepted:
            state.w = w_trial
        state.delta = update_radius(state.delta, rho, cfg)
        state.iteration += 1
        trace.append(record)
        if callback is not None and callback(state, record):
            stop_reason = "callback"
            break

    certificate = None
    if cfg.ellipsoid_mode.startswith("rms") and state.history is not None:
        certificate = certify_uniform_equivalence(
            A,
            max(state.max_grad_norm_sq, np.finfo(float).tiny),
            cfg.beta,
            state.history.step_count,
            cfg.epsilon,
            cfg.exponent,
        )
    return TRRun(state.w, trace, state, certificate, stop_reason, A)


def _linear_model_step(g, A, delta):
    from etr.firstorder import first_order_tr_step

    step = first_order_tr_step(g, A, delta)
    return SubproblemResult(step, -float(g @ step), True, BOUNDARY, 0)


def _abort_record(state, n, grad_norm, reason, loss=math.nan):
    return IterationRecord(
        iteration=state.iteration,
        epoch_fraction=state.samples_seen / n,
        backprops=state.backprop_count,
        loss_batch=loss,
        grad_norm=grad_norm,
        delta=state.delta,
        rho=math.nan,
        accepted=False,
        outcome=UNSUCCESSFUL,
        cg_iterations=0,
        termination=reason,
    )


def _atomic_write_text(path, text):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as f:
        f.write(text)
    os.replace(tmp, path)


def trace_to_csv_text(trace):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TRACE_HEADER)
    for rec in trace:
        writer.writerow(rec.to_row())
    return buf.getvalue()


def write_trace_csv(path, trace):
    _atomic_write_text(path, trace_to_csv_text(trace))


def read_trace_csv(path):
    records = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != TRACE_HEADER:
            raise ValueError(f"unexpected trace header {reader.fieldnames}")
        for row in reader:
            records.append(
                IterationRecord(
                    iteration=int(row["iteration"]),
                    epoch_fraction=float(row["epoch_fraction"]),
                    backprops=int(row["backprops"]),
                    loss_batch=float(row["loss_batch"]),
                    grad_norm=float(row["grad_norm"]),
                    delta=float(row["delta"]),
                    rho=float(row["rho"]),
                    accepted=row["accepted"] == "true",
                    outcome=row["outcome"],
                    cg_iterations=int(row["cg_iterations"]),
                    termination=row["termination"],
                )
            )
    return records


def write_metadata(path, payload):
    _atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")
