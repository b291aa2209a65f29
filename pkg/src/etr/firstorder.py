"""First-order methods and their trust-region interpretation.

A preconditioned gradient step ``s = -eta A^{-1} g`` is exactly the
minimizer of the linear model ``g^T s`` over the ellipsoid
``||s||_A <= eta ||g||_{A^{-1}}``.  :func:`first_order_tr_step` computes
that minimizer for any radius and :func:`verify_kkt` checks optimality.

The baselines in :func:`first_order_run` use the adaptive-gradient update
``w <- w - eta Ahat^{-1/2} g``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy import linalg

from etr.data import BatchSampler
from etr.ellipsoid import a_inv_norm, a_norm
from etr.errors import ConfigError
from etr.trloop import SUCCESSFUL, UNSUCCESSFUL, IterationRecord

METHODS = ("sgd", "adagrad", "rmsprop", "adagrad_full")


class ZeroGradientWarning(RuntimeWarning):
    """The gradient vanished, so the step is zero and the TR view is vacuous."""


def preconditioned_step(w, g, A, eta):
    """Return ``-eta A^{-1} g``.

    ``w`` only fixes the dimension.  A zero gradient gives the zero step and
    a :class:`ZeroGradientWarning`.
    """
    g = np.asarray(g, dtype=float)
    if np.shape(w) != g.shape:
        raise ValueError("iterate and gradient dimensions differ")
    if not np.any(g):
        warnings.warn("zero gradient: preconditioned step is zero", ZeroGradientWarning, stacklevel=2)
        return np.zeros_like(g)
    return -eta * A.solve(g)


def first_order_tr_step(g, A, radius):
    """Minimize ``g^T s`` subject to ``||s||_A <= radius``.

    The minimizer sits on the boundary:
    ``s* = -(radius / ||g||_{A^{-1}}) A^{-1} g``.
    """
    g = np.asarray(g, dtype=float)
    if not radius > 0:
        raise ValueError("radius must be positive")
    if not np.any(g):
        raise ValueError("a linear model with zero gradient has no unique minimizer")
    direction = A.solve(g)
    return -(radius / math.sqrt(max(float(g @ direction), 0.0))) * direction


def kkt_residuals(s, g, A, eta):
    """Relative residuals of stationarity, complementary slackness, primal
    and dual feasibility for the linear ellipsoidal TR problem."""
    s = np.asarray(s, dtype=float)
    g = np.asarray(g, dtype=float)
    lam = a_inv_norm(g, A)
    radius = eta * lam
    s_norm = a_norm(s, A)
    if s_norm == 0.0:
        stationarity = math.inf
    else:
        stationarity = float(np.linalg.norm(g + (lam / s_norm) * A.matvec(s)))
        stationarity /= float(np.linalg.norm(g))
    slack = s_norm - radius
    return {
        "stationarity": stationarity,
        "complementarity": abs(lam * slack) / (lam * radius),
        "primal": max(slack, 0.0) / radius,
        "dual": max(-lam, 0.0),
    }


def verify_kkt(s, g, A, eta, tol=1e-8):
    """True when ``s`` satisfies all four KKT conditions to ``tol``.

    The multiplier is fixed at ``lambda = ||g||_{A^{-1}}``, the value that
    makes the stationarity condition vanish at the preconditioned step.
    """
    if not np.any(g):
        return False
    res = kkt_residuals(s, g, A, eta)
    return all(v <= tol for v in res.values())


@dataclass
class FirstOrderConfig:
    method: str = "sgd"
    eta: float = 0.01
    beta: float = 0.9
    epsilon: float = 1e-8
    batch_size: int = 32
    max_iterations: int = 1000
    seed: int = 0

    def __post_init__(self):
        bad = {}
        if self.method not in METHODS:
            bad["method"] = f"must be one of {METHODS}"
        if not self.eta >= 0:
            bad["eta"] = "must be nonnegative"
        if not self.epsilon > 0:
            bad["epsilon"] = "must be positive"
        if not 0 < self.beta < 1:
            bad["beta"] = "must lie in (0, 1)"
        if self.batch_size < 1:
            bad["batch_size"] = "must be a positive count"
        if bad:
            raise ConfigError(bad)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError({k: "unknown FirstOrderConfig field" for k in unknown})
        return cls(**data)


@dataclass
class FirstOrderRun:
    w: np.ndarray
    trace: list
    stop_reason: str = ""

    def __iter__(self):
        return iter((self.w, self.trace))


def _loss_and_grad(objective, w, batch):
    fn = getattr(objective, "loss_and_grad", None)
    if fn is not None:
        return fn(w, batch)
    return objective.loss(w, batch), objective.grad(w, batch)


def first_order_run(
    objective,
    cfg,
    w0=None,
    max_iterations=None,
    backprop_budget=math.inf,
    callback=None,
):
    """Run SGD, Adagrad, RMSProp or full-matrix Adagrad.

    Every iteration costs one gradient on ``batch_size`` samples.  Traces
    use the trust-region schema with ``rho`` set to NaN and ``delta`` to the
    stepsize.  ``callback(iteration, w, record)`` runs after each update; a
    truthy return value stops the run.
    """
    if max_iterations is None:
        max_iterations = cfg.max_iterations
    d = objective.dim
    w = np.array(objective.initial_point(cfg.seed) if w0 is None else w0, dtype=float)
    n = max(int(objective.n), 1)
    sampler = BatchSampler(n, cfg.batch_size, np.random.default_rng(np.random.SeedSequence(cfg.seed)))
    if cfg.method == "adagrad_full":
        acc = np.zeros((d, d))
    else:
        acc = np.zeros(d)
    trace = []
    backprops = 0
    samples = 0
    stop_reason = "max_iterations"
    for it in range(max_iterations):
        if backprops >= backprop_budget:
            stop_reason = "backprop_budget"
            break
        batch = sampler.next_batch()
        loss, g = _loss_and_grad(objective, w, batch)
        backprops += len(batch)
        samples += len(batch)
        grad_norm = float(np.linalg.norm(g))
        finite = math.isfinite(loss) and math.isfinite(grad_norm)
        trace.append(
            IterationRecord(
                iteration=it,
                epoch_fraction=samples / n,
                backprops=backprops,
                loss_batch=float(loss),
                grad_norm=grad_norm,
                delta=cfg.eta,
                rho=math.nan,
                accepted=finite,
                outcome=SUCCESSFUL if finite else UNSUCCESSFUL,
                cg_iterations=0,
                termination="FirstOrder" if finite else "NonFiniteLoss",
            )
        )
        if not finite:
            stop_reason = "non_finite"
            break
        if cfg.method == "sgd":
            step = g
        elif cfg.method == "adagrad":
            acc += g * g
            step = g / np.sqrt(acc + cfg.epsilon)
        elif cfg.method == "rmsprop":
            acc = cfg.beta * acc + (1.0 - cfg.beta) * g * g
            step = g / np.sqrt(acc + cfg.epsilon)
        else:
            acc += np.outer(g, g)
            lam, vec = linalg.eigh(acc + cfg.epsilon * np.eye(d))
            lam = np.maximum(lam, cfg.epsilon)
            step = vec @ ((vec.T @ g) / np.sqrt(lam))
        w = w - cfg.eta * step
        if callback is not None and callback(it, w, trace[-1]):
            stop_reason = "callback"
            break
    return FirstOrderRun(w, trace, stop_reason)
