"""Objectives with exact gradients and Hessian-vector products.

Every objective is a finite sum over ``n`` samples and evaluates the mean
loss over an index batch.  Passing ``batch=None`` uses the whole dataset.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, log_softmax, softmax

ACTIVATIONS = ("tanh", "sigmoid", "identity")
LOSS_KINDS = ("cross_entropy", "bce_pixelwise", "squared")


class Objective:
    """Stochastic oracle interface: ``loss``, ``grad`` and ``hvp`` on batches."""

    dim: int
    n: int

    def loss(self, w, batch=None):
        raise NotImplementedError

    def grad(self, w, batch=None):
        raise NotImplementedError

    def hvp(self, w, v, batch=None):
        raise NotImplementedError

    def initial_point(self, seed=0):
        raise NotImplementedError


@dataclass
class QuadraticSpec:
    dim: int
    kappa: float
    rotation: str = "axis"  # "axis" or "random"
    rotation_seed: int = 0
    optimum: np.ndarray | None = None


class Quadratic(Objective):
    """``L(w) = 0.5 (w - w*)^T H (w - w*)``; batches are ignored."""

    n = 1

    def __init__(self, H, optimum):
        self.H = np.asarray(H, dtype=float)
        self.optimum = np.asarray(optimum, dtype=float)
        self.dim = self.H.shape[0]

    def loss(self, w, batch=None):
        r = np.asarray(w, dtype=float) - self.optimum
        return 0.5 * float(r @ (self.H @ r))

    def grad(self, w, batch=None):
        return self.H @ (np.asarray(w, dtype=float) - self.optimum)

    def hvp(self, w, v, batch=None):
        return self.H @ np.asarray(v, dtype=float)

    def initial_point(self, seed=0, scale=1.0):
        rng = np.random.default_rng(seed)
        return self.optimum + scale * rng.standard_normal(self.dim)


def random_orthogonal(dim, seed):
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q * np.sign(np.diag(r))


def make_quadratic(spec):
    """Quadratic with log-uniformly spaced curvatures in ``[1, kappa]``."""
    if spec.kappa < 1:
        raise ValueError("condition number must be >= 1")
    eig = np.geomspace(1.0, spec.kappa, spec.dim) if spec.dim > 1 else np.ones(1)
    if spec.rotation == "axis":
        H = np.diag(eig)
    elif spec.rotation == "random":
        Q = random_orthogonal(spec.dim, spec.rotation_seed)
        H = (Q * eig) @ Q.T
        H = 0.5 * (H + H.T)
    else:
        raise ValueError(f"unknown rotation {spec.rotation!r}")
    optimum = np.zeros(spec.dim) if spec.optimum is None else spec.optimum
    return Quadratic(H, optimum)


@dataclass
class MlpSpec:
    """Fully connected network ``layer_sizes[0] -> ... -> layer_sizes[-1]``.

    Hidden layers use ``activation`` except those listed in
    ``linear_layers`` (indices into the hidden layers, 0-based); the output
    layer always produces raw logits for the loss.
    """

    layer_sizes: list[int]
    activation: str = "tanh"
    loss_kind: str = "cross_entropy"
    init_seed: int = 0
    linear_layers: tuple[int, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if len(self.layer_sizes) < 2:
            raise ValueError("an MLP needs at least an input and an output layer")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss {self.loss_kind!r}")

    @classmethod
    def autoencoder(cls, encoder_sizes, activation="sigmoid", init_seed=0):
        """Mirrored autoencoder with a linear code layer and pixelwise BCE."""
        sizes = list(encoder_sizes) + list(encoder_sizes[-2::-1])
        code = len(encoder_sizes) - 2
        return cls(sizes, activation, "bce_pixelwise", init_seed, (code,))

    @property
    def num_params(self):
        sizes = self.layer_sizes
        return sum((a + 1) * b for a, b in zip(sizes[:-1], sizes[1:]))


def _act(kind, z):
    if kind == "tanh":
        return np.tanh(z)
    if kind == "sigmoid":
        return expit(z)
    return z


def _act_derivs(kind, a):
    """First and second derivative of the activation, from its output ``a``."""
    if kind == "tanh":
        d1 = 1.0 - a * a
        return d1, -2.0 * a * d1
    if kind == "sigmoid":
        d1 = a * (1.0 - a)
        return d1, d1 * (1.0 - 2.0 * a)
    return np.ones_like(a), np.zeros_like(a)


class MLP(Objective):
    """Feed-forward network with exact reverse-mode gradients and
    forward-over-reverse (R-operator) Hessian-vector products.

    Parameters are packed layer by layer as ``W`` (``fan_out x fan_in``,
    row-major) followed by the bias ``b``.
    """

    def __init__(self, spec, features, labels=None, targets=None):
        self.spec = spec
        self.X = np.asarray(features, dtype=float)
        if self.X.ndim != 2 or self.X.shape[1] != spec.layer_sizes[0]:
            raise ValueError(
                f"features must be n x {spec.layer_sizes[0]}, got shape {self.X.shape}"
            )
        self.n = self.X.shape[0]
        out = spec.layer_sizes[-1]
        if spec.loss_kind == "cross_entropy":
            if labels is None:
                raise ValueError("cross entropy needs integer labels")
            self.y = np.asarray(labels, dtype=np.int64)
            if self.y.shape != (self.n,):
                raise ValueError("labels must be a vector with one entry per sample")
            if self.n and (self.y.min() < 0 or self.y.max() >= out):
                raise ValueError(f"labels must lie in [0, {out})")
        else:
            t = self.X if targets is None else np.asarray(targets, dtype=float)
            t = t.reshape(self.n, -1)
            if t.shape[1] != out:
                raise ValueError(f"targets must be n x {out}, got shape {t.shape}")
            self.y = t
        self._shapes = list(zip(spec.layer_sizes[1:], spec.layer_sizes[:-1]))
        self.dim = spec.num_params
        nlayers = len(self._shapes)
        self._acts = [
            "identity" if (i == nlayers - 1 or i in spec.linear_layers) else spec.activation
            for i in range(nlayers)
        ]

    def unpack(self, w):
        w = np.asarray(w, dtype=float)
        if w.shape != (self.dim,):
            raise ValueError(f"parameter vector must have length {self.dim}")
        layers, k = [], 0
        for fan_out, fan_in in self._shapes:
            W = w[k : k + fan_out * fan_in].reshape(fan_out, fan_in)
            k += fan_out * fan_in
            b = w[k : k + fan_out]
            k += fan_out
            layers.append((W, b))
        return layers

    @staticmethod
    def pack(layers):
        return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in layers])

    def initial_point(self, seed=None):
        rng = np.random.default_rng(self.spec.init_seed if seed is None else seed)
        layers = []
        for fan_out, fan_in in self._shapes:
            bound = 1.0 / math.sqrt(fan_in)
            layers.append((rng.uniform(-bound, bound, (fan_out, fan_in)), np.zeros(fan_out)))
        return self.pack(layers)

    def _batch(self, batch):
        if batch is None:
            return self.X, self.y
        idx = np.asarray(batch, dtype=np.int64)
        return self.X[idx], self.y[idx]

    def _forward(self, layers, X):
        outs = [X]
        a = X
        for (W, b), kind in zip(layers, self._acts):
            a = _act(kind, a @ W.T + b)
            outs.append(a)
        return outs

    def _per_sample_loss(self, z, y):
        kind = self.spec.loss_kind
        if kind == "cross_entropy":
            return -log_softmax(z, axis=1)[np.arange(z.shape[0]), y]
        if kind == "bce_pixelwise":
            # log(1 + e^z) - y z, stable for either sign of z
            return np.sum(np.logaddexp(0.0, z) - y * z, axis=1)
        return 0.5 * np.sum((z - y) ** 2, axis=1)

    def _loss_grad_z(self, z, y):
        kind = self.spec.loss_kind
        if kind == "cross_entropy":
            p = softmax(z, axis=1)
            p[np.arange(z.shape[0]), y] -= 1.0
            return p
        if kind == "bce_pixelwise":
            return expit(z) - y
        return z - y

    def _loss_hess_z(self, z, rz):
        kind = self.spec.loss_kind
        if kind == "cross_entropy":
            p = softmax(z, axis=1)
            return p * rz - p * np.sum(p * rz, axis=1, keepdims=True)
        if kind == "bce_pixelwise":
            s = expit(z)
            return s * (1.0 - s) * rz
        return rz

    def loss(self, w, batch=None):
        X, y = self._batch(batch)
        if X.shape[0] == 0:
            return 0.0
        outs = self._forward(self.unpack(w), X)
        return float(np.mean(self._per_sample_loss(outs[-1], y)))

    def _backward(self, layers, outs, y):
        m = outs[0].shape[0]
        delta = self._loss_grad_z(outs[-1], y) / m
        deltas = [None] * len(layers)
        for i in range(len(layers) - 1, -1, -1):
            deltas[i] = delta
            if i:
                d1, _ = _act_derivs(self._acts[i - 1], outs[i])
                delta = (delta @ layers[i][0]) * d1
        return deltas

    def grad(self, w, batch=None):
        X, y = self._batch(batch)
        if X.shape[0] == 0:
            return np.zeros(self.dim)
        layers = self.unpack(w)
        outs = self._forward(layers, X)
        deltas = self._backward(layers, outs, y)
        return self.pack([(dl.T @ outs[i], dl.sum(axis=0)) for i, dl in enumerate(deltas)])

    def loss_and_grad(self, w, batch=None):
        X, y = self._batch(batch)
        if X.shape[0] == 0:
            return 0.0, np.zeros(self.dim)
        layers = self.unpack(w)
        outs = self._forward(layers, X)
        loss = float(np.mean(self._per_sample_loss(outs[-1], y)))
        deltas = self._backward(layers, outs, y)
        return loss, self.pack([(dl.T @ outs[i], dl.sum(axis=0)) for i, dl in enumerate(deltas)])

    def hvp(self, w, v, batch=None):
        return self.hessian_operator(w, batch)(v)

    def hessian_operator(self, w, batch=None):
        """Return ``v -> H v`` at ``w``, reusing one forward pass."""
        X, y = self._batch(batch)
        if X.shape[0] == 0:
            return lambda v: np.zeros(self.dim)
        layers = self.unpack(w)
        outs = self._forward(layers, X)
        m = X.shape[0]
        nl = len(layers)
        derivs = [_act_derivs(self._acts[i], outs[i + 1]) for i in range(nl)]
        deltas = self._backward(layers, outs, y)

        def apply(v):
            dirs = self.unpack(v)
            # forward R pass: directional derivatives of pre-activations and outputs
            # (the input does not depend on the weights, so its R-value is zero)
            r_out = [None]
            r_pre = []
            for i, ((W, _), (V, vb)) in enumerate(zip(layers, dirs)):
                rz = outs[i] @ V.T + vb
                if i:
                    rz += r_out[i] @ W.T
                r_pre.append(rz)
                r_out.append(derivs[i][0] * rz)
            # R-derivative of the reverse pass
            r_delta = self._loss_hess_z(outs[-1], r_pre[-1]) / m
            result = [None] * nl
            for i in range(nl - 1, -1, -1):
                delta = deltas[i]
                rW = r_delta.T @ outs[i]
                if i:
                    rW += delta.T @ r_out[i]
                result[i] = (rW, r_delta.sum(axis=0))
                if i:
                    W, V = layers[i][0], dirs[i][0]
                    d1, d2 = derivs[i - 1]
                    r_delta = (r_delta @ W + delta @ V) * d1 + (delta @ W) * d2 * r_pre[i - 1]
            return self.pack(result)

        return apply


def make_mlp(spec, dataset):
    """Build an :class:`MLP` objective on ``dataset``.

    Autoencoding losses reconstruct the features; cross entropy consumes
    the integer labels; squared loss uses ``dataset.targets``.
    """
    targets = getattr(dataset, "targets", None)
    return MLP(spec, dataset.features, labels=dataset.labels, targets=targets)


def fd_gradient(objective, w, batch=None, h=1e-5):
    """Central-difference gradient."""
    w = np.asarray(w, dtype=float)
    g = np.empty_like(w)
    e = np.zeros_like(w)
    for i in range(w.shape[0]):
        e[i] = h
        g[i] = (objective.loss(w + e, batch) - objective.loss(w - e, batch)) / (2.0 * h)
        e[i] = 0.0
    return g


def fd_hvp(objective, w, v, batch=None, h=1e-5):
    """Central difference of the gradient along ``v``."""
    w = np.asarray(w, dtype=float)
    v = np.asarray(v, dtype=float)
    return (objective.grad(w + h * v, batch) - objective.grad(w - h * v, batch)) / (2.0 * h)
