"""Ellipsoidal norms and preconditioner matrices built from gradient history.

An :class:`EllipsoidMatrix` is a symmetric positive-definite matrix ``A``
inducing the norm ``||w||_A = sqrt(w^T A w)``.  Three storage shapes are
supported: ``"uniform"`` (the identity), ``"diag"`` and ``"full"``.

:class:`GradientHistory` accumulates squared gradients either as an
exponential moving average (RMSProp) or as a running sum (Adagrad), and
:func:`build_ellipsoid` turns the accumulator into a trust-region shape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import linalg

from etr.errors import NumericalError

SHAPES = ("uniform", "diag", "full")
HISTORY_MODES = ("rms_diag", "rms_full", "ada_diag", "ada_full")
EXPONENTS = {"half": 0.5, "one": 1.0}

# the validity quadratic is O(1); absorb rounding at its root
_QUADRATIC_ROUNDOFF = 8 * np.finfo(float).eps

# dense d x d storage is only allowed up to this dimension
MAX_FULL_DIM = 512


def _as_vector(w, dim):
    w = np.asarray(w, dtype=float)
    if w.ndim != 1 or w.shape[0] != dim:
        raise ValueError(f"expected a vector of length {dim}, got shape {w.shape}")
    return w


@dataclass(frozen=True, eq=False)
class EllipsoidMatrix:
    """Symmetric positive-definite matrix defining a trust-region shape.

    ``epsilon`` is the spectral floor the matrix was built with; every
    eigenvalue is at least ``epsilon`` (up to rounding).  Use the
    :meth:`uniform`, :meth:`diagonal` and :meth:`full` constructors.
    """

    shape: str
    dim: int
    epsilon: float = 0.0
    entries: np.ndarray | None = field(default=None, repr=False)
    matrix: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown ellipsoid shape {self.shape!r}")
        if self.dim < 1:
            raise ValueError("dimension must be positive")
        if not np.isfinite(self.epsilon) or self.epsilon < 0:
            raise ValueError("epsilon must be a finite nonnegative scalar")
        if self.shape == "diag":
            a = np.array(self.entries, dtype=float)
            if a.shape != (self.dim,):
                raise ValueError(f"diagonal entries must have shape ({self.dim},)")
            if not np.all(np.isfinite(a)) or np.any(a <= 0) or np.any(a < self.epsilon):
                raise ValueError("diagonal entries must be finite, positive and >= epsilon")
            a.flags.writeable = False
            object.__setattr__(self, "entries", a)
        elif self.shape == "full":
            if self.dim > MAX_FULL_DIM:
                raise ValueError(
                    f"full ellipsoids are limited to dimension {MAX_FULL_DIM}, got {self.dim}"
                )
            m = np.array(self.matrix, dtype=float)
            if m.shape != (self.dim, self.dim):
                raise ValueError(f"matrix must have shape ({self.dim}, {self.dim})")
            if not np.all(np.isfinite(m)):
                raise ValueError("matrix entries must be finite")
            scale = max(np.max(np.abs(m)), np.finfo(float).tiny)
            if np.max(np.abs(m - m.T)) > 1e-12 * scale:
                raise ValueError("matrix is not symmetric")
            m = 0.5 * (m + m.T)
            lam = linalg.eigvalsh(m)
            if lam[0] <= 0 or lam[0] < self.epsilon - 1e-12 * max(1.0, lam[-1]):
                raise ValueError(
                    f"matrix smallest eigenvalue {lam[0]:.3e} violates floor {self.epsilon:.3e}"
                )
            m.flags.writeable = False
            object.__setattr__(self, "matrix", m)

    @classmethod
    def uniform(cls, dim):
        return cls("uniform", int(dim), 0.0)

    @classmethod
    def diagonal(cls, entries, epsilon=0.0):
        entries = np.asarray(entries, dtype=float)
        return cls("diag", entries.shape[0], float(epsilon), entries=entries)

    @classmethod
    def full(cls, matrix, epsilon=0.0):
        matrix = np.asarray(matrix, dtype=float)
        return cls("full", matrix.shape[0], float(epsilon), matrix=matrix)

    @cached_property
    def _cholesky(self):
        # lower factor L with A = L L^T
        try:
            return linalg.cholesky(self.matrix, lower=True)
        except linalg.LinAlgError as exc:
            raise NumericalError(f"Cholesky factorization failed: {exc}") from exc

    def dense(self):
        if self.shape == "uniform":
            return np.eye(self.dim)
        if self.shape == "diag":
            return np.diag(self.entries)
        return np.array(self.matrix)

    def diagonal_entries(self):
        if self.shape == "uniform":
            return np.ones(self.dim)
        if self.shape == "diag":
            return np.array(self.entries)
        return np.diag(self.matrix).copy()

    def matvec(self, v):
        v = _as_vector(v, self.dim)
        if self.shape == "uniform":
            return v.copy()
        if self.shape == "diag":
            return self.entries * v
        return self.matrix @ v

    def solve(self, v):
        """Return ``A^{-1} v``."""
        v = _as_vector(v, self.dim)
        if self.shape == "uniform":
            return v.copy()
        if self.shape == "diag":
            return v / self.entries
        return linalg.cho_solve((self._cholesky, True), v)

    # Change of variables to the unit-sphere geometry.  With A = L L^T the map
    # s -> L^T s sends the A-ellipsoid to the Euclidean ball; gradients map
    # through L^{-1}.  For diagonal A, L = diag(sqrt(a)).

    def to_sphere(self, s):
        s = _as_vector(s, self.dim)
        if self.shape == "uniform":
            return s.copy()
        if self.shape == "diag":
            return np.sqrt(self.entries) * s
        return self._cholesky.T @ s

    def from_sphere(self, t):
        t = _as_vector(t, self.dim)
        if self.shape == "uniform":
            return t.copy()
        if self.shape == "diag":
            return t / np.sqrt(self.entries)
        return linalg.solve_triangular(self._cholesky, t, lower=True, trans="T")

    def whiten(self, g):
        """Map a gradient into sphere coordinates, ``L^{-1} g``."""
        g = _as_vector(g, self.dim)
        if self.shape == "uniform":
            return g.copy()
        if self.shape == "diag":
            return g / np.sqrt(self.entries)
        return linalg.solve_triangular(self._cholesky, g, lower=True)

    def to_dict(self):
        out = {"shape": self.shape, "epsilon": self.epsilon}
        if self.shape == "uniform":
            out["dim"] = self.dim
        elif self.shape == "diag":
            out["entries"] = self.entries.tolist()
        else:
            out["matrix"] = self.matrix.tolist()
        return out

    @classmethod
    def from_dict(cls, data):
        shape = data["shape"]
        if shape == "uniform":
            return cls.uniform(data["dim"])
        if shape == "diag":
            return cls.diagonal(data["entries"], data.get("epsilon", 0.0))
        if shape == "full":
            return cls.full(data["matrix"], data.get("epsilon", 0.0))
        raise ValueError(f"unknown ellipsoid shape {shape!r}")


def a_norm(w, A):
    """Return ``sqrt(w^T A w)``."""
    w = _as_vector(w, A.dim)
    return math.sqrt(max(float(w @ A.matvec(w)), 0.0))


def a_inv_norm(w, A):
    """Return ``sqrt(w^T A^{-1} w)``, the dual norm of ``a_norm``."""
    w = _as_vector(w, A.dim)
    return math.sqrt(max(float(w @ A.solve(w)), 0.0))


def eigen_bounds(A):
    """Smallest and largest eigenvalue of ``A``."""
    if A.shape == "uniform":
        return 1.0, 1.0
    if A.shape == "diag":
        return float(A.entries.min()), float(A.entries.max())
    try:
        lam = linalg.eigvalsh(A.matrix)
    except linalg.LinAlgError as exc:
        raise NumericalError(f"eigendecomposition failed: {exc}") from exc
    return float(lam[0]), float(lam[-1])


@dataclass
class GradientHistory:
    """Second-moment record of observed gradients.

    For ``rms_*`` modes the accumulator is the exponential moving average
    with weight ``1 - beta`` on the newest gradient; for ``ada_*`` modes it
    is the plain running sum.  Diagonal modes keep a vector of squared
    entries, full modes the ``d x d`` outer-product matrix.
    """

    mode: str
    dim: int
    beta: float = 0.9
    accumulator: np.ndarray | None = None
    step_count: int = 0

    def __post_init__(self):
        if self.mode not in HISTORY_MODES:
            raise ValueError(f"unknown history mode {self.mode!r}")
        if self.is_rms and not 0.0 < self.beta < 1.0:
            raise ValueError("beta must lie in (0, 1) for RMS modes")
        if self.is_full and self.dim > MAX_FULL_DIM:
            raise ValueError(
                f"full-matrix history is limited to dimension {MAX_FULL_DIM}, got {self.dim}"
            )
        if self.accumulator is None:
            shape = (self.dim, self.dim) if self.is_full else (self.dim,)
            self.accumulator = np.zeros(shape)

    @property
    def is_rms(self):
        return self.mode.startswith("rms")

    @property
    def is_full(self):
        return self.mode.endswith("full")


def update_history(h, g):
    """Fold gradient ``g`` into ``h`` in place and return ``h``."""
    g = _as_vector(g, h.dim)
    if h.is_full:
        outer = np.outer(g, g)
    else:
        outer = g * g
    if h.is_rms:
        h.accumulator = h.beta * h.accumulator + (1.0 - h.beta) * outer
    else:
        h.accumulator = h.accumulator + outer
    h.step_count += 1
    return h


def _exponent_value(exponent):
    if isinstance(exponent, str):
        try:
            return EXPONENTS[exponent.lower()]
        except KeyError:
            raise ValueError(f"exponent must be one of {sorted(EXPONENTS)}") from None
    exponent = float(exponent)
    if exponent not in (0.5, 1.0):
        raise ValueError("exponent must be 1/2 or 1")
    return exponent


def build_ellipsoid(h, epsilon, exponent="half"):
    """Return ``(accumulator + epsilon*I) ** exponent`` as an ellipsoid.

    The floor is added before the power, so the smallest eigenvalue of the
    result is at least ``epsilon ** exponent``.
    """
    if epsilon < 0 or not np.isfinite(epsilon):
        raise ValueError("epsilon must be finite and nonnegative")
    p = _exponent_value(exponent)
    floor = epsilon**p
    if not h.is_full:
        entries = h.accumulator + epsilon
        if p == 0.5:
            entries = np.sqrt(entries)
        return EllipsoidMatrix.diagonal(entries, floor)
    m = h.accumulator + epsilon * np.eye(h.dim)
    m = 0.5 * (m + m.T)
    if p == 0.5:
        try:
            lam, vec = linalg.eigh(m)
        except linalg.LinAlgError as exc:
            raise NumericalError(f"eigendecomposition failed: {exc}") from exc
        lam = np.sqrt(np.maximum(lam, epsilon))
        m = (vec * lam) @ vec.T
        m = 0.5 * (m + m.T)
    return EllipsoidMatrix.full(m, floor)


def rms_spectral_upper_bound(L_H_sq, beta, t, epsilon):
    """Upper bound ``(1 - beta^(t+1)) L_H^2 + epsilon`` on the RMS spectrum."""
    return (1.0 - beta ** (t + 1)) * L_H_sq + epsilon


def epsilon_upper_limit(L_H_sq):
    """Largest floor for which the RMS ellipsoids stay uniformly equivalent
    for every ``t`` and ``beta``: ``(sqrt(L^4 + 4) - L^2) / 2``."""
    # rationalised form avoids cancellation for large L_H^2
    return 2.0 / (math.sqrt(L_H_sq * L_H_sq + 4.0) + L_H_sq)


@dataclass(frozen=True)
class EquivalenceCertificate:
    lambda_min_bound: float
    lambda_max_bound: float
    zeta: float
    mu: float
    valid: bool


def certify_uniform_equivalence(A, L_H_sq, beta, t, epsilon, exponent="one"):
    """Check the spectral sandwich that makes RMS norms uniformly equivalent.

    The eigenvalues of ``(1-beta) G D G^T + epsilon*I`` lie in
    ``[epsilon, (1-beta^(t+1)) L_H^2 + epsilon]`` when every gradient has
    squared norm at most ``L_H_sq``.  The certificate is valid when the upper
    bound does not exceed ``1/epsilon``, i.e. when
    ``epsilon^2 + (1-beta^(t+1)) L_H^2 epsilon - 1 <= 0``.

    With ``exponent="half"`` the bounds are square-rooted; the validity
    predicate is unchanged because the square root is monotone.

    If ``A`` is given, its actual spectrum must also fall inside the bounds
    (1e-9 relative slack) for the certificate to be valid.
    """
    p = _exponent_value(exponent)
    decay = 1.0 - beta ** (t + 1)
    lam_min = epsilon
    lam_max = rms_spectral_upper_bound(L_H_sq, beta, t, epsilon)
    valid = bool(
        np.isfinite(lam_max)
        and epsilon > 0
        and epsilon * epsilon + decay * L_H_sq * epsilon - 1.0 <= _QUADRATIC_ROUNDOFF
    )
    zeta = max(1.0 / epsilon, lam_max) if epsilon > 0 else math.inf
    if p == 0.5:
        lam_min, lam_max, zeta = math.sqrt(lam_min), math.sqrt(lam_max), math.sqrt(zeta)
    if A is not None and valid:
        lo, hi = eigen_bounds(A)
        slack = 1e-9 * max(abs(hi), 1.0)
        valid = lo >= lam_min - slack and hi <= lam_max + slack
    zeta = max(zeta, 1.0)
    return EquivalenceCertificate(
        lambda_min_bound=lam_min,
        lambda_max_bound=lam_max,
        zeta=zeta,
        mu=math.sqrt(zeta),
        valid=valid,
    )
