"""Trust-region subproblem solvers for ellipsoidal constraints.

All solvers minimize the quadratic model

    m(s) = f0 + g^T s + 0.5 s^T B s    subject to  ||s||_A <= delta

by moving to sphere coordinates ``t = L^T s`` (``A = L L^T``), where the
constraint becomes the Euclidean ball and the model has gradient
``L^{-1} g`` and Hessian ``L^{-1} B L^{-T}``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import linalg
from scipy.optimize import brentq

from etr.ellipsoid import MAX_FULL_DIM, EllipsoidMatrix
from etr.errors import NumericalError

INTERIOR = "Interior"
BOUNDARY = "Boundary"
NEGATIVE_CURVATURE = "NegativeCurvature"
MAX_ITER = "MaxIter"
RESIDUAL_TOL = "ResidualTol"

# gradients below this norm give the zero step
ZERO_GRADIENT = 1e-14
# residuals below this fraction of ||g|| count as an exact interior solve
EXACT_RESIDUAL = 1e-12


@dataclass
class QuadraticModel:
    """Quadratic model with matrix-free Hessian access.

    ``hvp`` maps ``v`` to ``B v``.  ``B`` optionally holds the dense matrix,
    which :func:`solve_exact` needs (it is otherwise assembled column by
    column from ``hvp``).
    """

    g: np.ndarray
    hvp: Callable[[np.ndarray], np.ndarray]
    f0: float = 0.0
    B: np.ndarray | None = None

    @classmethod
    def from_matrix(cls, B, g, f0=0.0):
        B = np.asarray(B, dtype=float)
        return cls(g=np.asarray(g, dtype=float), hvp=lambda v: B @ v, f0=f0, B=B)

    @property
    def dim(self):
        return self.g.shape[0]

    def value(self, s):
        s = np.asarray(s, dtype=float)
        return self.f0 + float(self.g @ s) + 0.5 * float(s @ self.hvp(s))

    def dense(self):
        if self.B is not None:
            return np.asarray(self.B, dtype=float)
        cols = [self.hvp(e) for e in np.eye(self.dim)]
        B = np.column_stack(cols)
        return 0.5 * (B + B.T)


@dataclass
class SubproblemResult:
    step: np.ndarray
    model_decrease: float
    on_boundary: bool
    termination: str
    cg_iterations: int


def _boundary_tau(z, p, delta):
    """Positive root of ||z + tau p|| = delta for ||z|| < delta."""
    a = float(p @ p)
    b = 2.0 * float(z @ p)
    c = float(z @ z) - delta * delta
    disc = math.sqrt(max(b * b - 4.0 * a * c, 0.0))
    if b > 0:
        return -2.0 * c / (b + disc)
    return (-b + disc) / (2.0 * a)


def _zero_result(d):
    return SubproblemResult(np.zeros(d), 0.0, False, INTERIOR, 0)


def _check_common(model, A, delta):
    if not delta > 0 or not math.isfinite(delta):
        raise ValueError("trust-region radius must be positive and finite")
    if A.dim != model.dim:
        raise ValueError(f"ellipsoid dimension {A.dim} does not match model dimension {model.dim}")
    if not np.all(np.isfinite(model.g)):
        raise NumericalError("model gradient has non-finite entries", iteration=0)


def solve_steihaug(model, A, delta, kappa_K=0.1, max_iter=None):
    """Truncated conjugate gradients (Steihaug-Toint) in the ``A``-norm.

    Stops when the residual falls below ``kappa_K * ||g||`` (measured in
    sphere coordinates), when an iterate would leave the region, on
    negative curvature, or after ``max_iter`` Hessian products (default
    ``min(d, 250)``).  Every CG iteration costs exactly one ``hvp`` call, so
    ``cg_iterations`` counts Hessian-vector products.
    """
    _check_common(model, A, delta)
    d = model.dim
    if max_iter is None:
        max_iter = min(d, 250)
    if np.linalg.norm(model.g) <= ZERO_GRADIENT:
        return _zero_result(d)

    def sphere_hvp(v):
        return A.whiten(model.hvp(A.from_sphere(v)))

    gt = A.whiten(model.g)
    gnorm = float(np.linalg.norm(gt))
    tol = kappa_K * gnorm

    z = np.zeros(d)
    Bz = np.zeros(d)
    r = gt.copy()
    p = -r
    rr = gnorm * gnorm
    termination = MAX_ITER
    iterations = 0
    for k in range(max_iter):
        Bp = sphere_hvp(p)
        iterations += 1
        curv = float(p @ Bp)
        if not (math.isfinite(curv) and np.all(np.isfinite(Bp))):
            raise NumericalError(f"non-finite curvature in CG iteration {k}", iteration=k)
        if curv <= 0.0:
            tau = _boundary_tau(z, p, delta)
            z = z + tau * p
            Bz = Bz + tau * Bp
            termination = NEGATIVE_CURVATURE
            break
        alpha = rr / curv
        z_next = z + alpha * p
        if np.linalg.norm(z_next) >= delta:
            tau = _boundary_tau(z, p, delta)
            z = z + tau * p
            Bz = Bz + tau * Bp
            termination = BOUNDARY
            break
        z = z_next
        Bz = Bz + alpha * Bp
        r = r + alpha * Bp
        rr_next = float(r @ r)
        if not math.isfinite(rr_next):
            raise NumericalError(f"non-finite residual in CG iteration {k}", iteration=k)
        if math.sqrt(rr_next) <= tol:
            termination = INTERIOR if math.sqrt(rr_next) <= EXACT_RESIDUAL * gnorm else RESIDUAL_TOL
            break
        p = -r + (rr_next / rr) * p
        rr = rr_next

    decrease = -(float(gt @ z) + 0.5 * float(z @ Bz))
    on_boundary = termination in (BOUNDARY, NEGATIVE_CURVATURE)
    return SubproblemResult(A.from_sphere(z), decrease, on_boundary, termination, iterations)


def _sphere_transform(B, A):
    if A.shape == "uniform":
        return B
    if A.shape == "diag":
        scale = 1.0 / np.sqrt(A.entries)
        return scale[:, None] * B * scale[None, :]
    L = A._cholesky
    left = linalg.solve_triangular(L, B, lower=True)
    return linalg.solve_triangular(L, left.T, lower=True)


def _solve_sphere(lam, gamma, delta):
    """Global minimizer of sum(gamma*c + lam*c^2/2) over ||c|| <= delta.

    ``lam`` are ascending eigenvalues and ``gamma`` the gradient in the
    eigenbasis.  Returns the coefficient vector and the multiplier.
    """
    gnorm = float(np.linalg.norm(gamma))
    if lam[0] > 0:
        c = -gamma / lam
        if np.linalg.norm(c) <= delta:
            return c, 0.0

    def step(mult):
        denom = lam + mult
        with np.errstate(divide="ignore", invalid="ignore"):
            c = np.where(gamma == 0.0, 0.0, -gamma / denom)
        return c

    def phi(mult):
        norm = np.linalg.norm(step(mult))
        if not math.isfinite(norm):
            return -1.0 / delta
        if norm == 0.0:
            return math.inf
        return 1.0 / norm - 1.0 / delta

    low = max(0.0, -float(lam[0]))
    if phi(low) >= 0.0:
        # hard case: the gradient misses the bottom eigenspace; fill the
        # remaining radius along the leading eigenvector
        c = step(low)
        c[~np.isfinite(c)] = 0.0
        rest = delta * delta - float(c @ c)
        if rest > 0.0:
            tau = math.sqrt(rest)
            c[0] += -tau if gamma[0] > 0 else tau
        return c, low
    high = max(low, gnorm / delta - float(lam[0]))
    high = high * (1.0 + 1e-12) + 1e-300
    while phi(high) < 0.0:
        high = 2.0 * high + 1e-300
    mult = brentq(phi, low, high, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=1000)
    c = step(mult)
    c *= delta / np.linalg.norm(c)
    return c, mult


def solve_exact(model, A, delta):
    """Global solution of the trust-region subproblem for desk-scale ``d``.

    Uses a full eigendecomposition of the sphere-transformed Hessian and
    root finding on the secular equation ``||s(lambda)|| = delta``,
    including the hard case.
    """
    _check_common(model, A, delta)
    d = model.dim
    if d > MAX_FULL_DIM:
        raise ValueError(f"exact solver is limited to dimension {MAX_FULL_DIM}")
    Bt = _sphere_transform(model.dense(), A)
    Bt = 0.5 * (Bt + Bt.T)
    try:
        lam, Q = linalg.eigh(Bt)
    except linalg.LinAlgError as exc:
        raise NumericalError(f"eigendecomposition failed: {exc}") from exc
    gamma = Q.T @ A.whiten(model.g)
    c, mult = _solve_sphere(lam, gamma, delta)
    decrease = -(float(gamma @ c) + 0.5 * float(lam @ (c * c)))
    on_boundary = mult > 0.0 or math.isclose(np.linalg.norm(c), delta, rel_tol=1e-12)
    termination = BOUNDARY if on_boundary else INTERIOR
    return SubproblemResult(A.from_sphere(Q @ c), decrease, on_boundary, termination, 0)


def cauchy_decrease(model, A, delta):
    """Model decrease at the best point along ``-A^{-1} g`` inside the region."""
    _check_common(model, A, delta)
    gt = A.whiten(model.g)
    gg = float(gt @ gt)
    if gg == 0.0:
        return 0.0
    p = A.from_sphere(-gt)
    curv = float(p @ model.hvp(p))
    tau_max = delta / math.sqrt(gg)
    tau = tau_max if curv <= 0.0 else min(gg / curv, tau_max)
    return tau * gg - 0.5 * tau * tau * curv
