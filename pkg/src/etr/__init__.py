"""Stochastic trust-region optimization with ellipsoidal constraints.

The trust-region shapes are built from the second-moment statistics that
adaptive gradient methods (RMSProp, Adagrad) accumulate.
"""

from etr.ellipsoid import (
    EllipsoidMatrix,
    EquivalenceCertificate,
    GradientHistory,
    a_inv_norm,
    a_norm,
    build_ellipsoid,
    certify_uniform_equivalence,
    eigen_bounds,
    update_history,
)
from etr.errors import ConfigError, DegenerateModelError, IdxFormatError, NumericalError
from etr.subproblem import (
    QuadraticModel,
    SubproblemResult,
    cauchy_decrease,
    solve_exact,
    solve_steihaug,
)
from etr.trloop import TRConfig, accept_step, compute_rho, tr_minimize, update_radius
from etr.firstorder import (
    FirstOrderConfig,
    first_order_run,
    first_order_tr_step,
    preconditioned_step,
    verify_kkt,
)
from etr.problems import MlpSpec, QuadraticSpec, fd_gradient, fd_hvp, make_mlp, make_quadratic

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DegenerateModelError",
    "EllipsoidMatrix",
    "EquivalenceCertificate",
    "FirstOrderConfig",
    "GradientHistory",
    "IdxFormatError",
    "MlpSpec",
    "NumericalError",
    "QuadraticModel",
    "QuadraticSpec",
    "SubproblemResult",
    "TRConfig",
    "a_inv_norm",
    "a_norm",
    "accept_step",
    "build_ellipsoid",
    "cauchy_decrease",
    "certify_uniform_equivalence",
    "compute_rho",
    "eigen_bounds",
    "fd_gradient",
    "fd_hvp",
    "first_order_run",
    "first_order_tr_step",
    "make_mlp",
    "make_quadratic",
    "preconditioned_step",
    "solve_exact",
    "solve_steihaug",
    "tr_minimize",
    "update_history",
    "update_radius",
    "verify_kkt",
]
