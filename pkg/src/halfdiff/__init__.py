"""Numerical laboratory for ``rho1 u_t + rho2 D^(1/2) u - L u = g`` with zero initial data."""

__version__ = "0.1.0"

from .grid import (  # noqa: E402
    EllipticOperator,
    EquationCoefficients,
    Field,
    SpatialGrid,
    TimeGrid,
    apply_elliptic,
    assemble_elliptic,
    discrete_sobolev_norm,
)
from .fractional import caputo_half, riemann_liouville_half  # noqa: E402
from .forward import SourceSpec, solve_forward, solve_forward_batch  # noqa: E402
from .reduction import check_reduced_equation, compute_F, compute_G  # noqa: E402
from .carleman import CarlemanGeometry, build_level_sets, build_weight  # noqa: E402
from .inverse import assemble_observation_map, reconstruct, stability_experiment  # noqa: E402

__all__ = [
    "CarlemanGeometry",
    "EllipticOperator",
    "EquationCoefficients",
    "Field",
    "SourceSpec",
    "SpatialGrid",
    "TimeGrid",
    "apply_elliptic",
    "assemble_elliptic",
    "assemble_observation_map",
    "build_level_sets",
    "build_weight",
    "caputo_half",
    "check_reduced_equation",
    "compute_F",
    "compute_G",
    "discrete_sobolev_norm",
    "reconstruct",
    "riemann_liouville_half",
    "solve_forward",
    "solve_forward_batch",
    "stability_experiment",
]
