"""Reduction of the half-order equation to an integer-order one.

If ``rho1 u_t + rho2 D^(1/2) u - L u = g`` with ``u(., 0) = 0``, then

    rho2^2 u_t - (rho1 d_t - L)^2 u = G,
    G = [rho2 D^(1/2) - (rho1 d_t - L)] g + rho2 g(., 0) / sqrt(pi t).

``G`` is stored as a regular part plus the exact coefficient of the
``1/sqrt(pi t)`` singularity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fractional import ResidualReport, caputo_half, time_derivative
from .grid import EllipticOperator, EquationCoefficients, GridError, assemble_elliptic, derivative


@dataclass(frozen=True)
class ReducedSource:
    regular: np.ndarray
    singular: np.ndarray
    dt: float

    def values(self) -> np.ndarray:
        """``regular + singular / sqrt(pi t)``; level 0 is NaN."""
        N = self.regular.shape[0] - 1
        t = np.arange(N + 1) * self.dt
        with np.errstate(divide="ignore"):
            s = 1.0 / np.sqrt(np.pi * t)
        s[0] = np.nan
        return self.regular + np.multiply.outer(s, self.singular)


def _check(Lop: EllipticOperator, arr: np.ndarray, name: str) -> np.ndarray:
    arr = np.asarray(arr, dtype=float)
    if arr.ndim != Lop.grid.dim + 1 or arr.shape[1:] != Lop.grid.shape:
        raise GridError(f"{name} has shape {arr.shape}; expected (nt, *{Lop.grid.shape})")
    if arr.shape[0] < 3:
        raise GridError(f"{name} needs at least 3 time levels")
    return arr


def compute_G(coeffs: EquationCoefficients, Lop: EllipticOperator, g: np.ndarray, dt: float) -> ReducedSource:
    g = _check(Lop, g, "g")
    regular = coeffs.rho2 * caputo_half(g, dt) - coeffs.rho1 * time_derivative(g, dt) + Lop.apply(g)
    return ReducedSource(regular, coeffs.rho2 * g[0], dt)


def compute_F(
    coeffs: EquationCoefficients,
    Lop: EllipticOperator,
    f: np.ndarray,
    R: np.ndarray,
    dt: float,
) -> ReducedSource:
    """``G`` for the separated source ``f R``, assembled term by term.

    Principal part ``R div(a grad f)``, gradient part
    ``sum_j (2 sum_i a_ij d_i R + b_j R) d_j f`` and the zero-order bracket
    ``rho2 D^(1/2) R - rho1 R_t + L R`` times ``f``.
    """
    grid = Lop.grid
    R = _check(Lop, R, "R")
    f = np.asarray(f, dtype=float)
    if f.shape != grid.shape:
        raise GridError(f"f has shape {f.shape}; expected {grid.shape}")
    div_part = assemble_elliptic(grid, Lop.a, 0.0, 0.0, Lop.m)
    principal = R * div_part.apply(f)[None]
    grad_f = [derivative(f, h, 1, ax) for ax, h in enumerate(grid.h)]
    grad_R = [derivative(R, h, 1, ax + 1) for ax, h in enumerate(grid.h)]
    gradient = np.zeros_like(R)
    for j in range(grid.dim):
        coef = Lop.b[j][None] * R
        for i in range(grid.dim):
            coef = coef + 2.0 * Lop.a[i, j][None] * grad_R[i]
        gradient += coef * grad_f[j][None]
    bracket = coeffs.rho2 * caputo_half(R, dt) - coeffs.rho1 * time_derivative(R, dt) + Lop.apply(R)
    regular = principal + gradient + bracket * f[None]
    interior = grid.interior_mask
    regular = np.where(interior[None], regular, 0.0)
    return ReducedSource(regular, coeffs.rho2 * f * R[0], dt)


@dataclass(frozen=True)
class ReducedResidualReport(ResidualReport):
    boundary_layers: int = 2


def check_reduced_equation(
    u: np.ndarray,
    G: ReducedSource,
    coeffs: EquationCoefficients,
    Lop: EllipticOperator,
    dt: float,
    cut_cells: int = 2,
    boundary_layers: int = 2,
    cut_time: float | None = None,
) -> ReducedResidualReport:
    """Residual of ``rho2^2 u_t - (rho1 d_t - L) w - G`` with ``w = rho1 u_t - L u``.

    Time derivatives are centered (second order), independent of the
    solver's one-sided stencils; the ``sqrt(t)`` start of ``w`` is
    differentiated exactly.  Norms skip the first ``cut_cells`` levels and
    ``boundary_layers`` node layers next to the spatial boundary;
    ``cut_time`` widens the initial layer to a fixed physical time.
    """
    grid = Lop.grid
    u = _check(Lop, u, "u")
    if cut_time is not None:
        cut_cells = max(cut_cells, int(np.ceil(cut_time / dt - 1e-9)))
    cut_cells = max(cut_cells, 1)  # G is singular at t = 0
    if G.regular.shape != u.shape:
        raise GridError("G and u have different shapes")
    ut = time_derivative(u, dt)
    w = coeffs.rho1 * ut - Lop.apply(u)
    wt = time_derivative(w, dt, singular_start=True)
    res = coeffs.rho2**2 * ut - (coeffs.rho1 * wt - Lop.apply(w)) - G.values()
    keep = np.zeros(grid.shape, dtype=bool)
    keep[tuple(slice(boundary_layers, n - boundary_layers) for n in grid.shape)] = True
    res = np.where(keep[None], res, 0.0)
    res[:cut_cells] = 0.0
    weights = grid.quadrature_weights * keep
    base = ResidualReport.from_residual(res, dt, cut_cells, weights[None])
    return ReducedResidualReport(base.max_norm, base.l2_norm, cut_cells, res, boundary_layers)
