"""Carleman weight geometry and numerical checks of weighted inequalities.

The weight is ``phi = exp(lam * psi)`` with ``psi(x, t) = d(x) - beta (t - t0)^2``.
``d`` is an explicit quadratic (1D) or product of quadratics (2D rectangle)
that vanishes on the boundary of an extended domain ``Omega_0`` reaching past
the observed face ``gamma``; its critical point lies outside the closed
domain, so ``|grad d| > 0`` there.

The checkers evaluate both sides of the parabolic, elliptic and combined
estimates by trapezoidal quadrature for a sweep of the large parameter
``s``.  Every weighted sum is computed with the largest exponent factored
out, so ratios are exact under that shift and nothing overflows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
import sympy
from scipy import ndimage

from .fractional import time_derivative
from .grid import (
    EllipticOperator,
    EquationCoefficients,
    SpatialGrid,
    TimeGrid,
    multi_indices,
    partial,
)

X, Y, T = sympy.symbols("x y t", real=True)
_SPACE = (X, Y)

# degree-9 smoothstep: C^4 at both ends
_SMOOTH_COEFFS = {5: 126, 6: -420, 7: 540, 8: -315, 9: 70}


class GeometryError(ValueError):
    """A configuration violates one of the weight-function conditions."""


def smoothstep(s):
    """C^4 ramp: 0 for ``s <= 0``, 1 for ``s >= 1``."""
    s = np.clip(np.asarray(s, dtype=float), 0.0, 1.0)
    return sum(c * s**k for k, c in _SMOOTH_COEFFS.items())


def _smoothstep_expr(s):
    return sum(c * s**k for k, c in _SMOOTH_COEFFS.items())


def _lambdify(expr, dim: int, with_t: bool = False):
    args = list(_SPACE[:dim]) + ([T] if with_t else [])
    fn = sympy.lambdify(args, expr, "numpy")

    def evaluate(*vals):
        return np.broadcast_to(np.asarray(fn(*vals), dtype=float), np.broadcast(*vals).shape)

    return evaluate


# ---------------------------------------------------------------------------
# geometry


@dataclass(frozen=True)
class CarlemanGeometry:
    grid: SpatialGrid
    tg: TimeGrid
    extended_grid: SpatialGrid
    d_expr: object = field(repr=False)
    d: np.ndarray = field(repr=False)
    d_max: float
    beta: float
    lam: float
    t0: float
    delta: float
    epsilon: float
    epsilon0: float
    mu: tuple[float, float, float]
    omega_mask: np.ndarray = field(repr=False)
    gamma_faces: tuple[str, ...]

    @cached_property
    def d_fn(self):
        return _lambdify(self.d_expr, self.grid.dim)

    @cached_property
    def d_grid(self) -> np.ndarray:
        """``d`` at the nodes of the closed physical domain."""
        return self.d_fn(*self.grid.coords)

    def psi(self, times: np.ndarray | None = None) -> np.ndarray:
        t = self.tg.times if times is None else np.asarray(times, dtype=float)
        return self.d_grid[None] - self.beta * ((t - self.t0) ** 2).reshape((-1,) + (1,) * self.grid.dim)

    def phi(self, times: np.ndarray | None = None) -> np.ndarray:
        return np.exp(self.lam * self.psi(times))

    @property
    def phi0(self) -> np.ndarray:
        return np.exp(self.lam * self.d_grid)

    def invariants(self) -> dict[str, bool]:
        """Each geometric condition evaluated separately."""
        ext = self.extended_grid
        inner = ext.interior_mask
        grad = np.sqrt(sum(partial(self.d_grid, self.grid, a) ** 2 for a in _unit_indices(self.grid.dim)))
        dm, b, dl = self.d_max, self.beta, self.delta
        return {
            "d_positive_in_extended_interior": bool(np.all(self.d[inner] > 0)),
            "d_zero_on_extended_boundary": bool(np.all(self.d[~inner] == 0)),
            "grad_d_nonzero_on_closure": bool(np.all(grad > 0)),
            "beta_in_interval": dm / (4 * dl**2) < b < dm / (3 * dl**2),
            "mu_positive": all(m > 0 for m in self.mu),
            "mu_increasing": self.mu[0] < self.mu[1] < self.mu[2],
            "omega_in_superlevel_set": bool(np.all(self.d_grid[self.omega_mask] > self.epsilon * dm)),
            "time_window_inside": 0 < self.t0 - 2 * dl and self.t0 + 2 * dl < self.tg.T,
        }


def _unit_indices(dim: int):
    return [tuple(int(i == j) for i in range(dim)) for j in range(dim)]


def build_weight(
    grid: SpatialGrid,
    tg: TimeGrid,
    lam: float = 1.0,
    epsilon: float = 0.5,
    delta: float | None = None,
    omega: np.ndarray | Sequence[Sequence[float]] | None = None,
    extension: float = 1.4,
    margin: float = 0.1,
) -> CarlemanGeometry:
    """Construct ``d``, ``beta`` and ``mu_1 < mu_2 < mu_3`` and validate them.

    Parameters
    ----------
    omega
        Node mask or box ``[(lo, hi), ...]`` of the interior sub-domain.  By
        default the nodes with ``d > (1 + epsilon)/2 * max d``.
    extension
        Length of the extension past ``gamma`` relative to the domain length
        along the normal axis (1.4 turns ``(0, 1)`` into ``(0, 2.4)``).
    margin
        2D only: relative padding of the extended domain across the
        tangential axis, which keeps ``|grad d| > 0`` at the corners.

    ``beta`` is the midpoint of ``(max d / (4 delta^2), max d / (3 delta^2))``.
    """
    if grid.dim == 2 and len(grid.gamma_faces) != 1:
        raise GeometryError("the 2D weight construction needs gamma to be a single edge")
    if lam <= 0:
        raise GeometryError(f"lambda must be positive, got {lam}")
    face = grid.gamma_faces[0]
    axis = "xy".index(face[0])
    lo, hi = grid.extents[axis]
    L0 = (1.0 + extension) * (hi - lo)
    var = _SPACE[axis]
    if face.endswith("hi"):
        ext_axis = (lo, lo + L0)
    else:
        ext_axis = (hi - L0, hi)
    p = (var - ext_axis[0]) * (ext_axis[1] - var)
    d_expr = p
    ext_extents = list(grid.extents)
    ext_extents[axis] = ext_axis
    d_max = (L0 / 2) ** 2
    if grid.dim == 2:
        other = 1 - axis
        olo, ohi = grid.extents[other]
        m = margin * (ohi - olo)
        ovar = _SPACE[other]
        half = (ohi - olo) / 2 + m
        q = (ovar - (olo - m)) * (ohi + m - ovar) / half**2
        d_expr = p * q
        ext_extents[other] = (olo - m, ohi + m)
    ext_cells = tuple(
        max(2, int(math.ceil((b - a) / h - 1e-9))) for (a, b), h in zip(ext_extents, grid.h)
    )
    extended = SpatialGrid(tuple(ext_extents), ext_cells, grid.gamma_faces)
    d_fn = _lambdify(d_expr, grid.dim)
    d_ext = d_fn(*extended.coords)

    delta = tg.delta if delta is None else float(delta)
    t0 = tg.t0
    if not (delta > 0 and t0 - 2 * delta > 0 and t0 + 2 * delta < tg.T):
        raise GeometryError(f"delta={delta} violates 0 < t0-2*delta < t0+2*delta < T")
    beta = 0.5 * (d_max / (4 * delta**2) + d_max / (3 * delta**2))
    if not 0 < epsilon < 1:
        raise GeometryError(f"epsilon must lie in (0, 1), got {epsilon}")
    mu = tuple(epsilon * (k / 3 * d_max - beta * delta**2) for k in (1, 2, 3))

    d_grid = d_fn(*grid.coords)
    if omega is None:
        omega_mask = d_grid > 0.5 * (1 + epsilon) * d_max
    elif np.asarray(omega).dtype == bool:
        omega_mask = np.asarray(omega, dtype=bool)
    else:
        omega_mask = grid.mask_from_box(omega)
    if omega_mask.shape != grid.shape or not omega_mask.any():
        raise GeometryError("omega must be a nonempty node mask of the grid")
    epsilon0 = float(d_grid[omega_mask].min() / d_max)
    if epsilon >= epsilon0:
        raise GeometryError(
            f"epsilon={epsilon} >= epsilon0={epsilon0:.6g}: omega is not inside {{d > epsilon max d}}"
        )
    geom = CarlemanGeometry(
        grid=grid,
        tg=tg,
        extended_grid=extended,
        d_expr=d_expr,
        d=d_ext,
        d_max=float(d_max),
        beta=float(beta),
        lam=float(lam),
        t0=t0,
        delta=delta,
        epsilon=float(epsilon),
        epsilon0=epsilon0,
        mu=mu,
        omega_mask=omega_mask,
        gamma_faces=grid.gamma_faces,
    )
    failed = [name for name, ok in geom.invariants().items() if not ok]
    if failed:
        raise GeometryError(f"weight conditions violated: {', '.join(failed)}")
    return geom


# ---------------------------------------------------------------------------
# level sets and cutoffs


@dataclass(frozen=True)
class LevelSetDomains:
    """Node masks ``Q_k``, ``Q_k^-`` (space-time) and ``Omega_k`` (at ``t0``), k = 1..3."""

    Q: np.ndarray
    Q_minus: np.ndarray
    Omega: np.ndarray

    def counts(self) -> dict:
        return {
            f"{name}{k + 1}": int(arr[k].sum())
            for name, arr in (("Q", self.Q), ("Q_minus", self.Q_minus), ("Omega", self.Omega))
            for k in range(3)
        }


def build_level_sets(geom: CarlemanGeometry) -> LevelSetDomains:
    """Evaluate ``{psi > mu_k}`` on the grid and check the nesting and inclusions."""
    tg = geom.tg
    psi = geom.psi()
    Q = np.stack([psi > m for m in geom.mu])
    t = tg.times.reshape((-1,) + (1,) * geom.grid.dim)
    Q_minus = Q & (t < geom.t0)[None]
    Omega = Q[:, tg.t0_index]
    for k in (0, 1):
        if np.any(Q[k + 1] & ~Q[k]):
            raise GeometryError(f"Q{k + 2} is not contained in Q{k + 1}")
        if np.any(Omega[k + 1] & ~Omega[k]):
            raise GeometryError(f"Omega{k + 2} is not contained in Omega{k + 1}")
    window = np.abs(tg.times - geom.t0) < math.sqrt(geom.epsilon) * geom.delta
    need = window.reshape((-1,) + (1,) * geom.grid.dim) & geom.omega_mask[None]
    if np.any(need & ~Q[2]):
        raise GeometryError("omega x (t0 - sqrt(eps) delta, t0 + sqrt(eps) delta) is not inside Q3")
    times_in_Q1 = np.broadcast_to(t, Q[0].shape)[Q[0]]
    if times_in_Q1.size and np.any(np.abs(times_in_Q1 - geom.t0) >= 2 * geom.delta):
        raise GeometryError("Q1 reaches outside (t0 - 2 delta, t0 + 2 delta)")
    return LevelSetDomains(Q, Q_minus, Omega)


@dataclass(frozen=True)
class Cutoff:
    """``chi`` (space-time) and ``chi_tilde`` (space) with exact derivative fields.

    ``chi_derivs`` is keyed by ``(alpha, k_t)``; ``chi_tilde_derivs`` by ``alpha``.
    """

    chi: np.ndarray
    chi_tilde: np.ndarray
    chi_derivs: dict = field(repr=False)
    chi_tilde_derivs: dict = field(repr=False)


def _cutoff_fields(expr_s, s_vals: np.ndarray, args: list, orders: list, dim: int, with_t: bool):
    """Value and derivatives of ``S(s(x, t))`` with the flat parts masked exactly."""
    S = _smoothstep_expr(expr_s)
    inside = (s_vals > 0) & (s_vals < 1)
    value = smoothstep(s_vals)
    derivs = {}
    for key in orders:
        alpha, kt = key if with_t else (key, 0)
        spec = []
        for var, k in zip(_SPACE[:dim], alpha):
            spec += [var] * k
        spec += [T] * kt
        if not spec:
            continue
        fn = _lambdify(sympy.diff(S, *spec), dim, with_t)
        vals = fn(*args)
        derivs[key] = np.where(inside, vals, 0.0)
    return value, derivs


def build_cutoffs(geom: CarlemanGeometry) -> Cutoff:
    """``chi = S((psi - mu1)/(mu2 - mu1))``, ``chi_tilde = S((d - mu1)/(mu2 - mu1))``.

    ``S`` is the C^4 smoothstep, so ``chi = 1`` where ``psi >= mu2`` and
    ``chi = 0`` where ``psi <= mu1``.  Derivatives: all spatial orders up to
    4, and mixed ``d_x^alpha d_t`` with ``|alpha| <= 2``; up to order 2 for
    ``chi_tilde``.
    """
    dim = geom.grid.dim
    m1, m2 = geom.mu[0], geom.mu[1]
    psi_expr = geom.d_expr - geom.beta * (T - geom.t0) ** 2
    s_chi = (psi_expr - m1) / (m2 - m1)
    s_til = (geom.d_expr - m1) / (m2 - m1)
    st_args = [c[None] for c in geom.grid.coords] + [geom.tg.times.reshape((-1,) + (1,) * dim)]
    s_vals = (geom.psi() - m1) / (m2 - m1)
    orders = [(a, 0) for a in multi_indices(dim, 4)] + [(a, 1) for a in multi_indices(dim, 2)]
    chi, chi_d = _cutoff_fields(s_chi, s_vals, st_args, orders, dim, True)
    s_til_vals = (geom.d_grid - m1) / (m2 - m1)
    chi_t, chi_t_d = _cutoff_fields(
        s_til, s_til_vals, list(geom.grid.coords), list(multi_indices(dim, 2)), dim, False
    )
    return Cutoff(chi, chi_t, chi_d, chi_t_d)


# ---------------------------------------------------------------------------
# inequality checkers


@dataclass(frozen=True)
class RatioReport:
    """Both sides of a weighted inequality over an ``s`` sweep.

    ``lhs`` and ``residual`` are scaled by ``exp(-log_scale)`` per ``s``;
    ``ratio = lhs / residual`` is unaffected by the scaling.
    """

    kind: str
    lam: float
    s_values: np.ndarray
    lhs: np.ndarray
    residual: np.ndarray
    ratio: np.ndarray
    log_scale: np.ndarray
    boundary_term: float
    status: str
    slack: float = 0.5

    @property
    def s_star(self) -> float | None:
        """Smallest sweep value from which the ratio never grows beyond the slack."""
        r = self.ratio
        if not np.all(np.isfinite(r)):
            return None
        ok = r[1:] <= (1 + self.slack) * r[:-1]
        for k in range(len(r)):
            if np.all(ok[k:]):
                return float(self.s_values[k])
        return None

    @property
    def tail_constant(self) -> float:
        half = len(self.ratio) // 2
        return float(np.max(self.ratio[half:]))

    def tail_nonincreasing(self, points: int = 3) -> bool:
        r = self.ratio[-points:]
        return bool(np.all(np.isfinite(r)) and np.all(r[1:] <= (1 + self.slack) * r[:-1]))

    @property
    def unbounded_growth(self) -> bool:
        r = self.ratio[-3:]
        return bool(np.all(r[1:] > (1 + self.slack) * r[:-1]))

    def rows(self) -> list[dict]:
        return [
            {
                "s": float(s),
                "lambda": self.lam,
                "lhs": float(l),
                "residual_term": float(r),
                "ratio": float(q),
                "boundary_term": self.boundary_term,
                "log_scale": float(ls),
            }
            for s, l, r, q, ls in zip(self.s_values, self.lhs, self.residual, self.ratio, self.log_scale)
        ]


def _region_weights(grid: SpatialGrid, tg: TimeGrid | None, mask: np.ndarray) -> np.ndarray:
    w = grid.quadrature_weights
    if tg is not None:
        wt = np.full(tg.n_steps + 1, tg.dt)
        wt[[0, -1]] = tg.dt / 2
        w = wt.reshape((-1,) + (1,) * grid.dim) * w[None]
    return w * mask


def _boundary_term(integrand: np.ndarray, mask: np.ndarray, weights: np.ndarray, h: float) -> float:
    """Unweighted surface integral over the discrete boundary layer of ``mask``."""
    if not mask.any():
        return 0.0
    inner = ndimage.binary_erosion(mask, structure=np.ones((3,) * mask.ndim), border_value=0)
    edge = mask & ~inner
    return float(np.sum(integrand[edge] * weights[edge]) / h)


def _sweep(kind, blocks, residual_sq, two_phi, weights, s_values, lam, boundary_term, slack):
    """Evaluate ``sum_b coef_b(s) * int block_b e^{2 s phi}`` against the residual."""
    sel = weights > 0
    w = weights[sel]
    e = two_phi[sel]
    res_sq = residual_sq[sel]
    blk = [(coef, b[sel]) for coef, b in blocks]
    # shift by the largest exponent where something is integrated
    support = (res_sq > 0) | np.any([b != 0 for _, b in blk], axis=0)
    e_max = float(e[support].max()) if support.any() else 0.0
    lhs, rhs, shift = [], [], []
    for s in s_values:
        E = s * e
        m = s * e_max
        we = w * np.exp(np.minimum(E - m, 0.0))
        lhs.append(sum(coef(s) * float(np.dot(b, we)) for coef, b in blk))
        rhs.append(float(np.dot(res_sq, we)))
        shift.append(m)
    lhs = np.array(lhs)
    rhs = np.array(rhs)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(rhs > 0, lhs / np.where(rhs > 0, rhs, 1.0), np.nan)
    if np.all(lhs == 0) and np.all(rhs == 0):
        status = "undefined"
    elif np.any((rhs == 0) & (lhs > 0)):
        status = "violation_candidate"
        ratio = np.where((rhs == 0) & (lhs > 0), np.inf, ratio)
    else:
        status = "ok"
    return RatioReport(kind, float(lam), np.asarray(s_values, dtype=float), lhs, rhs, ratio, np.array(shift),
                       boundary_term, status, slack)


def _hessian_sq(v, grid, offset):
    total = 0.0
    for i in range(grid.dim):
        for j in range(grid.dim):
            alpha = [0] * grid.dim
            alpha[i] += 1
            alpha[j] += 1
            total = total + partial(v, grid, alpha, offset) ** 2
    return total


def _grad_sq(v, grid, offset):
    return sum(partial(v, grid, a, offset) ** 2 for a in _unit_indices(grid.dim))


def check_parabolic_carleman(
    v: np.ndarray,
    geom: CarlemanGeometry,
    Lop: EllipticOperator,
    coeffs: EquationCoefficients,
    s_sweep: Sequence[float],
    levels: LevelSetDomains | None = None,
    lam: float | None = None,
    slack: float = 0.5,
) -> RatioReport:
    """Ratio of the weighted ``H^{2,1}`` norm of ``v`` to ``|(rho1 d_t - L) v|^2`` over ``Q1``.

    Left side: ``s^-1 (|v_t|^2 + sum |d_ij v|^2) + s lam^2 |grad v|^2 + s^3 lam^4 |v|^2``.
    """
    grid, tg = geom.grid, geom.tg
    lam = geom.lam if lam is None else lam
    levels = levels or build_level_sets(geom)
    mask = levels.Q[0]
    v = np.asarray(v, dtype=float)
    vt = time_derivative(v, tg.dt)
    grad = _grad_sq(v, grid, 1)
    blocks = [
        (lambda s: 1.0 / s, vt**2 + _hessian_sq(v, grid, 1)),
        (lambda s: s * lam**2, grad),
        (lambda s: s**3 * lam**4, v**2),
    ]
    Pv = coeffs.rho1 * vt - Lop.apply(v)
    weights = _region_weights(grid, tg, mask)
    two_phi = 2.0 * np.exp(lam * geom.psi())
    bterm = _boundary_term(grad + vt**2 + v**2, mask, weights, min(min(grid.h), tg.dt))
    return _sweep("parabolic", blocks, Pv**2, two_phi, weights, s_sweep, lam, bterm, slack)


def check_elliptic_carleman(
    v: np.ndarray,
    geom: CarlemanGeometry,
    Lop_tilde: EllipticOperator,
    s_sweep: Sequence[float],
    levels: LevelSetDomains | None = None,
    lam: float | None = None,
    slack: float = 0.5,
) -> RatioReport:
    """Ratio of ``s^-1 sum |d_ij v|^2 + s lam^2 |grad v|^2 + s^3 lam^4 |v|^2`` to ``|L v|^2``.

    Weighted by ``exp(2 s exp(lam d))`` over ``Omega_1``.
    """
    grid = geom.grid
    lam = geom.lam if lam is None else lam
    levels = levels or build_level_sets(geom)
    mask = levels.Omega[0]
    v = np.asarray(v, dtype=float)
    grad = _grad_sq(v, grid, 0)
    blocks = [
        (lambda s: 1.0 / s, _hessian_sq(v, grid, 0)),
        (lambda s: s * lam**2, grad),
        (lambda s: s**3 * lam**4, v**2),
    ]
    Lv = Lop_tilde.apply(v)
    weights = _region_weights(grid, None, mask)
    two_phi = 2.0 * np.exp(lam * geom.d_grid)
    bterm = _boundary_term(grad + v**2, mask, weights, min(grid.h))
    return _sweep("elliptic", blocks, Lv**2, two_phi, weights, s_sweep, lam, bterm, slack)


def reduced_operator(u: np.ndarray, Lop: EllipticOperator, coeffs: EquationCoefficients, dt: float) -> np.ndarray:
    """``rho2^2 u_t - (rho1 d_t - L)^2 u`` evaluated as two first-order applications."""
    ut = time_derivative(u, dt)
    w = coeffs.rho1 * ut - Lop.apply(u)
    return coeffs.rho2**2 * ut - (coeffs.rho1 * time_derivative(w, dt) - Lop.apply(w))


def check_combined_carleman(
    u: np.ndarray,
    geom: CarlemanGeometry,
    Lop: EllipticOperator,
    coeffs: EquationCoefficients,
    s_sweep: Sequence[float],
    levels: LevelSetDomains | None = None,
    lam: float | None = None,
    slack: float = 0.5,
) -> RatioReport:
    """Weighted estimate for the reduced fourth-order operator over ``Q1``.

    Left side blocks: ``s^-2 (|u_tt|^2 + sum |d_t d_ij u|^2)``,
    ``lam^2 |grad u_t|^2``, ``s^2 lam^4 (|u_t|^2 + sum |d_ij u|^2)``,
    ``s^4 lam^6 |grad u|^2`` and ``s^6 lam^8 |u|^2``.
    """
    grid, tg = geom.grid, geom.tg
    lam = geom.lam if lam is None else lam
    levels = levels or build_level_sets(geom)
    mask = levels.Q[0]
    u = np.asarray(u, dtype=float)
    dt = tg.dt
    ut = time_derivative(u, dt)
    utt = time_derivative(ut, dt)
    grad = _grad_sq(u, grid, 1)
    blocks = [
        (lambda s: s**-2.0, utt**2 + _hessian_sq(ut, grid, 1)),
        (lambda s: lam**2, _grad_sq(ut, grid, 1)),
        (lambda s: s**2 * lam**4, ut**2 + _hessian_sq(u, grid, 1)),
        (lambda s: s**4 * lam**6, grad),
        (lambda s: s**6 * lam**8, u**2),
    ]
    Pu = reduced_operator(u, Lop, coeffs, dt)
    weights = _region_weights(grid, tg, mask)
    two_phi = 2.0 * np.exp(lam * geom.psi())
    w = coeffs.rho1 * ut - Lop.apply(u)
    integrand = (
        _grad_sq(w, grid, 1) + time_derivative(w, dt) ** 2 + w**2
        + _grad_sq(ut, grid, 1) + grad + utt**2 + ut**2 + u**2
    )
    bterm = _boundary_term(integrand, mask, weights, min(min(grid.h), dt))
    return _sweep("combined", blocks, Pu**2, two_phi, weights, s_sweep, lam, bterm, slack)


# ---------------------------------------------------------------------------
# test fields


def interior_bump(geom: CarlemanGeometry, inset: float = 0.1, width: float = 0.25) -> np.ndarray:
    """C^4 spatial factor vanishing within ``inset`` of every face of the domain.

    Combined with ``chi`` this gives fields compactly supported inside ``Q1``
    and away from ``gamma``.
    """
    bump = np.ones(geom.grid.shape)
    for c, (lo, hi) in zip(geom.grid.coords, geom.grid.extents):
        L = hi - lo
        a, b = lo + inset * L, hi - inset * L
        bump = bump * smoothstep((c - a) / (width * L)) * smoothstep((b - c) / (width * L))
    return bump


def random_space_time_field(geom: CarlemanGeometry, cutoff: Cutoff, rng: np.random.Generator, modes: int = 3) -> np.ndarray:
    """``chi * bump * (random trigonometric polynomial in x times quadratic in t)``."""
    grid, tg = geom.grid, geom.tg
    spatial = np.ones(grid.shape)
    for c, (lo, hi) in zip(grid.coords, grid.extents):
        z = (c - lo) / (hi - lo)
        spatial = spatial * (1.0 + sum(rng.normal() * np.sin((k + 1) * np.pi * z) / (k + 1) for k in range(modes)))
    tau = (tg.times - geom.t0).reshape((-1,) + (1,) * grid.dim)
    temporal = 1.0 + rng.normal() * tau + rng.normal() * tau**2
    return cutoff.chi * interior_bump(geom)[None] * spatial[None] * temporal


def random_space_field(geom: CarlemanGeometry, cutoff: Cutoff, rng: np.random.Generator, modes: int = 3) -> np.ndarray:
    """``chi_tilde * bump * random trigonometric polynomial``."""
    grid = geom.grid
    spatial = np.ones(grid.shape)
    for c, (lo, hi) in zip(grid.coords, grid.extents):
        z = (c - lo) / (hi - lo)
        spatial = spatial * (1.0 + sum(rng.normal() * np.sin((k + 1) * np.pi * z) / (k + 1) for k in range(modes)))
    return cutoff.chi_tilde * interior_bump(geom) * spatial
