"""Reconstruction of ``f`` in ``g = f(x) R(x, t)`` from the snapshot ``u(., t0)``.

The source-to-snapshot map is linear in ``f``.  It is discretized on a
cubic B-spline basis and inverted by Tikhonov regularization with a
discrete ``H^2`` penalty; the parameter is fixed or chosen by the discrepancy
principle.  A Landweber iteration with the same interface is also available.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.interpolate import BSpline, RegularGridInterpolator

from .forward import SourceSpec, evaluate_space_time, solve_forward, solve_forward_batch
from .grid import (
    EllipticOperator,
    EquationCoefficients,
    Field,
    SpatialGrid,
    TimeGrid,
    assemble_elliptic,
    discrete_sobolev_norm,
    multi_indices,
    partial,
)

log = logging.getLogger(__name__)


class HypothesisError(ValueError):
    """``R(., t0)`` is not bounded away from zero where ``f`` is sought."""


class DiscrepancyWarning(UserWarning):
    """The discrepancy principle cannot be met on the searched range of ``alpha``."""


# ---------------------------------------------------------------------------
# basis


def _bspline_matrix(axis: np.ndarray, lo: float, hi: float, n: int) -> np.ndarray:
    """Values of ``n`` uniform cubic B-splines covering ``[lo, hi]`` at ``axis``."""
    if n < 1:
        raise ValueError("basis_size must be positive")
    if n < 4:
        # too few for a full cubic partition: centered single splines
        width = (hi - lo) / (n + 1)
        centers = lo + width * np.arange(1, n + 1)
        cols = []
        for c in centers:
            knots = c + width * np.array([-2.0, -1.0, 0.0, 1.0, 2.0]) * 0.5
            cols.append(np.nan_to_num(BSpline.basis_element(knots, extrapolate=False)(axis)))
        return np.stack(cols, axis=1)
    H = (hi - lo) / (n - 3)
    knots = lo + H * (np.arange(n + 4) - 3.0)
    return BSpline.design_matrix(np.clip(axis, lo, hi), knots, 3).toarray()


def bspline_basis(grid: SpatialGrid, basis_size: int) -> np.ndarray:
    """Tensor-product cubic B-splines, ``basis_size`` per axis; shape ``(grid.size, nb)``."""
    mats = [_bspline_matrix(ax, lo, hi, basis_size) for ax, (lo, hi) in zip(grid.axes, grid.extents)]
    B = mats[0]
    for M in mats[1:]:
        B = np.einsum("ia,jb->ijab", B, M).reshape(B.shape[0] * M.shape[0], -1)
    return B


def h2_gram(grid: SpatialGrid, B: np.ndarray, region: np.ndarray | None = None) -> np.ndarray:
    """Gram matrix of the discrete ``H^2`` norm on the columns of ``B``."""
    w = grid.quadrature_weights if region is None else grid.quadrature_weights * region
    cols = B.T.reshape((B.shape[1],) + grid.shape)
    G = np.zeros((B.shape[1], B.shape[1]))
    for alpha in multi_indices(grid.dim, 2):
        P = partial(cols, grid, alpha, offset=1).reshape(B.shape[1], -1)
        G += (P * w.ravel()) @ P.T
    return 0.5 * (G + G.T)


# ---------------------------------------------------------------------------
# observation map


@dataclass(frozen=True)
class ObservationMap:
    """Dense matrix from basis coefficients of ``f`` to ``u(., t0)`` at all nodes."""

    matrix: np.ndarray
    basis: np.ndarray = field(repr=False)
    basis_size: int
    coeffs: EquationCoefficients
    Lop: EllipticOperator = field(repr=False)
    R: np.ndarray = field(repr=False)
    tg: TimeGrid
    r_min: float
    scheme: str = "bdf2"

    @property
    def grid(self) -> SpatialGrid:
        return self.Lop.grid

    def apply(self, c: np.ndarray) -> np.ndarray:
        return (self.matrix @ np.asarray(c, dtype=float)).reshape(self.grid.shape)

    def f_values(self, c: np.ndarray) -> np.ndarray:
        return (self.basis @ np.asarray(c, dtype=float)).reshape(self.grid.shape)

    def project(self, f: np.ndarray) -> np.ndarray:
        """Least-squares basis coefficients of nodal values ``f``."""
        return np.linalg.lstsq(self.basis, np.asarray(f, dtype=float).ravel(), rcond=None)[0]

    def solve_column(self, j: int) -> np.ndarray:
        src = SourceSpec(f=self.basis[:, j].reshape(self.grid.shape), R=self.R)
        rep = solve_forward(self.coeffs, self.Lop, src, self.tg, self.scheme, n_last=self.tg.t0_index)
        return rep.solution.values[self.tg.t0_index]

    def verify_columns(self, samples: int = 3, seed: int = 0) -> float:
        """Largest relative deviation of sampled columns from fresh single solves."""
        rng = np.random.default_rng(seed)
        worst = 0.0
        for j in rng.choice(self.matrix.shape[1], size=min(samples, self.matrix.shape[1]), replace=False):
            col = self.matrix[:, j]
            fresh = self.solve_column(int(j)).ravel()
            worst = max(worst, float(np.abs(col - fresh).max() / max(np.abs(fresh).max(), 1e-300)))
        return worst

    def check_additivity(self, seed: int = 0) -> float:
        rng = np.random.default_rng(seed)
        c1, c2 = rng.normal(size=(2, self.matrix.shape[1]))
        lhs = self.apply(c1 + c2)
        return float(np.abs(lhs - self.apply(c1) - self.apply(c2)).max() / max(np.abs(lhs).max(), 1e-300))

    def condition_number(self) -> float:
        return float(np.linalg.cond(self.matrix[self.Lop.interior_index]))


def assemble_observation_map(
    coeffs: EquationCoefficients,
    Lop: EllipticOperator,
    R,
    tg: TimeGrid,
    basis_size: int,
    force: bool = False,
    r_tol: float = 1e-6,
    scheme: str = "bdf2",
    workers: int = 1,
) -> ObservationMap:
    """Assemble the map column by column from independent forward solves.

    ``R`` is a space-time array or callable ``R(t, x[, y])``.  The check
    ``min |R(x, t0)| > r_tol * max |R(x, t0)|`` runs over interior nodes; a
    violation raises :class:`HypothesisError` unless ``force`` is set.
    """
    grid = Lop.grid
    Rv = evaluate_space_time(R, grid, tg)
    r0 = np.abs(Rv[tg.t0_index][grid.interior_mask])
    r_min = float(r0.min())
    if not r_min > r_tol * max(float(r0.max()), 1e-300):
        msg = f"|R(x, t0)| is not bounded away from zero (min {r_min:.3g} over interior nodes)"
        if not force:
            raise HypothesisError(msg)
        log.warning("%s; assembling anyway", msg)
    if basis_size > int(grid.interior_mask.sum()):
        raise ValueError("basis_size exceeds the number of interior nodes")
    B = bspline_basis(grid, basis_size)
    sources = [SourceSpec(f=B[:, j].reshape(grid.shape), R=Rv) for j in range(B.shape[1])]
    snaps = solve_forward_batch(coeffs, Lop, sources, tg, scheme, workers=workers)
    A = np.stack([s.ravel() for s in snaps], axis=1)
    return ObservationMap(A, B, basis_size, coeffs, Lop, Rv, tg, r_min, scheme)


def _interpolate_operator(Lop: EllipticOperator, fine: SpatialGrid) -> EllipticOperator:
    def interp(arr):
        if np.all(arr == arr.flat[0]):
            return np.full(fine.shape, float(arr.flat[0]))
        return RegularGridInterpolator(Lop.grid.axes, arr)(np.stack([c.ravel() for c in fine.coords], -1)).reshape(fine.shape)

    dim = Lop.grid.dim
    a = np.stack([np.stack([interp(Lop.a[i, j]) for j in range(dim)]) for i in range(dim)])
    b = np.stack([interp(Lop.b[j]) for j in range(dim)])
    return assemble_elliptic(fine, a, b, interp(Lop.c), Lop.m)


def synthesize_data(
    coeffs: EquationCoefficients,
    Lop: EllipticOperator,
    f: Callable,
    R: Callable,
    tg: TimeGrid,
    refine: int = 2,
    operator_factory: Callable[[SpatialGrid], EllipticOperator] | None = None,
    scheme: str = "bdf2",
) -> np.ndarray:
    """``u(., t0)`` on ``Lop.grid`` from a solve on a ``refine``-times finer grid.

    Refinement applies in space and time, so the data do not share the
    discretization of the observation map.  Coefficients are interpolated
    to the fine grid unless ``operator_factory`` builds the operator.
    """
    grid = Lop.grid
    if refine == 1:
        fine_L, fine_tg = Lop, tg
    else:
        fine = grid.refined(refine)
        fine_L = operator_factory(fine) if operator_factory else _interpolate_operator(Lop, fine)
        fine_tg = tg.refined(refine)
    rep = solve_forward(coeffs, fine_L, SourceSpec(f=f, R=R), fine_tg, scheme, n_last=fine_tg.t0_index)
    snap = rep.solution.values[fine_tg.t0_index]
    return snap[tuple(slice(None, None, refine) for _ in range(grid.dim))].copy()


# ---------------------------------------------------------------------------
# reconstruction


@dataclass(frozen=True)
class ReconstructionResult:
    f_hat: Field
    coefficients: np.ndarray
    alpha: float
    misfit: float
    seminorm: float
    status: str
    normal_residual: float
    iterations: int = 0


class _Tikhonov:
    """Weighted Tikhonov problem with cached factorizations."""

    def __init__(self, omap: ObservationMap, observe: np.ndarray | None, penalty: np.ndarray):
        grid = omap.grid
        mask = grid.interior_mask if observe is None else np.asarray(observe, bool) & grid.interior_mask
        self.sel = np.flatnonzero(mask.ravel())
        self.sw = np.sqrt(grid.quadrature_weights.ravel()[self.sel])
        self.A = omap.matrix[self.sel] * self.sw[:, None]
        # alpha is measured relative to the trace ratio of the two quadratic forms
        self.scale = float(np.sum(self.A**2) / max(np.trace(penalty), 1e-300))
        lam, V = np.linalg.eigh(penalty)
        lam = np.clip(lam, 0.0, None)
        self.S = np.sqrt(lam)[:, None] * V.T
        self.G = penalty

    def rhs(self, data: np.ndarray) -> np.ndarray:
        return np.asarray(data, dtype=float).ravel()[self.sel] * self.sw

    def solve(self, b: np.ndarray, alpha: float) -> np.ndarray:
        K = np.vstack([self.A, math.sqrt(alpha * self.scale) * self.S])
        rhs = np.concatenate([b, np.zeros(self.S.shape[0])])
        return np.linalg.lstsq(K, rhs, rcond=None)[0]

    def misfit(self, c: np.ndarray, b: np.ndarray) -> float:
        return float(np.linalg.norm(self.A @ c - b))

    def normal_residual(self, c: np.ndarray, b: np.ndarray, alpha: float) -> float:
        lhs = self.A.T @ (self.A @ c) + alpha * self.scale * (self.G @ c)
        rhs = self.A.T @ b
        return float(np.linalg.norm(lhs - rhs) / max(np.linalg.norm(rhs), 1e-300))


def reconstruct(
    omap: ObservationMap,
    data: np.ndarray,
    alpha: float | str = "auto",
    noise_level: float | None = None,
    observe: np.ndarray | None = None,
    M: float | None = None,
    method: str = "tikhonov",
    tau: float = 1.0,
    alpha_range: tuple[float, float] = (1e-20, 1e2),
) -> ReconstructionResult:
    """Minimize ``|A c - data|^2 + alpha * s * |B c|^2_{H^2}``.

    ``s = trace(A^T W A) / trace(G)`` makes ``alpha`` dimensionless, so its
    meaning does not depend on the grid or on the size of ``R``.

    Parameters
    ----------
    data
        Nodal snapshot ``u(., t0)``; only interior nodes of ``observe``
        (default: the whole domain) enter the misfit, with trapezoidal weights.
    alpha
        Positive number or ``"auto"``.  ``"auto"`` needs ``noise_level``, the
        weighted L^2 norm of the data error, and picks ``alpha`` with
        ``misfit = tau * noise_level`` by bisection in ``log(alpha)``.
    M
        Optional a-priori bound; exceeding it is logged.
    method
        ``"tikhonov"`` or ``"landweber"`` (early stopping by the discrepancy
        principle, or ``int(1/alpha)`` iterations for fixed ``alpha``).
    """
    grid = omap.grid
    penalty = h2_gram(grid, omap.basis)
    prob = _Tikhonov(omap, observe, penalty)
    b = prob.rhs(data)
    auto = isinstance(alpha, str)
    if auto and alpha != "auto":
        raise ValueError(f"alpha must be positive or 'auto', got {alpha!r}")
    if auto and (noise_level is None or noise_level < 0):
        raise ValueError("automatic alpha needs a nonnegative noise_level")
    if not auto and not alpha > 0:
        raise ValueError("alpha must be > 0; the unregularized normal equations are numerically singular")
    target = tau * noise_level if auto else None

    if method == "landweber":
        c, its, status = _landweber(prob, b, target, None if auto else int(max(1, round(1 / alpha))))
        a_used = float("nan")
        nres = float("nan")
    elif method == "tikhonov":
        its = 0
        if not auto:
            a_used, status = float(alpha), "fixed"
        else:
            a_used, status = _morozov(prob, b, target, alpha_range)
        c = prob.solve(b, a_used)
        nres = prob.normal_residual(c, b, a_used)
    else:
        raise ValueError(f"unknown method {method!r}")

    f_hat = omap.f_values(c)
    semi = float(math.sqrt(max(c @ penalty @ c, 0.0)))
    if M is not None and semi > M:
        log.warning("reconstruction H2 norm %.3g exceeds the prior bound M=%.3g", semi, M)
    return ReconstructionResult(Field(grid, f_hat), c, a_used, prob.misfit(c, b), semi, status, nres, its)


def _morozov(prob: _Tikhonov, b: np.ndarray, target: float, alpha_range) -> tuple[float, str]:
    lo, hi = math.log(alpha_range[0]), math.log(alpha_range[1])

    def gap(la):
        return prob.misfit(prob.solve(b, math.exp(la)), b) - target

    g_lo, g_hi = gap(lo), gap(hi)
    if g_lo > 0:
        warnings.warn(f"discrepancy principle unattainable; using alpha={alpha_range[0]:.1e}", DiscrepancyWarning)
        return alpha_range[0], "unattainable"
    if g_hi < 0:
        return alpha_range[1], "saturated"
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if gap(mid) > 0:
            hi = mid
        else:
            lo = mid
        if hi - lo < 1e-3:
            break
    return math.exp(0.5 * (lo + hi)), "converged"


def _landweber(prob: _Tikhonov, b: np.ndarray, target: float | None, n_iter: int | None):
    A = prob.A
    step = 1.0 / np.linalg.norm(A, 2) ** 2
    c = np.zeros(A.shape[1])
    limit = n_iter if n_iter is not None else 100000
    for k in range(1, limit + 1):
        r = A @ c - b
        if target is not None and np.linalg.norm(r) <= target:
            return c, k - 1, "converged"
        c = c - step * (A.T @ r)
    status = "fixed" if n_iter is not None else "max_iterations"
    return c, limit, status


# ---------------------------------------------------------------------------
# stability experiment


@dataclass(frozen=True)
class StabilityExperimentReport:
    """Per-trial records and the log-log fit ``err ~ C_hat * perturbation^kappa_hat``."""

    rows: list = field(repr=False)
    kappa_hat: float
    C_hat: float
    r_squared: float
    M: float
    f_true_h2: float
    representation_error: float

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        cols = ["noise_level", "trial", "data_norm_h4", "err_h2_omega", "alpha", "kappa_hat_running"]
        writer.writerow(cols)
        for r in self.rows:
            writer.writerow([repr(float(r[c])) if c != "trial" else r[c] for c in cols])
        return buf.getvalue()


def fit_power_law(x: np.ndarray, y: np.ndarray) -> tuple[float, float, float]:
    """Slope, ``sup y / x^slope`` and R^2 of a least-squares fit of ``log y`` on ``log x``."""
    lx, ly = np.log(x), np.log(y)
    slope, icept = np.polyfit(lx, ly, 1)
    pred = slope * lx + icept
    ss_res = float(np.sum((ly - pred) ** 2))
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    C = float(np.max(y / x**slope))
    return float(slope), C, r2


def stability_experiment(
    omap: ObservationMap,
    f_true: np.ndarray,
    noise_levels: Sequence[float],
    trials: int,
    seed: int,
    M: float | None = None,
    omega: np.ndarray | None = None,
    tau: float = 1.0,
    workers: int = 1,
) -> StabilityExperimentReport:
    """Noise sweep on clean data ``A c_true`` with ``c_true`` the projection of ``f_true``.

    Each perturbation is Gaussian white noise rescaled so that its discrete
    ``H^4`` norm equals ``level * |clean|_{H^4}``.  Errors are measured in
    the discrete ``H^2(omega)`` norm against the projected source.  Every
    (level, trial) pair draws from its own child of ``SeedSequence(seed)``,
    so results do not depend on scheduling.
    """
    levels = [float(v) for v in noise_levels]
    if len(levels) < 3:
        raise ValueError("the fit needs at least 3 noise levels")
    if any(v < 0 for v in levels):
        raise ValueError("noise levels must be nonnegative")
    grid = omap.grid
    omega = default_omega(grid) if omega is None else np.asarray(omega, dtype=bool)
    f_true = grid.evaluate(f_true)
    f_h2 = discrete_sobolev_norm(f_true, grid, 2)
    if M is None:
        M = 2.0 * f_h2
    if f_h2 > M:
        raise ValueError(f"|f_true|_H2 = {f_h2:.4g} exceeds the prior bound M = {M:.4g}")
    c_true = omap.project(f_true)
    f_ref = omap.f_values(c_true)
    rep_err = discrete_sobolev_norm(f_true - f_ref, grid, 2, omega) / discrete_sobolev_norm(f_true, grid, 2, omega)
    clean = omap.apply(c_true)
    clean_h4 = discrete_sobolev_norm(clean, grid, 4)
    interior = grid.interior_mask
    qw = grid.quadrature_weights
    children = np.random.SeedSequence(seed).spawn(len(levels) * trials)

    def run(k):
        li, trial = divmod(k, trials)
        level = levels[li]
        rng = np.random.default_rng(children[k])
        noise = np.where(interior, rng.standard_normal(grid.shape), 0.0)
        if level > 0:
            noise *= level * clean_h4 / discrete_sobolev_norm(noise, grid, 4)
        else:
            noise[:] = 0.0
        pert = discrete_sobolev_norm(noise, grid, 4)
        l2 = math.sqrt(float(np.sum(qw * interior * noise**2)))
        res = reconstruct(omap, clean + noise, "auto", noise_level=l2, tau=tau, M=M)
        err = discrete_sobolev_norm(res.f_hat.values - f_ref, grid, 2, omega)
        return {"noise_level": level, "trial": trial, "data_norm_h4": pert, "err_h2_omega": err, "alpha": res.alpha}

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DiscrepancyWarning)
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                rows = list(pool.map(run, range(len(levels) * trials)))
        else:
            rows = [run(k) for k in range(len(levels) * trials)]

    for i, r in enumerate(rows):
        pts = [q for q in rows[: i + 1] if q["noise_level"] > 0 and q["err_h2_omega"] > 0]
        if len({q["noise_level"] for q in pts}) >= 3:
            r["kappa_hat_running"] = fit_power_law(
                np.array([q["data_norm_h4"] for q in pts]), np.array([q["err_h2_omega"] for q in pts])
            )[0]
        else:
            r["kappa_hat_running"] = float("nan")
    fit = [r for r in rows if r["noise_level"] > 0 and r["err_h2_omega"] > 0]
    if len({r["noise_level"] for r in fit}) < 3:
        raise ValueError("fewer than 3 positive noise levels remain for the fit")
    kappa, C, r2 = fit_power_law(
        np.array([r["data_norm_h4"] for r in fit]), np.array([r["err_h2_omega"] for r in fit])
    )
    return StabilityExperimentReport(rows, kappa, C, r2, float(M), f_h2, float(rep_err))


def default_omega(grid: SpatialGrid) -> np.ndarray:
    """Middle half of the domain along every axis."""
    box = [(lo + 0.25 * (hi - lo), hi - 0.25 * (hi - lo)) for lo, hi in grid.extents]
    return grid.mask_from_box(box)


def relative_h2_error(f_hat: np.ndarray, f_true: np.ndarray, grid: SpatialGrid, omega: np.ndarray | None = None) -> float:
    omega = default_omega(grid) if omega is None else omega
    return discrete_sobolev_norm(f_hat - f_true, grid, 2, omega) / discrete_sobolev_norm(f_true, grid, 2, omega)
