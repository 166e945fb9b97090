"""Structured grids, grid functions, discrete Sobolev norms and the elliptic operator.

Spatial domains are 1D intervals or 2D rectangles discretized by uniform
tensor-product grids with nodes on the boundary.  Arrays carry the spatial
axes in ``(x, y)`` order; space-time arrays put time first.
"""

from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from pathlib import Path
from typing import Callable, Sequence, Union

import numpy as np
import scipy.sparse as sp

FACES_1D = ("x_lo", "x_hi")
FACES_2D = ("x_lo", "x_hi", "y_lo", "y_hi")

Coefficient = Union[float, np.ndarray, Callable[..., np.ndarray]]


class GridError(ValueError):
    """Raised for inconsistent grids, fields or operator coefficients."""


# ---------------------------------------------------------------------------
# grids


@dataclass(frozen=True)
class SpatialGrid:
    """Uniform tensor-product grid on an interval or a rectangle.

    Parameters
    ----------
    extents : sequence of (lo, hi)
        One interval per axis.
    n_cells : sequence of int
        Number of cells per axis; there are ``n_cells + 1`` nodes per axis.
    gamma_faces : sequence of str
        Boundary faces forming the observable sub-boundary. Faces are named
        ``x_lo``, ``x_hi`` (and ``y_lo``, ``y_hi`` in 2D).
    """

    extents: tuple[tuple[float, float], ...]
    n_cells: tuple[int, ...]
    gamma_faces: tuple[str, ...] = ("x_hi",)

    def __post_init__(self):
        ext = tuple((float(lo), float(hi)) for lo, hi in self.extents)
        cells = tuple(int(n) for n in self.n_cells)
        object.__setattr__(self, "extents", ext)
        object.__setattr__(self, "n_cells", cells)
        object.__setattr__(self, "gamma_faces", tuple(self.gamma_faces))
        if len(ext) not in (1, 2):
            raise GridError(f"dim must be 1 or 2, got {len(ext)}")
        if len(cells) != len(ext):
            raise GridError("extents and n_cells must have the same length")
        for (lo, hi), n in zip(ext, cells):
            if not hi > lo:
                raise GridError(f"empty interval [{lo}, {hi}]")
            if n < 2:
                raise GridError(f"need at least 2 cells per axis, got {n}")
        faces = FACES_1D if len(ext) == 1 else FACES_2D
        if not self.gamma_faces:
            raise GridError("gamma must contain at least one boundary face")
        for f in self.gamma_faces:
            if f not in faces:
                raise GridError(f"unknown boundary face {f!r}; expected one of {faces}")

    @classmethod
    def interval(cls, lo: float, hi: float, n_cells: int, gamma: str = "x_hi") -> SpatialGrid:
        return cls(((lo, hi),), (n_cells,), (gamma,))

    @property
    def dim(self) -> int:
        return len(self.extents)

    @property
    def h(self) -> tuple[float, ...]:
        return tuple((hi - lo) / n for (lo, hi), n in zip(self.extents, self.n_cells))

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(n + 1 for n in self.n_cells)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @cached_property
    def axes(self) -> tuple[np.ndarray, ...]:
        return tuple(np.linspace(lo, hi, n + 1) for (lo, hi), n in zip(self.extents, self.n_cells))

    @cached_property
    def coords(self) -> tuple[np.ndarray, ...]:
        """Nodal coordinate arrays, each of shape ``self.shape``."""
        return tuple(np.meshgrid(*self.axes, indexing="ij"))

    @cached_property
    def boundary_mask(self) -> np.ndarray:
        mask = np.zeros(self.shape, dtype=bool)
        for ax in range(self.dim):
            sl = [slice(None)] * self.dim
            sl[ax] = 0
            mask[tuple(sl)] = True
            sl[ax] = -1
            mask[tuple(sl)] = True
        return mask

    @property
    def interior_mask(self) -> np.ndarray:
        return ~self.boundary_mask

    def face_mask(self, face: str) -> np.ndarray:
        ax = "xy".index(face[0])
        mask = np.zeros(self.shape, dtype=bool)
        sl = [slice(None)] * self.dim
        sl[ax] = 0 if face.endswith("lo") else -1
        mask[tuple(sl)] = True
        return mask

    @property
    def gamma_mask(self) -> np.ndarray:
        mask = np.zeros(self.shape, dtype=bool)
        for f in self.gamma_faces:
            mask |= self.face_mask(f)
        return mask

    @cached_property
    def quadrature_weights(self) -> np.ndarray:
        """Tensor-product trapezoidal weights."""
        w = np.ones(self.shape)
        for ax, (h, n) in enumerate(zip(self.h, self.n_cells)):
            w1 = np.full(n + 1, h)
            w1[[0, -1]] = h / 2
            shape = [1] * self.dim
            shape[ax] = n + 1
            w = w * w1.reshape(shape)
        return w

    def evaluate(self, fn: Coefficient) -> np.ndarray:
        """Evaluate a scalar, array or callable ``fn(*coords)`` on the nodes."""
        if callable(fn):
            val = np.asarray(fn(*self.coords), dtype=float)
        else:
            val = np.asarray(fn, dtype=float)
        return np.broadcast_to(val, self.shape).copy()

    def refined(self, factor: int = 2) -> SpatialGrid:
        return SpatialGrid(self.extents, tuple(n * factor for n in self.n_cells), self.gamma_faces)

    def mask_from_box(self, box: Sequence[Sequence[float]]) -> np.ndarray:
        """Node mask of the closed box ``[(lo, hi), ...]``."""
        mask = np.ones(self.shape, dtype=bool)
        tol = 1e-12 * max(abs(v) for ext in self.extents for v in ext) + 1e-14
        for c, (lo, hi) in zip(self.coords, box):
            mask &= (c >= lo - tol) & (c <= hi + tol)
        return mask

    def header(self) -> dict:
        return {
            "dim": self.dim,
            "extents": [list(e) for e in self.extents],
            "n_cells": list(self.n_cells),
            "gamma_faces": list(self.gamma_faces),
        }


@dataclass(frozen=True)
class TimeGrid:
    """Uniform time grid on ``[0, T]`` with a distinguished observation time.

    ``delta`` is the half-width parameter of the time window around ``t0``;
    it must satisfy ``0 < t0 - 2*delta < t0 + 2*delta < T``.  When omitted it
    defaults to 0.45 of the distance from ``t0`` to the nearer end point.
    """

    T: float
    n_steps: int
    t0_index: int
    delta: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "T", float(self.T))
        object.__setattr__(self, "n_steps", int(self.n_steps))
        object.__setattr__(self, "t0_index", int(self.t0_index))
        if not self.T > 0:
            raise GridError(f"T must be positive, got {self.T}")
        if self.n_steps < 1:
            raise GridError(f"n_steps must be positive, got {self.n_steps}")
        if not 0 < self.t0_index < self.n_steps:
            raise GridError(
                f"t0 must lie in (0, T): t0_index={self.t0_index} with n_steps={self.n_steps}"
            )
        t0 = self.t0
        if self.delta is None:
            object.__setattr__(self, "delta", 0.45 * min(t0, self.T - t0))
        d = float(self.delta)
        object.__setattr__(self, "delta", d)
        if not (d > 0 and t0 - 2 * d > 0 and t0 + 2 * d < self.T):
            raise GridError(
                f"delta={d} violates 0 < t0-2*delta < t0+2*delta < T (t0={t0}, T={self.T})"
            )

    @property
    def dt(self) -> float:
        return self.T / self.n_steps

    @property
    def t0(self) -> float:
        return self.t0_index * self.dt

    @cached_property
    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt

    def refined(self, factor: int = 2) -> TimeGrid:
        return TimeGrid(self.T, self.n_steps * factor, self.t0_index * factor, self.delta)

    def header(self) -> dict:
        return {"T": self.T, "n_steps": self.n_steps, "t0_index": self.t0_index, "delta": self.delta}


@dataclass(frozen=True)
class Field:
    """Grid function on a spatial grid, optionally carrying a time axis first."""

    grid: SpatialGrid
    values: np.ndarray
    times: TimeGrid | None = None

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        expected = self.grid.shape
        if self.times is not None:
            expected = (self.times.n_steps + 1,) + expected
        if vals.shape != expected:
            raise GridError(f"field shape {vals.shape} does not match grids {expected}")
        if not np.all(np.isfinite(vals)):
            raise GridError("field contains non-finite values")
        object.__setattr__(self, "values", vals)

    def at(self, n: int) -> Field:
        if self.times is None:
            raise GridError("field has no time axis")
        return Field(self.grid, self.values[n])


# ---------------------------------------------------------------------------
# finite differences


def fd_weights(offsets: Sequence[int], order: int) -> np.ndarray:
    """Finite-difference weights for the ``order``-th derivative on unit spacing."""
    offs = np.asarray(offsets, dtype=float)
    k = len(offs)
    V = np.vander(offs, k, increasing=True).T
    rhs = np.zeros(k)
    rhs[order] = math.factorial(order)
    return np.linalg.solve(V, rhs)


@lru_cache(maxsize=256)
def diff_matrix(n_nodes: int, h: float, order: int) -> sp.csr_matrix:
    """Second-order accurate difference matrix for the ``order``-th derivative.

    Centered stencils where they fit, one-sided ``order + 2`` point stencils
    within reach of the ends.
    """
    if order == 0:
        return sp.identity(n_nodes, format="csr")
    half = (order + 1) // 2
    width_b = order + 2
    if n_nodes < width_b:
        raise GridError(f"{n_nodes} nodes are too few for a derivative of order {order}")
    rows, cols, vals = [], [], []
    centered = fd_weights(range(-half, half + 1), order)
    for i in range(n_nodes):
        if half <= i < n_nodes - half:
            start, w = i - half, centered
        else:
            start = 0 if i < half else n_nodes - width_b
            w = fd_weights([j - i for j in range(start, start + width_b)], order)
        rows.extend([i] * len(w))
        cols.extend(range(start, start + len(w)))
        vals.extend(w)
    return sp.csr_matrix((np.asarray(vals) / h**order, (rows, cols)), shape=(n_nodes, n_nodes))


def derivative(u: np.ndarray, h: float, order: int, axis: int) -> np.ndarray:
    """Apply :func:`diff_matrix` along ``axis`` of ``u``."""
    D = diff_matrix(u.shape[axis], float(h), order)
    moved = np.moveaxis(u, axis, 0)
    out = D @ moved.reshape(moved.shape[0], -1)
    return np.moveaxis(out.reshape(moved.shape), 0, axis)


def multi_indices(dim: int, order: int):
    """All multi-indices ``alpha`` with ``|alpha| <= order``."""
    for alpha in itertools.product(range(order + 1), repeat=dim):
        if sum(alpha) <= order:
            yield alpha


def partial(u: np.ndarray, grid: SpatialGrid, alpha: Sequence[int], offset: int = 0) -> np.ndarray:
    """Mixed spatial difference quotient; ``offset`` skips leading (time) axes."""
    out = u
    for ax, (k, h) in enumerate(zip(alpha, grid.h)):
        if k:
            out = derivative(out, h, k, ax + offset)
    return out


def discrete_sobolev_norm(
    u: np.ndarray | Field,
    grid: SpatialGrid | None = None,
    order: int = 0,
    region: np.ndarray | None = None,
) -> float:
    """Difference-quotient surrogate of the H^k norm over a node region.

    The integrand is the sum over all multi-indices ``|alpha| <= order`` of the
    squared difference quotients, integrated with trapezoidal weights of the
    full grid restricted to ``region``.  Quotients use centered stencils
    with one-sided stencils near the grid boundary, so nodes outside
    ``region`` contribute to the derivatives but not to the sum.
    """
    if isinstance(u, Field):
        grid = u.grid
        u = u.values
    if grid is None:
        raise GridError("a grid is required for array input")
    if order not in (0, 1, 2, 3, 4):
        raise GridError(f"unsupported Sobolev order {order}")
    u = np.asarray(u, dtype=float)
    if u.shape != grid.shape:
        raise GridError(f"shape {u.shape} does not match grid {grid.shape}")
    mask = np.ones(grid.shape, dtype=bool) if region is None else np.asarray(region, dtype=bool)
    if not mask.any():
        raise GridError("empty region")
    scale = float(np.abs(u).max())
    if scale == 0.0 or not math.isfinite(scale):
        return scale
    u = u / scale  # guards against overflow and underflow of the squares
    w = grid.quadrature_weights * mask
    total = 0.0
    for alpha in multi_indices(grid.dim, order):
        d = partial(u, grid, alpha)
        total += float(np.sum(w * d * d))
    return scale * math.sqrt(total)


# ---------------------------------------------------------------------------
# elliptic operator


@dataclass(frozen=True)
class EllipticOperator:
    """Discrete ``L u = div(a grad u) + b . grad u + c u`` with nodal coefficients.

    ``a`` has shape ``(dim, dim, *grid.shape)``, ``b`` shape ``(dim, *grid.shape)``
    and ``c`` shape ``grid.shape``.  Build instances with :func:`assemble_elliptic`.
    """

    grid: SpatialGrid
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    m: float
    matrix: sp.csr_matrix = field(repr=False, compare=False)

    @property
    def has_drift(self) -> bool:
        return bool(np.any(self.b != 0))

    @cached_property
    def interior_index(self) -> np.ndarray:
        return np.flatnonzero(self.grid.interior_mask.ravel())

    @cached_property
    def interior_matrix(self) -> sp.csr_matrix:
        """Restriction to interior unknowns with homogeneous Dirichlet data."""
        idx = self.interior_index
        return self.matrix[idx][:, idx].tocsr()

    def apply(self, u: np.ndarray) -> np.ndarray:
        return apply_elliptic(self, u)


def _as_tensor(grid: SpatialGrid, a: Coefficient) -> np.ndarray:
    dim = grid.dim
    if callable(a):
        a = np.asarray(a(*grid.coords), dtype=float)
    a = np.asarray(a, dtype=float)
    if a.ndim == 0 or a.shape == grid.shape:
        iso = np.broadcast_to(a, grid.shape)
        out = np.zeros((dim, dim) + grid.shape)
        for i in range(dim):
            out[i, i] = iso
        return out
    if a.shape[:2] == (dim, dim):
        return np.broadcast_to(a, (dim, dim) + grid.shape).astype(float)
    raise GridError(f"cannot interpret diffusion coefficient of shape {a.shape}")


def _as_vector(grid: SpatialGrid, b: Coefficient) -> np.ndarray:
    dim = grid.dim
    if callable(b):
        b = np.asarray(b(*grid.coords), dtype=float)
    b = np.asarray(b, dtype=float)
    if b.ndim == 0 or (dim == 1 and b.shape == grid.shape):
        return np.broadcast_to(b, (dim,) + grid.shape).astype(float)
    if b.shape[0] == dim:
        return np.broadcast_to(b, (dim,) + grid.shape).astype(float)
    raise GridError(f"cannot interpret drift coefficient of shape {b.shape}")


def check_ellipticity(grid: SpatialGrid, a: np.ndarray, m: float | None = None, probes: int = 100, seed: int = 0) -> float:
    """Validate symmetry and the two-sided ellipticity bound of ``a``.

    Returns the ellipticity constant ``m`` (the smallest admissible one when
    ``m`` is not given).  The bound is checked at every node over a fixed probe
    set of unit vectors plus the coordinate directions.
    """
    dim = grid.dim
    asym = np.abs(a - np.swapaxes(a, 0, 1)).max()
    if asym > 1e-12 * max(1.0, np.abs(a).max()):
        idx = np.unravel_index(np.argmax(np.abs(a - np.swapaxes(a, 0, 1)).max(axis=(0, 1))), grid.shape)
        raise GridError(f"diffusion tensor is not symmetric at node {idx}")
    rng = np.random.default_rng(seed)
    xi = rng.normal(size=(probes, dim))
    xi = np.vstack([np.eye(dim), xi])
    xi /= np.linalg.norm(xi, axis=1, keepdims=True)
    quad = np.einsum("pi,ij...,pj->p...", xi, a, xi)
    lo = quad.min(axis=0)
    hi = quad.max(axis=0)
    if m is None:
        if lo.min() <= 0:
            idx = np.unravel_index(np.argmin(lo), grid.shape)
            x = tuple(float(c[idx]) for c in grid.coords)
            raise GridError(f"ellipticity violated at node {idx} (x={x}): min a(xi,xi)={lo.min():.3g}")
        return float(max(hi.max(), 1.0 / lo.min()))
    bad = (lo < 1.0 / m - 1e-12) | (hi > m + 1e-12)
    if bad.any():
        idx = np.unravel_index(np.argmax(bad), grid.shape)
        x = tuple(float(c[idx]) for c in grid.coords)
        raise GridError(f"ellipticity bound with m={m} violated at node {idx} (x={x})")
    return float(m)


def _stencil_matrix(grid: SpatialGrid, a: np.ndarray, b: np.ndarray, c: np.ndarray) -> sp.csr_matrix:
    shape = grid.shape
    N = grid.size
    index = np.arange(N).reshape(shape)
    rows, cols, vals = [], [], []

    def add(row_sel, col_shift, values):
        r = index[row_sel]
        shifted = tuple(
            slice(s.start + d, s.stop + d) for s, d in zip(row_sel, col_shift)
        )
        rows.append(r.ravel())
        cols.append(index[shifted].ravel())
        vals.append(np.broadcast_to(values, r.shape).ravel())

    inner = tuple(slice(1, n - 1) for n in shape)
    for ax, h in enumerate(grid.h):
        aa = a[ax, ax]
        plus = [0] * grid.dim
        plus[ax] = 1
        minus = [0] * grid.dim
        minus[ax] = -1
        shifted_p = tuple(slice(s.start + d, s.stop + d) for s, d in zip(inner, plus))
        shifted_m = tuple(slice(s.start + d, s.stop + d) for s, d in zip(inner, minus))
        a_p = 0.5 * (aa[inner] + aa[shifted_p])
        a_m = 0.5 * (aa[inner] + aa[shifted_m])
        add(inner, plus, a_p / h**2)
        add(inner, minus, a_m / h**2)
        add(inner, [0] * grid.dim, -(a_p + a_m) / h**2)
        bb = b[ax][inner]
        add(inner, plus, bb / (2 * h))
        add(inner, minus, -bb / (2 * h))
    if grid.dim == 2:
        hx, hy = grid.h
        s = 1.0 / (4 * hx * hy)
        a12 = a[0, 1]
        # d_x(a12 d_y u) + d_y(a12 d_x u), centered on the 9-point stencil
        def at(dx, dy):
            return a12[tuple(slice(sl.start + d, sl.stop + d) for sl, d in zip(inner, (dx, dy)))]
        add(inner, (1, 1), s * (at(1, 0) + at(0, 1)))
        add(inner, (1, -1), -s * (at(1, 0) + at(0, -1)))
        add(inner, (-1, 1), -s * (at(-1, 0) + at(0, 1)))
        add(inner, (-1, -1), s * (at(-1, 0) + at(0, -1)))
    add(inner, [0] * grid.dim, c[inner])
    M = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(N, N)
    )
    M.sum_duplicates()
    return M


def assemble_elliptic(
    grid: SpatialGrid,
    a: Coefficient = 1.0,
    b: Coefficient = 0.0,
    c: Coefficient = 0.0,
    m: float | None = None,
) -> EllipticOperator:
    """Assemble the finite-difference stencil of the elliptic operator.

    The divergence term uses the flux form with face-averaged coefficients,
    the drift uses centered differences and the reaction term is pointwise.
    Rows of boundary nodes are zero, so ``L u`` is reported as 0 there.

    Raises
    ------
    GridError
        If ``a`` is not symmetric or violates the ellipticity bound.
    """
    A = _as_tensor(grid, a)
    B = _as_vector(grid, b)
    C = grid.evaluate(c)
    for name, arr in (("a", A), ("b", B), ("c", C)):
        if not np.all(np.isfinite(arr)):
            raise GridError(f"coefficient {name} has non-finite values")
    m = check_ellipticity(grid, A, m)
    M = _stencil_matrix(grid, A, B, C)
    return EllipticOperator(grid, A, B, C, m, M)


def apply_elliptic(Lop: EllipticOperator, u: np.ndarray | Field) -> np.ndarray:
    """Apply the discrete operator to a single-time or space-time array.

    Boundary values of ``u`` enter the interior rows; boundary rows of the
    result are zero.
    """
    if isinstance(u, Field):
        u = u.values
    u = np.asarray(u, dtype=float)
    shape = Lop.grid.shape
    if u.shape == shape:
        return (Lop.matrix @ u.ravel()).reshape(shape)
    if u.shape[1:] == shape:
        flat = u.reshape(u.shape[0], -1)
        return (Lop.matrix @ flat.T).T.reshape(u.shape)
    raise GridError(f"shape {u.shape} does not match operator grid {shape}")


# ---------------------------------------------------------------------------
# snapshot I/O


def save_field(path: str | Path, fld: Field) -> None:
    """Write a self-describing ``.npz`` container (JSON header + values)."""
    header = {"grid": fld.grid.header(), "times": None if fld.times is None else fld.times.header()}
    with open(path, "wb") as fh:
        np.savez(fh, header=np.array(json.dumps(header, sort_keys=True)), values=fld.values)


def load_field(path: str | Path) -> Field:
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["header"]))
        values = data["values"]
    g = header["grid"]
    grid = SpatialGrid(tuple(map(tuple, g["extents"])), tuple(g["n_cells"]), tuple(g["gamma_faces"]))
    tg = header["times"]
    times = None if tg is None else TimeGrid(tg["T"], tg["n_steps"], tg["t0_index"], tg["delta"])
    return Field(grid, values, times)


def export_csv(path: str | Path, fld: Field) -> None:
    """CSV with columns ``t, x[, y], value`` (``t`` empty for single-time fields)."""
    grid = fld.grid
    cols = ["t", "x"] + (["y"] if grid.dim == 2 else []) + ["value"]
    flat_coords = [c.ravel() for c in grid.coords]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        if fld.times is None:
            blocks = [("", fld.values)]
        else:
            blocks = [(repr(float(t)), fld.values[n]) for n, t in enumerate(fld.times.times)]
        for t, vals in blocks:
            for row in zip(*flat_coords, vals.ravel()):
                w.writerow([t] + [repr(float(v)) for v in row])


@dataclass(frozen=True)
class EquationCoefficients:
    """Constant coefficients of ``rho1 u_t + rho2 D^(1/2) u - L u``.

    ``rho1 > 0`` and ``rho2 != 0`` are enforced.  ``allow_degenerate`` admits
    ``rho2 = 0`` (the classical parabolic limit) for cross-checks only.
    """

    rho1: float
    rho2: float
    allow_degenerate: bool = False

    def __post_init__(self):
        object.__setattr__(self, "rho1", float(self.rho1))
        object.__setattr__(self, "rho2", float(self.rho2))
        if not (math.isfinite(self.rho1) and self.rho1 > 0):
            raise GridError(f"rho1 must be > 0, got {self.rho1}")
        if not math.isfinite(self.rho2):
            raise GridError(f"rho2 must be finite, got {self.rho2}")
        if self.rho2 == 0 and not self.allow_degenerate:
            raise GridError("rho2 must be nonzero")
