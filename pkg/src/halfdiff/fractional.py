"""Discrete half-order time derivatives and the identities they satisfy.

All routines take arrays whose first axis is time on a uniform grid
``t_n = n * dt`` (``n = 0..N``); trailing axes are spatial and are carried
along untouched.  The Caputo derivative uses the L1 scheme: the kernel
``(t - tau)^(-1/2)`` is integrated exactly against the piecewise-linear
interpolant of ``u``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

SQRT_PI = math.sqrt(math.pi)  # Gamma(1/2)


@dataclass(frozen=True)
class HalfDerivativeWeights:
    """L1 convolution weights ``w_k = 2 (sqrt(k+1) - sqrt(k)) / sqrt(dt)``.

    The discrete Caputo derivative at level ``n`` is
    ``(1/Gamma(1/2)) * sum_k w_k (u_{n-k} - u_{n-k-1})``.
    """

    dt: float
    weights: np.ndarray

    @property
    def leading(self) -> float:
        """Coefficient of ``u_n`` in the discrete derivative (``c_0``)."""
        return float(self.weights[0]) / SQRT_PI


@lru_cache(maxsize=64)
def l1_weights(n_steps: int, dt: float) -> HalfDerivativeWeights:
    k = np.arange(n_steps, dtype=float)
    w = 2.0 * (np.sqrt(k + 1.0) - np.sqrt(k)) / math.sqrt(dt)
    w.setflags(write=False)
    return HalfDerivativeWeights(dt, w)


def _check_levels(u: np.ndarray, minimum: int) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if u.ndim == 0 or u.shape[0] < minimum:
        raise ValueError(f"need at least {minimum} time levels, got {0 if u.ndim == 0 else u.shape[0]}")
    return u


def _l1_sum(increments: np.ndarray, w: np.ndarray) -> np.ndarray:
    """``out[n] = sum_{k<n} w_k * inc[n-k]`` for ``n >= 1`` by direct summation."""
    N = increments.shape[0] - 1
    flat = increments.reshape(N + 1, -1)
    out = np.zeros_like(flat)
    for n in range(1, N + 1):
        out[n] = w[:n] @ flat[n:0:-1]
    return out.reshape(increments.shape)


def start_singularity(u: np.ndarray, dt: float) -> np.ndarray:
    """Coefficient ``a`` of a ``sqrt(t)`` start, fitted as ``u0 + a sqrt(t) + c t``.

    Uses the first three levels; exact for data of that form.
    """
    u = _check_levels(u, 3)
    d1 = u[1] - u[0]
    d2 = u[2] - u[0]
    return (d2 - 2.0 * d1) / ((math.sqrt(2.0) - 2.0) * math.sqrt(dt))


def caputo_half(u: np.ndarray, dt: float, singular_start: bool = False) -> np.ndarray:
    """L1 approximation of the Caputo half derivative.

    Level 0 is set to 0.  With ``singular_start`` a fitted ``a sqrt(t)``
    component (see :func:`start_singularity`) is removed before the L1 sum
    and its exact half derivative ``a Gamma(3/2)`` added back; this restores
    the L1 accuracy for data that behave like ``sqrt(t)`` near 0, such as the
    half derivative of a function with nonzero slope at 0.
    """
    u = _check_levels(u, 2)
    N = u.shape[0] - 1
    w = l1_weights(N, float(dt)).weights
    a = None
    if singular_start and N >= 2:
        a = start_singularity(u, dt)
        t = np.arange(N + 1) * dt
        u = u - np.multiply.outer(np.sqrt(t), a)
    inc = np.zeros_like(u)
    inc[1:] = np.diff(u, axis=0)
    out = _l1_sum(inc, w) / SQRT_PI
    if a is not None:
        out[1:] += a * (SQRT_PI / 2.0)
    return out


def _inv_sqrt_pi_t(N: int, dt: float) -> np.ndarray:
    """``1/sqrt(pi t_n)`` with level 0 set to NaN."""
    t = np.arange(N + 1) * dt
    with np.errstate(divide="ignore"):
        out = 1.0 / np.sqrt(np.pi * t)
    out[0] = np.nan
    return out


def riemann_liouville_half(u: np.ndarray, dt: float, singular_start: bool = False) -> np.ndarray:
    """Riemann-Liouville half derivative ``caputo_half(u) + u(0)/sqrt(pi t)``.

    The value at ``t = 0`` is singular; level 0 of the result is NaN and must
    be excluded by the caller.
    """
    u = _check_levels(u, 2)
    N = u.shape[0] - 1
    out = caputo_half(u, dt, singular_start)
    s = _inv_sqrt_pi_t(N, dt).reshape((-1,) + (1,) * (u.ndim - 1))
    return out + s * u[0]


def time_derivative(u: np.ndarray, dt: float, singular_start: bool = False) -> np.ndarray:
    """Second-order time derivative (centered inside, one-sided at the ends).

    With ``singular_start`` a fitted ``a sqrt(t)`` part is differentiated
    exactly and only the remainder by differences; level 0 then holds the
    derivative of the remainder alone.
    """
    u = _check_levels(u, 3)
    N = u.shape[0] - 1
    if not singular_start:
        return np.gradient(u, dt, axis=0, edge_order=2)
    a = start_singularity(u, dt)
    t = np.arange(N + 1) * dt
    rem = u - np.multiply.outer(np.sqrt(t), a)
    out = np.gradient(rem, dt, axis=0, edge_order=2)
    with np.errstate(divide="ignore"):
        ds = 0.5 / np.sqrt(t)
    ds[0] = 0.0
    return out + np.multiply.outer(ds, a)


@dataclass(frozen=True)
class ResidualReport:
    """Norms of a residual field over the retained time levels ``n >= first_level``."""

    max_norm: float
    l2_norm: float
    first_level: int
    residual: np.ndarray

    @classmethod
    def from_residual(cls, res: np.ndarray, dt: float, first_level: int, weights=None) -> ResidualReport:
        kept = res[first_level:]
        w = dt if weights is None else dt * weights
        l2 = math.sqrt(float(np.sum(w * kept * kept))) if kept.size else 0.0
        mx = float(np.abs(kept).max()) if kept.size else 0.0
        return cls(mx, l2, first_level, res)


def check_composition_identity(u: np.ndarray, dt: float, cut_cells: int = 2) -> ResidualReport:
    """Residual of ``D^(1/2) D^(1/2) u = u_t - (D^(1/2) u)(0) / sqrt(pi t)``.

    Here ``D^(1/2)`` is the Caputo half derivative.  The outer application
    uses the singular-start correction because the inner result behaves like
    ``sqrt(t)`` whenever ``u_t(0) != 0``.  Levels below ``cut_cells`` are
    excluded from the norms.
    """
    u = _check_levels(u, 3)
    N = u.shape[0] - 1
    inner = caputo_half(u, dt)
    outer = caputo_half(inner, dt, singular_start=True)
    s = _inv_sqrt_pi_t(N, dt).reshape((-1,) + (1,) * (u.ndim - 1))
    rhs = time_derivative(u, dt) - inner[0] * s
    res = outer - rhs
    res[0] = 0.0
    return ResidualReport.from_residual(res, dt, cut_cells)


def check_commutator_identity(u: np.ndarray, dt: float, cut_cells: int = 2) -> ResidualReport:
    """Residual of ``D^(1/2)(u_t) - d/dt D^(1/2) u + u_t(0)/sqrt(pi t)``."""
    u = _check_levels(u, 4)
    N = u.shape[0] - 1
    ut = time_derivative(u, dt)
    first = caputo_half(ut, dt)
    second = time_derivative(caputo_half(u, dt), dt, singular_start=True)
    s = _inv_sqrt_pi_t(N, dt).reshape((-1,) + (1,) * (u.ndim - 1))
    res = first - second + ut[0] * s
    res[0] = 0.0
    return ResidualReport.from_residual(res, dt, cut_cells)


def check_rl_composition(u: np.ndarray, dt: float, cut_cells: int = 2) -> ResidualReport:
    """Residual of ``D_RL^(1/2) D_RL^(1/2) u = u_t`` for data with ``u(0) = 0``.

    ``u_t`` on the right is the backward difference, matching the left
    derivative of the piecewise-linear interpolant that the L1 scheme sees.
    """
    u = _check_levels(u, 3)
    if np.any(u[0] != 0):
        raise ValueError("the Riemann-Liouville composition check needs u(0) = 0")
    inner = riemann_liouville_half(u, dt)
    inner[0] = 0.0
    outer = riemann_liouville_half(inner, dt, singular_start=True)
    back = np.zeros_like(u)
    back[1:] = np.diff(u, axis=0) / dt
    res = outer - back
    res[0] = 0.0
    return ResidualReport.from_residual(res, dt, cut_cells)
