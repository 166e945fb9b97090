import math

import numpy as np
import pytest

from conftest import mms_exact, mms_source, setup_1d
from halfdiff.forward import (
    SolverError,
    SourceSpec,
    boundary_diagnostics,
    evaluate_space_time,
    solve_forward,
    solve_forward_batch,
)
from halfdiff.grid import EquationCoefficients, SpatialGrid, TimeGrid, assemble_elliptic


def mms_error(nc, N):
    grid, tg, L = setup_1d(nc, N)
    u = solve_forward(EquationCoefficients(1, 1), L, SourceSpec(g_general=mms_source), tg).solution.values
    return np.abs(u - evaluate_space_time(mms_exact, grid, tg)).max()


def test_zero_source_gives_zero_solution(unit_coeffs):
    grid, tg, L = setup_1d(16, 32)
    u = solve_forward(unit_coeffs, L, np.zeros((33,) + grid.shape), tg).solution.values
    assert not np.any(u)


def test_mms_error_at_reference_resolution():
    assert mms_error(128, 512) <= 5e-3


def test_time_order_with_fine_space():
    e = [mms_error(512, N) for N in (64, 128, 256)]
    assert math.log2(e[1] / e[2]) >= 1.4


def test_space_order_with_fine_time():
    e = [mms_error(nc, 1024) for nc in (8, 16, 32)]
    assert math.log2(e[1] / e[2]) >= 1.9


def test_solution_field_keeps_boundary_zero(unit_coeffs):
    grid, tg, L = setup_1d(16, 32)
    u = solve_forward(unit_coeffs, L, SourceSpec(f=lambda x: 1 + x, R=lambda t, x: 1 + t), tg).solution
    assert np.all(u.values[:, 0] == 0) and np.all(u.values[:, -1] == 0)
    assert np.all(u.values[0] == 0)
    diag = boundary_diagnostics(u)
    assert set(diag) == {"x_hi"} and diag["x_hi"]["max_abs_normal_derivative"] > 0


def test_source_spec_validation():
    with pytest.raises(ValueError):
        SourceSpec(f=1.0, R=1.0, g_general=1.0)
    with pytest.raises(ValueError):
        SourceSpec(f=1.0)
    grid, tg, _ = setup_1d(8, 8)
    src = SourceSpec(f=lambda x: x, R=lambda t, x: 1 + 0 * t)
    assert src.r_min_at_t0(grid, tg) == 1.0
    with pytest.raises(ValueError):
        SourceSpec(g_general=1.0).f_values(grid)


def test_shape_mismatch_and_nonfinite_source(unit_coeffs):
    grid, tg, L = setup_1d(8, 8)
    with pytest.raises(ValueError):
        solve_forward(unit_coeffs, L, np.zeros((3, 9)), tg)
    g = np.zeros((9, 9))
    g[3, 3] = np.inf
    with pytest.raises(SolverError):
        solve_forward(unit_coeffs, L, g, tg)


def test_batch_matches_individual_solves(unit_coeffs):
    grid, tg, L = setup_1d(24, 40)
    rng = np.random.default_rng(1)
    sources = [SourceSpec(f=rng.normal(size=grid.shape), R=lambda t, x: 1 + t * x) for _ in range(5)]
    snaps = solve_forward_batch(unit_coeffs, L, sources, tg)
    threaded = solve_forward_batch(unit_coeffs, L, sources, tg, workers=2)
    for s, snap, snap2 in zip(sources, snaps, threaded):
        ref = solve_forward(unit_coeffs, L, s, tg).solution.values[tg.t0_index]
        assert np.allclose(snap, ref, rtol=0, atol=1e-13)
        assert np.array_equal(snap, snap2)


def test_2d_krylov_matches_direct():
    grid = SpatialGrid(((0, 1), (0, 1)), (12, 10), ("x_hi",))
    tg = TimeGrid(1.0, 16, 8)
    L = assemble_elliptic(grid, a=lambda x, y: 1 + 0.5 * x * y, b=0.0)
    co = EquationCoefficients(1.0, 0.7)
    src = SourceSpec(g_general=lambda t, x, y: t * np.sin(np.pi * x) * (1 + y))
    a = solve_forward(co, L, src, tg, method="krylov").solution.values
    b = solve_forward(co, L, src, tg, method="direct").solution.values
    assert np.abs(a - b).max() < 1e-9 * np.abs(b).max()
    Ld = assemble_elliptic(grid, b=0.4)
    c = solve_forward(co, Ld, src, tg, method="krylov").solution.values
    d = solve_forward(co, Ld, src, tg, method="direct").solution.values
    assert np.abs(c - d).max() < 1e-9 * np.abs(d).max()


def test_negative_rho2_runs(unit_coeffs):
    grid, tg, L = setup_1d(16, 32)
    u = solve_forward(EquationCoefficients(1.0, -0.5), L, SourceSpec(g_general=mms_source), tg)
    assert np.all(np.isfinite(u.solution.values))


def test_unknown_scheme(unit_coeffs):
    grid, tg, L = setup_1d(8, 8)
    with pytest.raises(ValueError):
        solve_forward(unit_coeffs, L, SourceSpec(g_general=mms_source), tg, scheme="rk4")
