import math

import numpy as np
import pytest
import sympy
from hypothesis import given, settings
from hypothesis import strategies as st

from halfdiff.carleman import (
    GeometryError,
    build_cutoffs,
    build_level_sets,
    build_weight,
    check_combined_carleman,
    check_elliptic_carleman,
    check_parabolic_carleman,
    random_space_field,
    random_space_time_field,
    smoothstep,
)
from halfdiff.grid import EquationCoefficients, SpatialGrid, TimeGrid, assemble_elliptic, derivative

S_SWEEP = [2, 4, 8, 16, 32, 64]


@pytest.fixture(scope="module")
def ref():
    grid = SpatialGrid.interval(0.0, 1.0, 64)
    tg = TimeGrid(1.0, 128, 64, 0.1)
    geom = build_weight(grid, tg, lam=1.0, epsilon=0.5, omega=[(0.5, 0.9)])
    return geom, build_level_sets(geom), build_cutoffs(geom)


def test_reference_constants(ref):
    geom, _, _ = ref
    assert geom.d_max == pytest.approx(1.44, abs=1e-14)
    assert geom.beta == pytest.approx(42.0, abs=1e-12)
    assert np.allclose(geom.mu, (0.03, 0.27, 0.51), atol=1e-12)
    assert np.allclose(geom.d_grid, geom.grid.coords[0] * (2.4 - geom.grid.coords[0]), atol=1e-14)
    assert all(geom.invariants().values())
    assert geom.epsilon0 == pytest.approx(0.5 * 1.9 / 1.44)


def test_gamma_at_left_end_mirrors_weight():
    grid = SpatialGrid.interval(0.0, 1.0, 32, "x_lo")
    geom = build_weight(grid, TimeGrid(1.0, 64, 32, 0.1), omega=[(0.1, 0.5)])
    x = grid.coords[0]
    assert np.allclose(geom.d_grid, (1 - x) * (x + 1.4), atol=1e-14)


def test_epsilon_above_epsilon0_rejected():
    grid = SpatialGrid.interval(0.0, 1.0, 32)
    tg = TimeGrid(1.0, 64, 32, 0.1)
    with pytest.raises(GeometryError, match="epsilon0"):
        build_weight(grid, tg, epsilon=0.5, omega=[(0.2, 0.9)])
    with pytest.raises(GeometryError):
        build_weight(grid, tg, epsilon=1.5)
    with pytest.raises(GeometryError):
        build_weight(grid, tg, lam=-1.0)


def test_delta_window_checked():
    grid = SpatialGrid.interval(0.0, 1.0, 32)
    with pytest.raises(GeometryError, match="delta"):
        build_weight(grid, TimeGrid(1.0, 64, 32, 0.1), delta=0.3)


def test_2d_needs_single_gamma_edge():
    grid = SpatialGrid(((0, 1), (0, 1)), (8, 8), ("x_hi", "y_lo"))
    with pytest.raises(GeometryError, match="single edge"):
        build_weight(grid, TimeGrid(1.0, 16, 8, 0.1))


def test_2d_geometry_and_level_sets():
    grid = SpatialGrid(((0, 1), (0, 1)), (16, 16), ("y_hi",))
    tg = TimeGrid(1.0, 40, 20, 0.1)
    geom = build_weight(grid, tg, omega=[(0.3, 0.7), (0.6, 0.8)])
    assert all(geom.invariants().values())
    lv = build_level_sets(geom)
    assert lv.Q.shape == (3, 41, 17, 17)
    assert lv.counts()["Omega3"] > 0


def test_level_set_nesting_and_window(ref):
    geom, lv, _ = ref
    assert not np.any(lv.Q[1] & ~lv.Q[0]) and not np.any(lv.Q[2] & ~lv.Q[1])
    assert not np.any(lv.Q_minus[0] & ~lv.Q[0])
    t = geom.tg.times
    assert np.all(np.abs(t[lv.Q[0].any(axis=1)] - geom.t0) < 2 * geom.delta)
    near = np.abs(t - geom.t0) < math.sqrt(geom.epsilon) * geom.delta
    assert np.all(lv.Q[2][near][:, geom.omega_mask])
    assert np.array_equal(lv.Omega[0], geom.d_grid > geom.mu[0])


def test_smoothstep_is_c4():
    s = sympy.symbols("s")
    S = 126 * s**5 - 420 * s**6 + 540 * s**7 - 315 * s**8 + 70 * s**9
    assert S.subs(s, 0) == 0 and S.subs(s, 1) == 1
    for k in range(1, 5):
        d = sympy.diff(S, s, k)
        assert d.subs(s, 0) == 0 and d.subs(s, 1) == 0
    assert smoothstep(-1.0) == 0 and smoothstep(2.0) == 1 and smoothstep(0.5) == pytest.approx(0.5)


def test_cutoff_values_and_derivatives(ref):
    geom, lv, cut = ref
    psi = geom.psi()
    assert np.all(cut.chi[psi >= geom.mu[1]] == 1.0)
    assert np.all(cut.chi[psi <= geom.mu[0]] == 0.0)
    assert np.all((cut.chi >= 0) & (cut.chi <= 1))
    assert set(cut.chi_derivs) >= {((4,), 0), ((2,), 1)}
    assert np.all(cut.chi_tilde[geom.d_grid >= geom.mu[1]] == 1.0)
    assert set(cut.chi_tilde_derivs) == {(1,), (2,)}


def _setup(ref):
    geom, lv, cut = ref
    return geom, lv, cut, assemble_elliptic(geom.grid), EquationCoefficients(1.0, 1.0)


def test_checkers_scale_invariant_and_finite(ref):
    geom, lv, cut, L, co = _setup(ref)
    rng = np.random.default_rng(5)
    v = random_space_time_field(geom, cut, rng)
    w = random_space_field(geom, cut, rng)
    for check, field, args in (
        (check_parabolic_carleman, v, (L, co)),
        (check_elliptic_carleman, w, (L,)),
        (check_combined_carleman, v, (L, co)),
    ):
        r1 = check(field, geom, *args, S_SWEEP, lv)
        r2 = check(1e7 * field, geom, *args, S_SWEEP, lv)
        assert r1.status == "ok" and np.all(np.isfinite(r1.ratio))
        assert np.abs(r2.ratio / r1.ratio - 1).max() < 1e-10
        assert r1.tail_nonincreasing()
        assert r1.s_star is not None and r1.tail_constant > 0


def test_large_s_does_not_overflow(ref):
    geom, lv, cut, L, co = _setup(ref)
    v = random_space_time_field(geom, cut, np.random.default_rng(0))
    r = check_parabolic_carleman(v, geom, L, co, [1e3, 1e4], lv)
    assert np.all(np.isfinite(r.ratio)) and np.all(np.isfinite(r.lhs))


def test_zero_field_is_undefined(ref):
    geom, lv, cut, L, co = _setup(ref)
    r = check_parabolic_carleman(np.zeros(cut.chi.shape), geom, L, co, S_SWEEP, lv)
    assert r.status == "undefined" and np.all(np.isnan(r.ratio))


def test_zero_residual_flags_violation_candidate(ref):
    geom, lv, cut, L, co = _setup(ref)
    harmonic = geom.grid.coords[0].copy()  # L v = 0 at interior nodes, v != 0
    r = check_elliptic_carleman(harmonic, geom, L, S_SWEEP, lv)
    assert r.status == "violation_candidate" and np.all(np.isinf(r.ratio))


def test_report_rows_have_csv_columns(ref):
    geom, lv, cut, L, co = _setup(ref)
    v = random_space_time_field(geom, cut, np.random.default_rng(1))
    rows = check_parabolic_carleman(v, geom, L, co, S_SWEEP, lv).rows()
    assert len(rows) == len(S_SWEEP)
    assert set(rows[0]) == {"s", "lambda", "lhs", "residual_term", "ratio", "boundary_term", "log_scale"}


def test_test_fields_compactly_supported(ref):
    geom, lv, cut = ref
    v = random_space_time_field(geom, cut, np.random.default_rng(2))
    assert not np.any(v[~lv.Q[0]])
    assert np.all(v[:, -3:] == 0)  # vanishes next to gamma


@settings(max_examples=15, deadline=None)
@given(eps=st.floats(0.05, 0.6), delta=st.floats(0.02, 0.12))
def test_invariants_hold_across_parameters(eps, delta):
    grid = SpatialGrid.interval(0.0, 1.0, 32)
    tg = TimeGrid(1.0, 100, 50, 0.12)
    geom = build_weight(grid, tg, epsilon=eps, delta=delta, omega=[(0.6, 0.9)])
    assert all(geom.invariants().values())
    build_level_sets(geom)


@pytest.mark.parametrize("key,axis,order", [(((1,), 0), 1, 1), (((2,), 0), 1, 2), (((0,), 1), 0, 1)])
def test_cutoff_derivatives_match_differences(key, axis, order):
    errs = []
    for n in (128, 256, 512):
        grid = SpatialGrid.interval(0.0, 1.0, n)
        tg = TimeGrid(1.0, n, n // 2, 0.1)
        cut = build_cutoffs(build_weight(grid, tg, omega=[(0.5, 0.9)]))
        h = grid.h[0] if axis == 1 else tg.dt
        exact = cut.chi_derivs[key]
        errs.append(np.abs(derivative(cut.chi, h, order, axis) - exact).max() / np.abs(exact).max())
    assert errs[1] / errs[2] > 3.0  # second-order differences converge to the exact derivative
