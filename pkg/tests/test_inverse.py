import warnings

import numpy as np
import pytest

from halfdiff.carleman import smoothstep
from halfdiff.forward import SourceSpec, solve_forward
from halfdiff.grid import EquationCoefficients, SpatialGrid, TimeGrid, assemble_elliptic
from halfdiff.inverse import (
    DiscrepancyWarning,
    HypothesisError,
    assemble_observation_map,
    bspline_basis,
    default_omega,
    fit_power_law,
    reconstruct,
    relative_h2_error,
    stability_experiment,
    synthesize_data,
)

CO = EquationCoefficients(1.0, 1.0)


def r_ok(t, x):
    return 1 + t + 0 * x


def f_true(x):
    return np.sin(np.pi * x) ** 2


@pytest.fixture(scope="module")
def setup():
    grid = SpatialGrid.interval(0.0, 1.0, 64)
    tg = TimeGrid(1.0, 64, 32)
    L = assemble_elliptic(grid)
    return grid, tg, L, assemble_observation_map(CO, L, r_ok, tg, 32)


def test_basis_partition_of_unity():
    grid = SpatialGrid.interval(0.0, 2.0, 40)
    B = bspline_basis(grid, 12)
    assert B.shape == (41, 12)
    assert np.allclose(B.sum(axis=1), 1.0)
    B2 = bspline_basis(SpatialGrid(((0, 1), (0, 1)), (8, 10), ("x_hi",)), 5)
    assert B2.shape == (99, 25) and np.allclose(B2.sum(axis=1), 1.0)


def test_single_basis_column_is_a_solve():
    grid = SpatialGrid.interval(0.0, 1.0, 32)
    tg = TimeGrid(1.0, 32, 16)
    L = assemble_elliptic(grid)
    omap = assemble_observation_map(CO, L, r_ok, tg, 1)
    B = bspline_basis(grid, 1)
    assert B[16, 0] == pytest.approx(B[:, 0].max())  # centered at the midpoint
    snap = solve_forward(CO, L, SourceSpec(f=B[:, 0], R=r_ok), tg).solution.values[tg.t0_index]
    assert np.allclose(omap.matrix[:, 0], snap.ravel(), rtol=0, atol=1e-14)


def test_map_superposition(setup):
    grid, tg, L, omap = setup
    c = omap.project(grid.evaluate(f_true))
    direct = solve_forward(CO, L, SourceSpec(f=omap.f_values(c), R=r_ok), tg).solution.values[tg.t0_index]
    assert np.abs(omap.apply(c) - direct).max() <= 1e-8 * np.abs(direct).max()
    assert not np.any(omap.apply(np.zeros(32)))
    assert omap.verify_columns() < 1e-12
    assert omap.check_additivity() < 1e-12


def test_basis_size_limit(setup):
    grid, tg, L, _ = setup
    with pytest.raises(ValueError):
        assemble_observation_map(CO, L, r_ok, tg, 64)


def test_hypothesis_check_and_force(setup):
    grid, tg, L, _ = setup
    bad = lambda t, x: (t - 0.5) ** 2 + 0 * x  # noqa: E731
    with pytest.raises(HypothesisError):
        assemble_observation_map(CO, L, bad, tg, 8)
    omap = assemble_observation_map(CO, L, bad, tg, 8, force=True)
    assert omap.r_min == 0.0


def test_round_trip_on_map_generated_data(setup):
    grid, tg, L, omap = setup
    c = omap.project(grid.evaluate(f_true))
    res = reconstruct(omap, omap.apply(c), alpha=1e-12)
    assert relative_h2_error(res.f_hat.values, omap.f_values(c), grid) <= 1e-3
    assert res.normal_residual <= 1e-10


def test_round_trip_on_fine_grid_data(setup):
    grid, tg, L, omap = setup
    data = synthesize_data(CO, L, f_true, r_ok, tg, refine=2)
    res = reconstruct(omap, data, alpha=1e-12)
    assert relative_h2_error(res.f_hat.values, grid.evaluate(f_true), grid) <= 1e-2


def test_zero_data_and_linearity(setup):
    grid, tg, L, omap = setup
    assert not np.any(reconstruct(omap, np.zeros(grid.shape), alpha=1e-3).f_hat.values)
    data = omap.apply(np.random.default_rng(0).normal(size=32))
    a = reconstruct(omap, data, alpha=1e-6).f_hat.values
    b = reconstruct(omap, 2 * data, alpha=1e-6).f_hat.values
    assert np.allclose(b, 2 * a, rtol=1e-8, atol=1e-12)


def test_alpha_validation(setup):
    grid, tg, L, omap = setup
    with pytest.raises(ValueError, match="alpha"):
        reconstruct(omap, np.zeros(grid.shape), alpha=0.0)
    with pytest.raises(ValueError):
        reconstruct(omap, np.zeros(grid.shape), alpha="auto")
    with pytest.raises(ValueError):
        reconstruct(omap, np.zeros(grid.shape), alpha="big")


def test_morozov_matches_noise_level(setup):
    grid, tg, L, omap = setup
    c = omap.project(grid.evaluate(f_true))
    rng = np.random.default_rng(3)
    noise = np.where(grid.interior_mask, rng.normal(size=grid.shape), 0) * 1e-5
    delta = float(np.sqrt(np.sum(grid.quadrature_weights * noise**2)))
    res = reconstruct(omap, omap.apply(c) + noise, "auto", noise_level=delta)
    assert res.status == "converged"
    assert res.misfit == pytest.approx(delta, rel=1e-2)


def test_unattainable_discrepancy_warns(setup):
    grid, tg, L, omap = setup
    rng = np.random.default_rng(4)
    data = np.where(grid.interior_mask, rng.normal(size=grid.shape), 0.0)
    with pytest.warns(DiscrepancyWarning):
        res = reconstruct(omap, data, "auto", noise_level=1e-12)
    assert res.status == "unattainable"


def test_landweber_reduces_misfit(setup):
    grid, tg, L, omap = setup
    data = omap.apply(omap.project(grid.evaluate(f_true)))
    few = reconstruct(omap, data, alpha=1 / 5, method="landweber")
    many = reconstruct(omap, data, alpha=1 / 500, method="landweber")
    assert many.misfit < few.misfit
    with pytest.raises(ValueError):
        reconstruct(omap, data, alpha=1.0, method="cg")


def test_prior_bound_logged(setup, caplog):
    grid, tg, L, omap = setup
    data = omap.apply(omap.project(grid.evaluate(f_true)))
    reconstruct(omap, data, alpha=1e-10, M=1e-3)
    assert "prior bound" in caplog.text


def test_power_law_fit():
    x = np.logspace(-6, -2, 5)
    k, C, r2 = fit_power_law(x, 3 * x**0.7)
    assert k == pytest.approx(0.7) and C == pytest.approx(3.0) and r2 == pytest.approx(1.0)


def test_stability_experiment_properties(setup):
    grid, tg, L, omap = setup
    levels = [1e-2, 1e-3, 1e-4]
    rep = stability_experiment(omap, f_true, levels, 3, seed=7)
    assert rep.kappa_hat > 0 and np.isfinite(rep.C_hat)
    again = stability_experiment(omap, f_true, levels, 3, seed=7, workers=3)
    assert rep.to_csv() == again.to_csv()
    scaled = stability_experiment(omap, lambda x: 0.1 * f_true(x), levels, 3, seed=7)
    assert scaled.kappa_hat == pytest.approx(rep.kappa_hat, rel=1e-6)
    header = rep.to_csv().splitlines()[0]
    assert header == "noise_level,trial,data_norm_h4,err_h2_omega,alpha,kappa_hat_running"
    errs = {lv: np.mean([r["err_h2_omega"] for r in rep.rows if r["noise_level"] == lv]) for lv in levels}
    assert errs[1e-2] >= errs[1e-3] >= errs[1e-4]


def test_stability_experiment_zero_noise_excluded(setup):
    grid, tg, L, omap = setup
    rep = stability_experiment(omap, f_true, [1e-2, 1e-3, 1e-4, 0.0], 2, seed=1)
    zero = [r for r in rep.rows if r["noise_level"] == 0.0]
    assert len(zero) == 2 and all(r["data_norm_h4"] == 0 for r in zero)
    assert np.isfinite(rep.kappa_hat)


def test_stability_experiment_refusals(setup):
    grid, tg, L, omap = setup
    with pytest.raises(ValueError, match="3 noise levels"):
        stability_experiment(omap, f_true, [1e-2, 1e-3], 2, 0)
    with pytest.raises(ValueError, match="prior bound"):
        stability_experiment(omap, f_true, [1e-2, 1e-3, 1e-4], 2, 0, M=1e-3)


def test_negative_control_is_ill_conditioned(setup):
    grid, tg, L, omap = setup
    phi = lambda x: smoothstep((x - 0.3) / 0.1) * smoothstep((0.7 - x) / 0.1)  # noqa: E731
    bad = lambda t, x: phi(x) * (t - tg.t0) ** 2 + (1 - phi(x))  # noqa: E731
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        forced = assemble_observation_map(CO, L, bad, tg, 32, force=True)
    assert forced.condition_number() >= 10 * omap.condition_number()


def test_2d_round_trip():
    grid = SpatialGrid(((0, 1), (0, 1)), (16, 16), ("x_hi",))
    tg = TimeGrid(1.0, 16, 8)
    L = assemble_elliptic(grid)
    omap = assemble_observation_map(CO, L, lambda t, x, y: 1 + t + 0 * x, tg, 6)
    c = np.random.default_rng(0).normal(size=36)
    res = reconstruct(omap, omap.apply(c), alpha=1e-14)
    assert np.abs(res.coefficients - c).max() < 1e-4 * np.abs(c).max()
    assert default_omega(grid).sum() == 9 * 9
