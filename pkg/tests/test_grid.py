import csv
import math

import numpy as np
import pytest
import sympy
from hypothesis import given, settings
from hypothesis import strategies as st

from halfdiff.grid import (
    EquationCoefficients,
    Field,
    GridError,
    SpatialGrid,
    TimeGrid,
    apply_elliptic,
    assemble_elliptic,
    check_ellipticity,
    discrete_sobolev_norm,
    export_csv,
    load_field,
    save_field,
)


def unit(n):
    return SpatialGrid.interval(0.0, 1.0, n)


def laplace_error(n):
    g = unit(n)
    L = assemble_elliptic(g)
    u = np.sin(np.pi * g.coords[0])
    Lu = apply_elliptic(L, u)
    inner = g.interior_mask
    return np.abs(Lu[inner] + np.pi**2 * u[inner]).max()


def test_laplacian_eigenfunction_second_order():
    e1, e2 = laplace_error(32), laplace_error(64)
    assert e2 < 5e-3
    assert math.log2(e1 / e2) > 1.9


def test_boundary_rows_are_zero():
    g = unit(16)
    Lu = apply_elliptic(assemble_elliptic(g), np.ones(g.shape))
    assert Lu[0] == 0 and Lu[-1] == 0


def test_zero_diffusion_rejected_with_location():
    with pytest.raises(GridError, match="node"):
        assemble_elliptic(unit(8), a=0.0, c=1.0)


def test_nonsymmetric_tensor_rejected():
    g = SpatialGrid(((0, 1), (0, 1)), (4, 4), ("x_hi",))
    a = np.zeros((2, 2) + g.shape)
    a[0, 0] = a[1, 1] = 1.0
    a[0, 1] = 0.3
    with pytest.raises(GridError, match="symmetric"):
        assemble_elliptic(g, a=a)


def test_ellipticity_bound_m_enforced():
    g = unit(8)
    with pytest.raises(GridError, match="m=1.5"):
        assemble_elliptic(g, a=lambda x: 1 + x, m=1.5)
    assert assemble_elliptic(g, a=lambda x: 1 + x, m=2.0).m == 2.0


def symbolic_case_error(n):
    x = sympy.symbols("x")
    a, u = 1 + x / 2, x**2 * (1 - x) ** 2
    exact = sympy.lambdify(x, sympy.diff(a * sympy.diff(u, x), x) + sympy.diff(u, x))
    g = unit(n)
    X = g.coords[0]
    L = assemble_elliptic(g, a=lambda x: 1 + x / 2, b=1.0)
    Lu = L.apply(X**2 * (1 - X) ** 2)
    inner = g.interior_mask
    return np.abs(Lu[inner] - exact(X)[inner]).max()


def test_variable_coefficient_matches_symbolic_expansion():
    e1, e2 = symbolic_case_error(32), symbolic_case_error(64)
    assert e2 < 5e-3
    assert e1 / e2 > 3.5


def test_zero_field_maps_to_zero():
    g = unit(16)
    assert not np.any(assemble_elliptic(g, 1.0, 0.5, 2.0).apply(np.zeros(g.shape)))


def test_apply_matches_dense_matrix():
    g = unit(16)  # 17 nodes
    L = assemble_elliptic(g, a=lambda x: 2 + np.sin(x), b=lambda x: x, c=lambda x: -x**2)
    u = np.random.default_rng(3).normal(size=g.shape)
    assert np.allclose(L.apply(u), L.matrix.toarray() @ u, rtol=0, atol=1e-12)


def test_shape_mismatch_rejected():
    L = assemble_elliptic(unit(8))
    with pytest.raises(GridError):
        L.apply(np.zeros(5))


def test_laplacian_matrix_symmetric_1d_and_2d():
    for g in (unit(12), SpatialGrid(((0, 1), (0, 2)), (6, 8), ("x_hi",))):
        M = assemble_elliptic(g).interior_matrix
        assert abs(M - M.T).max() == 0


def test_cross_diffusion_2d_symmetric_and_accurate():
    def err(n):
        g = SpatialGrid(((0, 1), (0, 1)), (n, n), ("x_hi",))
        a = np.zeros((2, 2) + g.shape)
        a[0, 0] = 2.0
        a[1, 1] = 1.0
        a[0, 1] = a[1, 0] = 0.5
        L = assemble_elliptic(g, a=a)
        M = L.interior_matrix
        assert abs(M - M.T).max() < 1e-9
        X, Y = g.coords
        u = np.sin(np.pi * X) * np.sin(np.pi * Y)
        exact = -3 * np.pi**2 * u + np.pi**2 * np.cos(np.pi * X) * np.cos(np.pi * Y)
        return np.abs(L.apply(u) - exact)[g.interior_mask].max()

    assert err(16) / err(32) > 3.5


def test_sobolev_norm_examples():
    g = unit(256)
    assert discrete_sobolev_norm(np.zeros(g.shape), g, 2) == 0.0
    assert discrete_sobolev_norm(np.ones(g.shape), g, 0) == pytest.approx(1.0, abs=1e-14)
    u = np.sin(np.pi * g.coords[0])
    exact = math.sqrt(0.5 * (1 + math.pi**2 + math.pi**4))
    assert discrete_sobolev_norm(u, g, 2) == pytest.approx(exact, rel=1e-3)


def test_sobolev_norm_rejects_empty_region_and_bad_order():
    g = unit(8)
    with pytest.raises(GridError):
        discrete_sobolev_norm(np.ones(g.shape), g, 1, np.zeros(g.shape, bool))
    with pytest.raises(GridError):
        discrete_sobolev_norm(np.ones(g.shape), g, 5)


def test_h4_norm_of_polynomial():
    g = unit(64)
    u = g.coords[0] ** 4
    # only |alpha| = 4 contributes 24^2 beyond the lower terms
    assert discrete_sobolev_norm(u, g, 4) ** 2 - discrete_sobolev_norm(u, g, 3) ** 2 == pytest.approx(576, rel=1e-8)


finite = st.floats(-1e3, 1e3, allow_nan=False)


@settings(max_examples=30, deadline=None)
@given(alpha=finite, beta=finite, seed=st.integers(0, 2**16))
def test_operator_is_linear(alpha, beta, seed):
    g = SpatialGrid(((0, 1), (0, 1)), (5, 7), ("y_lo",))
    L = assemble_elliptic(g, a=lambda x, y: 1 + x * y, b=0.3, c=lambda x, y: x)
    rng = np.random.default_rng(seed)
    u, v = rng.normal(size=(2,) + g.shape)
    lhs = L.apply(alpha * u + beta * v)
    rhs = alpha * L.apply(u) + beta * L.apply(v)
    assert np.allclose(lhs, rhs, rtol=1e-10, atol=1e-9 * (1 + abs(alpha) + abs(beta)))


@settings(max_examples=30, deadline=None)
@given(scale=st.floats(-1e6, 1e6, allow_nan=False), order=st.sampled_from([0, 1, 2, 4]), seed=st.integers(0, 999))
def test_sobolev_norm_absolutely_homogeneous(scale, order, seed):
    g = unit(20)
    u = np.random.default_rng(seed).normal(size=g.shape)
    n1 = discrete_sobolev_norm(scale * u, g, order)
    assert n1 == pytest.approx(abs(scale) * discrete_sobolev_norm(u, g, order), rel=1e-10, abs=1e-300)


@settings(max_examples=20, deadline=None)
@given(l1=st.floats(0.5, 3.0), l2=st.floats(0.5, 3.0), theta=st.floats(0, math.pi))
def test_ellipticity_probe_accepts_spd_tensor(l1, l2, theta):
    g = SpatialGrid(((0, 1), (0, 1)), (3, 3), ("x_hi",))
    Q = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    A = Q @ np.diag([l1, l2]) @ Q.T
    A = 0.5 * (A + A.T)
    a = np.broadcast_to(A[:, :, None, None], (2, 2) + g.shape)
    m = check_ellipticity(g, a)
    assert 1.0 <= m <= max(l1, l2, 1 / l1, 1 / l2) + 1e-9
    assert check_ellipticity(g, a, m) == m


def test_grid_validation():
    with pytest.raises(GridError):
        SpatialGrid.interval(0, 1, 1)
    with pytest.raises(GridError):
        SpatialGrid.interval(1, 0, 8)
    with pytest.raises(GridError):
        SpatialGrid.interval(0, 1, 8, "y_hi")
    with pytest.raises(GridError):
        SpatialGrid(((0, 1), (0, 1)), (4, 4), ())


def test_time_grid_validation():
    tg = TimeGrid(1.0, 64, 32)
    assert tg.t0 == 0.5 and tg.delta == pytest.approx(0.225)
    with pytest.raises(GridError, match="t0"):
        TimeGrid(1.0, 64, 0)
    with pytest.raises(GridError, match="delta"):
        TimeGrid(1.0, 64, 32, delta=0.3)


def test_field_rejects_bad_shape_and_nonfinite():
    g = unit(4)
    with pytest.raises(GridError):
        Field(g, np.zeros(3))
    bad = np.zeros(g.shape)
    bad[2] = np.nan
    with pytest.raises(GridError):
        Field(g, bad)


def test_snapshot_roundtrip_and_csv(tmp_path):
    g = SpatialGrid(((0, 1), (0, 2)), (3, 4), ("x_hi", "y_lo"))
    tg = TimeGrid(1.0, 4, 2, 0.2)
    vals = np.random.default_rng(0).normal(size=(5,) + g.shape)
    fld = Field(g, vals, tg)
    save_field(tmp_path / "f.npz", fld)
    back = load_field(tmp_path / "f.npz")
    assert back.grid == g and back.times == tg
    assert np.array_equal(back.values, vals)
    export_csv(tmp_path / "f.csv", fld)
    rows = list(csv.reader(open(tmp_path / "f.csv")))
    assert rows[0] == ["t", "x", "y", "value"]
    assert len(rows) == 1 + 5 * g.size
    assert float(rows[-1][-1]) == vals[-1, -1, -1]


def test_equation_coefficients():
    with pytest.raises(GridError, match="rho1"):
        EquationCoefficients(0.0, 1.0)
    with pytest.raises(GridError, match="rho2"):
        EquationCoefficients(1.0, 0.0)
    assert EquationCoefficients(1.0, 0.0, allow_degenerate=True).rho2 == 0.0
    assert EquationCoefficients(2.0, -1.0).rho2 == -1.0
