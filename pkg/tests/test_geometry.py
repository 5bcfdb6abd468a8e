import numpy as np
import pytest

from shellfsi.errors import DegenerateDisplacement, NonPositiveJacobian, OutsideDomain
from shellfsi.geometry import (DisplacementField, LinearCutoff, PolynomialCutoff,
                               ReferenceGeometry, SmoothCutoff, assemble_coefficients,
                               degeneracy_margins, hanzawa_map, inverse_hanzawa_map,
                               inverse_piola_transform, piola_divergence, piola_transform,
                               reference_grid)

TWO_PI = 2 * np.pi


def const(c, n=16):
    return DisplacementField(np.full((n, n), c), zero_mean=False)


def wave(c=0.05, n=32):
    return DisplacementField.from_function(lambda y: c * np.sin(TWO_PI * y[..., 0]), n)


@pytest.fixture
def flat():
    return ReferenceGeometry("FlatPlate")


# cutoff profiles -------------------------------------------------------------------------
@pytest.mark.parametrize("cut", [PolynomialCutoff(-0.5, 0.0), SmoothCutoff(-0.5, 0.0)])
def test_cutoff_limits_and_derivative(cut):
    s = np.linspace(-0.7, 0.2, 181)
    v = cut(s)
    assert np.all(v[s <= -0.5] == 0) and np.all(v[s >= 0] == 1)
    assert np.all(np.diff(v) >= 0)
    h = 1e-6
    fd = (cut(s + h) - cut(s - h)) / (2 * h)
    assert np.allclose(cut.derivative(s), fd, atol=1e-6)
    assert cut.derivative(s).max() <= cut.max_slope * (1 + 1e-12)


def test_septic_cutoff_midpoint_and_peak_slope():
    cut = PolynomialCutoff(-0.5, 0.0)
    # t^4 (35 - 84 t + 70 t^2 - 20 t^3) at t = 1/2 is 8/16
    assert cut(-0.25) == pytest.approx(0.5, abs=1e-15)
    assert cut.derivative(-0.25) == pytest.approx(35 / 16 / 0.5, rel=1e-14)


def test_geometry_rejects_steep_cutoff():
    with pytest.raises(ValueError):
        ReferenceGeometry("FlatPlate", L=0.5, alpha=0.25)
    with pytest.raises(ValueError):
        ReferenceGeometry("Sphere", L=1.0, radius=1.0)


# Hanzawa map -----------------------------------------------------------------------------
def test_zero_displacement_is_identity(flat):
    x = np.random.default_rng(0).uniform(0, 1, (200, 3))
    assert np.array_equal(hanzawa_map(flat, DisplacementField.zeros(16), x), x)


def test_constant_displacement_moves_the_top(flat):
    out = hanzawa_map(flat, const(0.1), np.array([0.3, 0.7, 1.0]))
    assert np.allclose(out, [0.3, 0.7, 1.1], atol=1e-15)


def test_interior_shift_uses_cutoff_value(flat):
    eta = DisplacementField.from_function(lambda y: 0.05 * np.sin(TWO_PI * y[..., 0]), 32,
                                          analytic=True)
    x = np.array([0.2, 0.4, 1.0 - flat.L / 2])
    # septic profile at the middle of its ramp is exactly 1/2
    shift = 0.05 * 0.5 * np.sin(TWO_PI * 0.2)
    assert np.allclose(hanzawa_map(flat, eta, x), x + [0, 0, shift], atol=1e-15)


def test_map_rejects_large_displacement_and_outside_points(flat):
    with pytest.raises(DegenerateDisplacement):
        hanzawa_map(flat, const(flat.alpha), np.array([0.5, 0.5, 0.5]))
    with pytest.raises(OutsideDomain):
        hanzawa_map(flat, const(0.0), np.array([0.5, 0.5, 1.2]))
    with pytest.raises(OutsideDomain):
        inverse_hanzawa_map(flat, const(0.05), np.array([0.5, 0.5, 1.1]))


@pytest.mark.parametrize("kind", ["FlatPlate", "Cylinder", "Sphere"])
def test_inverse_round_trip(kind):
    geom = ReferenceGeometry(kind)
    eta = DisplacementField.from_function(
        lambda y: 0.05 * np.sin(np.pi * y[..., 1]) ** 2 * np.cos(TWO_PI * y[..., 0]), 32,
        analytic=True)
    rng = np.random.default_rng(3)
    if kind == "FlatPlate":
        x = rng.uniform(0, 1, (500, 3))
    else:
        y = rng.uniform(0.05, 0.95, (500, 2))
        x = geom.boundary_point(y) + rng.uniform(-0.8, -0.01, (500, 1)) * geom.normal(y)
    back = inverse_hanzawa_map(geom, eta, hanzawa_map(geom, eta, x))
    assert np.abs(back - x).max() < 1e-10


# coefficients ----------------------------------------------------------------------------
def test_zero_displacement_coefficients_are_identity(flat):
    x = np.random.default_rng(1).uniform(0, 1, (100, 3))
    z = DisplacementField.zeros(16)
    co = assemble_coefficients(flat, z, z, x)
    assert np.array_equal(co.J, np.ones(100))
    assert np.array_equal(co.A, np.broadcast_to(np.eye(3), (100, 3, 3)))
    assert np.array_equal(co.B, np.broadcast_to(np.eye(3), (100, 3, 3)))
    assert np.array_equal(co.w_mesh, np.zeros((100, 3)))


def test_vertical_stretch_closed_form():
    c = 0.1
    geom = ReferenceGeometry("FlatPlate", L=1.0, cutoff=LinearCutoff(1.0))
    x = np.array([[0.2, 0.3, 0.4], [0.7, 0.1, 0.9]])
    for method in ("fd", "analytic"):
        co = assemble_coefficients(geom, const(c), None, x, method=method)
        assert np.allclose(co.J, 1 + c, atol=1e-10)
        assert np.allclose(co.B, np.diag([1 + c, 1 + c, 1.0]), atol=1e-10)
        assert np.allclose(co.A, np.diag([1 + c, 1 + c, 1 / (1 + c)]), atol=1e-10)


def test_fd_coefficients_match_closed_form(flat):
    eta = DisplacementField.from_function(
        lambda y: 0.05 * np.sin(TWO_PI * y[..., 0]) * np.cos(TWO_PI * y[..., 1]), 32)
    x = np.random.default_rng(2).uniform(0.05, 0.95, (300, 3))
    errs = []
    for h in (4e-3, 2e-3):
        fd = assemble_coefficients(flat, eta, None, x, h=h)
        an = assemble_coefficients(flat, eta, None, x, method="analytic")
        errs.append(np.abs(fd.B - an.B).max())
    assert errs[1] < 1e-4
    assert errs[0] / errs[1] == pytest.approx(4.0, rel=0.05)


def test_mesh_velocity_for_constant_rate(flat):
    x = np.array([[0.5, 0.5, 1.0 - flat.L / 2]])
    co = assemble_coefficients(flat, const(0.0), const(2.0), x, method="analytic")
    # w = -F^{-1} dPsi/dt; F = I at eta = 0 and dPsi/dt = 2 * cutoff * e3
    assert np.allclose(co.w_mesh, [[0, 0, -1.0]], atol=1e-15)


def test_piola_round_trip(flat):
    rng = np.random.default_rng(4)
    x = rng.uniform(0.1, 0.9, (200, 3))
    co = assemble_coefficients(flat, wave(), None, x)
    w = rng.normal(size=(200, 3))
    assert np.abs(inverse_piola_transform(co, piola_transform(co, w)) - w).max() < 1e-10
    co.J[0] = -1.0
    with pytest.raises(NonPositiveJacobian):
        piola_transform(co, w)


def test_piola_divergence_second_order(flat):
    eta = DisplacementField.from_function(lambda y: 0.05 * np.sin(TWO_PI * y[..., 0]), 64,
                                          analytic=True)
    d = [piola_divergence(flat, eta, n, norm="l2") for n in (16, 32)]
    assert d[0] / d[1] > 2 ** 1.7
    assert piola_divergence(flat, DisplacementField.zeros(16), 16) == 0.0
    with pytest.raises(ValueError):
        piola_divergence(flat, eta, 16, norm="h1")


def test_reference_grid_spacing():
    X, h = reference_grid(ReferenceGeometry("Cylinder", height=2.0), 8)
    assert X.shape == (9, 9, 8, 3)
    assert h == (0.25, 0.25, 0.25)


# margins ---------------------------------------------------------------------------------
def test_margins_flat_reference(flat):
    m = degeneracy_margins(flat, DisplacementField.zeros(16))
    assert m.min_normal_dot == 1.0
    assert m.height_margin == flat.L
    assert not m.near_degenerate


def test_margins_graph_normal_closed_form(flat):
    c = 0.05
    m = degeneracy_margins(flat, wave(c))
    assert m.min_normal_dot == pytest.approx(1 / np.sqrt(1 + 4 * np.pi**2 * c**2), rel=1e-10)
    assert m.lipschitz == pytest.approx(TWO_PI * c, rel=1e-2)


def test_margins_sphere_near_collapse():
    geom = ReferenceGeometry("Sphere")
    eps = 1e-4
    eta = DisplacementField(np.full((8, 8), -geom.L + eps), func=lambda y: np.full(y.shape[:-1], -geom.L + eps),
                            zero_mean=False)
    m = degeneracy_margins(geom, eta)
    assert m.height_margin == pytest.approx(eps, abs=1e-12)
    assert m.near_degenerate
