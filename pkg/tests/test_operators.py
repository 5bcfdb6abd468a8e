import numpy as np
import pytest

from shellfsi.errors import BudgetExceeded, DegenerateDisplacement
from shellfsi.fluid import FluidParams, assemble_linear_system
from shellfsi.geometry import DisplacementField, ReferenceGeometry
from shellfsi.mac import LatticeCoefficients, MACGrid
from shellfsi.operators import (BogovskijOperator, boundary_weight, extend_boundary_data,
                                grid_w12_norm, half_norm, mean_correction, trace_defect)

TWO_PI = 2 * np.pi
FLAT = ReferenceGeometry("FlatPlate")


def field(func, n=16, analytic=False):
    return DisplacementField.from_function(func, n, analytic=analytic)


def wave(c=0.05):
    return lambda y: c * np.sin(TWO_PI * y[..., 0]) * np.cos(TWO_PI * y[..., 1])


@pytest.fixture(scope="module")
def bog():
    return BogovskijOperator(16)


# extension -------------------------------------------------------------------------------
def test_extension_of_zero_is_zero():
    ext = extend_boundary_data(FLAT, field(wave()), DisplacementField.zeros(16), 16)
    assert not ext.values.any()


def test_extension_of_unit_datum_on_flat_reference():
    one = DisplacementField(np.ones((16, 16)), zero_mean=False)
    ext = extend_boundary_data(FLAT, DisplacementField.zeros(16), one, 16)
    z = ext.points[0, 0, :, 2]
    assert np.allclose(ext.values[:, :, -1], [0, 0, 1], atol=0)
    assert not ext.values[:, :, z <= 1 - FLAT.L].any()
    prof = ext.values[0, 0, :, 2]
    assert np.all(np.diff(prof) >= 0)
    assert grid_w12_norm(ext) > 0


def test_extension_rejects_large_displacement():
    big = DisplacementField(np.full((16, 16), FLAT.alpha), zero_mean=False)
    with pytest.raises(DegenerateDisplacement):
        extend_boundary_data(FLAT, big, big, 16)


@pytest.mark.parametrize("kind", ["FlatPlate", "Cylinder"])
def test_trace_defect_second_order(kind):
    geom = ReferenceGeometry(kind)
    eta = field(wave(), analytic=True)
    b = field(lambda y: np.sin(TWO_PI * y[..., 0]) * np.cos(TWO_PI * y[..., 1]), analytic=True)
    d = [trace_defect(geom, eta, b, extend_boundary_data(geom, eta, b, n)) for n in (16, 32)]
    assert d[0] / d[1] > 2 ** 1.7


def test_half_norm_of_single_mode():
    y = (np.arange(16) + 0.5) / 16
    Y1, _ = np.meshgrid(y, y, indexing="ij")
    # |hat|^2 sums to 1/2, weight sqrt(1 + 4 pi^2)
    assert half_norm(np.sin(TWO_PI * Y1)) == pytest.approx(np.sqrt(0.5 * np.sqrt(1 + 4 * np.pi**2)))
    assert half_norm(np.ones((16, 16))) == pytest.approx(1.0)


# mean correction -------------------------------------------------------------------------
def test_mean_correction_flat_cases():
    zero = DisplacementField.zeros(16)
    _, K = mean_correction(FLAT, zero, np.ones((16, 16)))
    assert K == 1.0
    xi = field(lambda y: np.cos(TWO_PI * y[..., 1])).values
    corr, K = mean_correction(FLAT, field(wave()), xi)
    assert abs(K) < 1e-15 and np.allclose(corr, xi)


def test_corrected_datum_is_flux_compatible():
    n = 8
    xi = 0.3 + field(lambda y: np.sin(TWO_PI * y[..., 0]), n).values
    grid = MACGrid(n)
    co = LatticeCoefficients.identity(grid)
    corr, K = mean_correction(FLAT, DisplacementField.zeros(n), xi)
    assert K == pytest.approx(0.3)
    assemble_linear_system(FluidParams(), co, 0.1, corr, grid=grid)


def test_curved_boundary_weight_is_positive():
    geom = ReferenceGeometry("Sphere")
    eta = field(lambda y: 0.05 * np.sin(np.pi * y[..., 1]) * np.cos(np.pi * y[..., 1]), analytic=True)
    w = boundary_weight(geom, eta)
    assert w.min() > 0
    assert boundary_weight(FLAT, eta).sum() == 256


# Bogovskij -------------------------------------------------------------------------------
def test_zero_mean_datum_is_reproduced(bog):
    eta = field(wave(0.08))
    mask = bog.mask_for(eta)
    Z, X1, X2 = bog.cell_centres()
    f = np.where(mask, np.sin(TWO_PI * X1) * np.cos(TWO_PI * X2) * (1 + Z), 0.0)
    f = np.where(mask, f - f.sum() / mask.sum(), 0.0)
    res = bog.apply(eta, f)
    assert np.abs(bog.divergence(res) - f)[mask].max() < 1e-10
    assert bog.boundary_values(res) <= 1e-12


def test_constant_datum_leaves_the_bump(bog):
    eta = DisplacementField.zeros(16)
    c = 2.0
    res = bog.apply(eta, lambda x1, x2, x3: c + 0 * x1)
    mask = res.mask
    vol = mask.sum() * bog.h**3
    expected = c - c * vol * bog.bump
    assert np.abs(bog.divergence(res) - expected)[mask].max() < 1e-10
    assert np.sum(bog.bump) * bog.h**3 == pytest.approx(1.0)


def test_budget_is_enforced(bog):
    steep = field(lambda y: 0.1 * np.sin(4 * TWO_PI * y[..., 0]))
    with pytest.raises(BudgetExceeded):
        bog.apply(steep, lambda a, b, c: 1 + 0 * a)


def test_linear_in_time_dependent_data(bog):
    eta = field(wave(0.1))
    base = lambda a, b, c: np.cos(TWO_PI * a) + c**2  # noqa: E731
    f = lambda t: (lambda a, b, c: (1 + t**2) * base(a, b, c))  # noqa: E731
    t, d = 0.4, 1e-3
    up, dn = bog.apply(eta, f(t + d)), bog.apply(eta, f(t - d))
    rate = bog.apply(eta, lambda a, b, c: 2 * t * base(a, b, c))
    fd = (up.u3 - dn.u3) / (2 * d)
    assert np.abs(fd - rate.u3).max() < 1e-8 * max(1.0, np.abs(rate.u3).max())
    assert bog.w12_norm(rate) > 0
