import numpy as np
import pytest
import scipy.sparse as sp

from shellfsi.errors import IncompatibleFlux
from shellfsi.fluid import (FluidParams, FluidState, ShellCoupling, assemble_linear_system,
                            consistent_traction, recover_pressure_constant, solve_manufactured_stokes,
                            solve_saddle, solve_system, traction)
from shellfsi.geometry import DisplacementField, ReferenceGeometry
from shellfsi.mac import LatticeCoefficients, MACGrid, MACOperators, flat_plate_coefficients
from shellfsi.shell import ShellParams

TWO_PI = 2 * np.pi


def identity_system(n, dt=0.1, bc=None, rhs=None):
    grid = MACGrid(n)
    co = LatticeCoefficients.identity(grid)
    bc = np.zeros((n, n)) if bc is None else bc
    return grid, assemble_linear_system(FluidParams(), co, dt, bc, rhs=rhs, grid=grid)


def deformed(n, c=0.05):
    grid = MACGrid(n)
    geom = ReferenceGeometry("FlatPlate")
    eta = DisplacementField.from_function(
        lambda y: c * np.sin(TWO_PI * y[..., 0]) * np.cos(TWO_PI * y[..., 1]), n)
    return grid, geom, eta, flat_plate_coefficients(grid, geom, eta)


def test_zero_data_gives_zero_solution():
    _, system = identity_system(8)
    x, p, info = solve_saddle(system)
    assert not x.any() and not p.any()
    assert info.method == "trivial"


@pytest.mark.parametrize("n,method", [(8, "direct"), (16, "iterative")])
def test_random_rhs_residual(n, method):
    grid, _, _, co = deformed(n)
    system = assemble_linear_system(FluidParams(mu=0.3), co, 0.01, np.zeros((n, n)), grid=grid)
    rng = np.random.default_rng(n)
    b = rng.normal(size=system.size)
    b[system.nv:] -= b[system.nv:].mean()  # pressure rows must be compatible
    y, info = solve_system(system, b, method=method)
    assert np.linalg.norm(system.matvec(y) - b) <= 1e-9 * np.linalg.norm(b)
    assert info.residual <= 1e-9


def test_incompatible_flux_rejected():
    n = 8
    with pytest.raises(IncompatibleFlux):
        identity_system(n, bc=np.full((n, n), 0.2))
    # a compatible source balances the same flux
    grid = MACGrid(n)
    _, system = identity_system(n, bc=np.full((n, n), 0.2), rhs={"h": np.full(grid.npres, 0.2)})
    x, _, _ = solve_saddle(system)
    ops = MACOperators(grid)
    div = ops.apply_divergence(LatticeCoefficients.identity(grid), x)
    assert np.allclose(div, 0.2, atol=1e-9)


def test_discrete_gauss_identity():
    grid, _, _, co = deformed(16)
    ops = MACOperators(grid)
    x = np.random.default_rng(5).normal(size=grid.nvel)
    total = float(np.sum(ops.apply_divergence(co, x)) * grid.h**3)
    assert total == pytest.approx(ops.top_flux(x), abs=1e-12)


def test_divergence_transpose_and_matrix_agree():
    grid, _, _, co = deformed(8)
    ops = MACOperators(grid)
    rng = np.random.default_rng(6)
    x, q = rng.normal(size=grid.nvel), rng.normal(size=grid.npres)
    C = ops.divergence(co)
    assert np.allclose(C @ x, ops.apply_divergence(co, x))
    assert np.allclose(C.T @ q, ops.apply_divergence_T(co, q))


def test_diffusion_symmetric_and_convection_skew():
    grid, _, _, co = deformed(8)
    ops = MACOperators(grid)
    K = ops.diffusion(co)
    assert abs(K - K.T).max() < 1e-12
    x = np.random.default_rng(7).normal(size=grid.nvel)
    N = ops.convection(co, x)
    assert abs(N + N.T).max() == 0.0
    assert abs(x @ (N @ x)) < 1e-12
    # energy form: positive semidefinite on a random vector
    assert x @ (K @ x) > 0


def test_manufactured_stokes_second_order():
    r = [solve_manufactured_stokes(n) for n in (16, 32)]
    assert r[0].velocity_error / r[1].velocity_error > 2 ** 1.7


# traction --------------------------------------------------------------------------------
def _state(grid, vel, p=0.0):
    return FluidState(grid.sample_velocity(vel), np.full((grid.n,) * 3, float(p)))


def test_traction_of_constant_pressure():
    grid = MACGrid(8)
    zero = DisplacementField.zeros(8)
    F = traction(_state(grid, lambda a, b, c: (0 * a, 0 * a, 0 * a), 2.5), grid, zero)
    assert np.allclose(F, 2.5, atol=1e-13)


def test_traction_of_shear_and_stretch():
    grid = MACGrid(8)
    zero = DisplacementField.zeros(8)
    F = traction(_state(grid, lambda a, b, c: (c, 0 * a, 0 * a)), grid, zero)
    assert np.allclose(F, 0.0, atol=1e-12)
    F = traction(_state(grid, lambda a, b, c: (0 * a, 0 * a, c)), grid, zero, FluidParams(mu=1.0))
    assert np.allclose(F, -2.0, atol=1e-12)


def test_pressure_constant_recovery():
    grid = MACGrid(8)
    zero = DisplacementField.zeros(8)
    st = FluidState(np.zeros(grid.nvel), np.zeros((8, 8, 8)))
    assert recover_pressure_constant(st, np.zeros((8, 8)), np.zeros((8, 8)), grid, zero) == 0.0
    c = recover_pressure_constant(st, np.full((8, 8), 1.7), np.zeros((8, 8)), grid, zero)
    assert c == pytest.approx(1.7, abs=1e-14)


def test_coupled_system_traction_balance():
    n = 8
    grid, _, eta, co = deformed(n)
    y = (np.arange(n) + 0.5) / n
    Y1, _ = np.meshgrid(y, y, indexing="ij")
    coupling = ShellCoupling(ShellParams(), eta.values, 0.1 * np.cos(TWO_PI * Y1),
                             np.sin(TWO_PI * Y1))
    dt = 1e-2
    system = assemble_linear_system(FluidParams(), co, dt, coupling, grid=grid)
    yv, _ = solve_system(system)
    F = consistent_traction(system, yv)
    # the g rows: h^2 (S g - shell rhs) equals minus the fluid reaction at g
    reaction = (system.matrix @ yv)[grid.vel_slices[3]] - system.rhs[grid.vel_slices[3]] \
        + grid.h**2 * system.shell_rhs.ravel()
    assert np.allclose(grid.h**2 * F.ravel(), -reaction, atol=1e-10)
    assert isinstance(system.full_matrix(), sp.csr_matrix)
