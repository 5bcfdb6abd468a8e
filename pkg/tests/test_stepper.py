import numpy as np
import pytest

from shellfsi.cli_io import build_problem, fixed_point_config, initial_state, preset
from shellfsi.fluid import FluidState
from shellfsi.geometry import DisplacementField
from shellfsi.mac import flat_plate_coefficients
from shellfsi.shell import ShellState
from shellfsi.stepper import (CoupledState, FixedPointConfig, _advective, compute_perturbations,
                              fixed_point_step, run, total_energy)

SMALL = {"n_shell": 8, "n_fluid": 8}


def setup(name="free_decay", **changes):
    sc = preset(name, geometry=SMALL, **changes)
    problem = build_problem(sc)
    return sc, problem, initial_state(sc, problem)


def zero_state(problem):
    n = problem.grid.n
    return CoupledState(ShellState.zeros(n), FluidState.zeros(problem.grid))


def test_zero_data_converges_at_once():
    sc, problem, _ = setup(forcing={"f": "zero", "g": "zero"})
    st = zero_state(problem)
    new, rep, rec = fixed_point_step(problem, st, fixed_point_config(sc), 1e-2)
    assert rep.converged and rep.iterations == 1
    assert not new.fluid.v.any() and not new.shell.eta.values.any()
    assert rec.energy_after == 0.0


def test_zero_end_time_echoes_state():
    sc, problem, st = setup()
    res = run(problem, st, 0.0, 1e-3, fixed_point_config(sc))
    assert res.final is st and res.records == []


def test_perturbations_vanish_at_the_frozen_geometry():
    _, problem, st = setup()
    co = flat_plate_coefficients(problem.grid, problem.geom, st.shell.eta)
    zero = np.zeros(problem.grid.nvel)
    t = compute_perturbations(problem, co, co, zero, dt=1e-3)
    assert not t.h.any() and not t.H.any() and not t.h_vec.any()


def test_steady_perturbation_is_pure_convection():
    _, problem, st = setup()
    co = flat_plate_coefficients(problem.grid, problem.geom, st.shell.eta)
    w = np.random.default_rng(0).normal(size=problem.grid.nvel)
    t = compute_perturbations(problem, co, co, w, form="advective")
    assert np.abs(t.h).max() == 0 and np.abs(t.H).max() == 0
    assert np.allclose(t.h_vec, -_advective(problem.ops, co, w))


def test_body_force_only_enters_h_vec():
    _, problem, st = setup()
    co = flat_plate_coefficients(problem.grid, problem.geom, st.shell.eta)
    f = np.random.default_rng(1).normal(size=problem.grid.nvel)
    t = compute_perturbations(problem, co, co, np.zeros_like(f), f_load=f)
    assert np.array_equal(t.h_vec, f)


def test_step_energy_identity_and_kinematics():
    sc, problem, st = setup("smooth")
    res = run(problem, st, 0.03, 1e-2, fixed_point_config(sc))
    assert res.status == "ok" and len(res.records) == 3
    for r in res.records:
        rates = r.fluid_dissipation + r.shell_dissipation + r.numerical_dissipation - r.work
        balance = r.energy_after + r.dt * rates - r.energy_before
        assert abs(balance) <= 1e-10 * r.energy_before
        assert r.numerical_dissipation >= -1e-14
        assert r.kinematic_residual <= 1e-12
        assert r.traction_balance <= 1e-8
    fin = res.final
    assert total_energy(problem, fin) == pytest.approx(res.records[-1].energy_after, rel=1e-12)


def test_run_is_deterministic():
    sc, problem, st = setup("smooth")
    a = run(problem, st, 0.02, 1e-2, fixed_point_config(sc)).final
    b = run(problem, st, 0.02, 1e-2, fixed_point_config(sc)).final
    assert np.array_equal(a.fluid.v, b.fluid.v)
    assert np.array_equal(a.shell.eta.values, b.shell.eta.values)


def test_collapse_is_reported_as_degenerate():
    sc, problem, st = setup("collapse")
    res = run(problem, st, 1.0, 2e-3, fixed_point_config(sc))
    assert res.status == "degenerate"
    assert res.error.margins.near_degenerate
    assert res.final.shell.eta.sup() < problem.geom.alpha


def test_config_validation():
    with pytest.raises(ValueError):
        FixedPointConfig(tol=0.0)
    with pytest.raises(ValueError):
        FixedPointConfig(dt_shrink=1.5)
    with pytest.raises(ValueError):
        FixedPointConfig(theta=0.0)


def test_displacement_values_keep_zero_mean():
    _, problem, st = setup("smooth")
    new, _, _ = fixed_point_step(problem, st, FixedPointConfig(), 1e-2)
    assert abs(new.shell.eta.values.mean()) < 1e-15
    assert isinstance(new.shell.eta, DisplacementField)
