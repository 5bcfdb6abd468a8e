import numpy as np
import pytest
from scipy.integrate import quad

from shellfsi.cli_io import build_problem, fixed_point_config, initial_state, preset
from shellfsi.diagnostics import (DiagnosticsMonitor, DiagnosticsRecord, SerrinConfig,
                                  acceleration_functionals, c1_norm, deformed_volume, energy_audit,
                                  serrin_from_norms, static_energy, velocity_lebesgue_norm,
                                  weak_strong_distance)
from shellfsi.errors import InvalidPair, MarginExceeded
from shellfsi.fluid import FluidState
from shellfsi.geometry import DisplacementField
from shellfsi.mac import MACGrid
from shellfsi.shell import ShellParams, ShellState, shell_step
from shellfsi.stepper import CoupledState, run

TWO_PI = 2 * np.pi


@pytest.fixture(scope="module")
def small():
    sc = preset("smooth", geometry={"n_shell": 8, "n_fluid": 8})
    problem = build_problem(sc)
    st = initial_state(sc, problem)
    res = run(problem, st, 0.03, 1e-2, fixed_point_config(sc))
    return sc, problem, res


# Serrin ----------------------------------------------------------------------------------
def test_serrin_unit_and_zero():
    t = np.linspace(0, 1, 11)
    assert serrin_from_norms(t, np.ones_like(t)) == pytest.approx(1.0)
    assert serrin_from_norms(t, np.zeros_like(t)) == 0.0


def test_serrin_linear_ramp():
    t = np.linspace(0, 1, 4001)
    # ||v(t)|| = t, (int t^4)^(1/4) = 5^(-1/4) = 0.66874...
    assert serrin_from_norms(t, t) == pytest.approx(5 ** -0.25, rel=1e-6)
    assert 5 ** -0.25 == pytest.approx(0.6687403, abs=1e-7)


def test_serrin_pair_validation():
    with pytest.raises(InvalidPair):
        SerrinConfig(r=2, s=3)
    with pytest.raises(InvalidPair):
        SerrinConfig(r=4, s=5)
    SerrinConfig(r=4, s=6)


def test_lebesgue_norm_of_unit_field():
    grid = MACGrid(8)
    x = grid.sample_velocity(lambda a, b, c: (1 + 0 * a, 0 * a, 0 * a))
    J = np.ones(grid.npres)
    assert velocity_lebesgue_norm(grid, x, J, 6.0) == pytest.approx(1.0, rel=1e-14)
    assert velocity_lebesgue_norm(grid, 0 * x, J, 6.0) == 0.0


# energy --------------------------------------------------------------------------------
def test_static_energy_of_sine(small):
    _, problem, _ = small
    n = problem.grid.n
    y = DisplacementField.zeros(n).positions()
    st = CoupledState(ShellState.from_arrays(np.sin(TWO_PI * y[..., 0]), np.zeros((n, n))),
                      FluidState.zeros(problem.grid))
    assert static_energy(problem, st) == pytest.approx(4 * np.pi**4, rel=1e-12)
    assert static_energy(problem, CoupledState(ShellState.zeros(n), None)) == 0.0


def test_energy_audit_flags_growth(small):
    _, _, res = small
    rows = energy_audit(res.records)
    assert len(rows) == 3 and not any(r.violated for r in rows)
    assert energy_audit([]) == []
    bad = res.records[0]
    bad = type(bad)(**{**bad.__dict__, "energy_after": bad.energy_before * 1.01})
    assert energy_audit([bad])[0].violated


def test_monitor_energy_defect_is_roundoff(small):
    sc, problem, _ = small
    st = initial_state(sc, problem)
    mon = DiagnosticsMonitor(problem, st)
    res = run(problem, st, 0.02, 1e-2, fixed_point_config(sc),
              on_step=lambda s, rec, dt, e: mon.update(s, rec))
    assert res.status == "ok" and len(mon.records) == 3
    assert max(abs(r.energy_defect) for r in mon.records) < 1e-12
    assert mon.records[0].row()[0] == 0
    assert "numerical_dissipation_cum" in DiagnosticsRecord.columns()


def test_deformed_volume_is_one(small):
    _, problem, res = small
    assert deformed_volume(problem, res.final.shell.eta) == pytest.approx(1.0, abs=1e-13)


def test_c1_norm_of_sine():
    y = DisplacementField.zeros(16).positions()
    eta = DisplacementField(0.01 * np.sin(TWO_PI * y[..., 0]))
    assert c1_norm(eta) == pytest.approx(0.01 * TWO_PI, rel=1e-3)


# acceleration ----------------------------------------------------------------------------
def test_acceleration_of_rest_state(small):
    _, problem, _ = small
    n = problem.grid.n
    st = CoupledState(ShellState.zeros(n), FluidState.zeros(problem.grid))
    st2 = CoupledState(ShellState.zeros(n), FluidState.zeros(problem.grid), t=0.1)
    acc = acceleration_functionals([st, st2], problem)
    assert not acc.lhs.any() and not acc.rhs.any()


def test_shell_decay_mode_acceleration_integral():
    p = ShellParams()
    n = 8
    y = DisplacementField.zeros(n).positions()
    st = ShellState.from_arrays(np.cos(TWO_PI * y[..., 0]), np.zeros((n, n)))
    dt, T = 1e-4, 0.1
    traj = [CoupledState(st, None, 0.0)]
    for k in range(int(round(T / dt))):
        st = shell_step(p, st, None, dt)
        traj.append(CoupledState(st, None, (k + 1) * dt))
    acc = acceleration_functionals(traj)
    lam = -2 * np.pi**2 + 2j * np.pi**2 * np.sqrt(3)
    # mode amplitude 2 Re(a e^{lam t}) with value 1 and zero rate at t = 0
    a = 0.5 * (1 + 1j * lam.real / lam.imag)
    acc2 = lambda t: 0.5 * (2 * (a * lam**2 * np.exp(lam * t)).real) ** 2  # noqa: E731
    exact = quad(acc2, 0, T, limit=200)[0]
    assert acc.int_dtt_eta_sq[-1] == pytest.approx(exact, rel=0.02)


# weak-strong -----------------------------------------------------------------------------
def test_weak_strong_self_distance(small):
    _, problem, res = small
    ws = weak_strong_distance(problem, res.states, res.states)
    assert not ws.lhs.any() and not ws.distance.any()


def test_weak_strong_rejects_mismatched_grids(small):
    _, problem, res = small
    with pytest.raises(ValueError):
        weak_strong_distance(problem, res.states, res.states[:-1])


def test_weak_strong_guard(small):
    _, problem, res = small
    st = res.states[-1]
    n = problem.grid.n
    far = np.zeros((n, n))
    far[0, 0] = problem.geom.alpha
    shifted = CoupledState(ShellState(DisplacementField(st.shell.eta.values + far, zero_mean=False),
                                      st.shell.eta_dot), st.fluid, st.t, st.step)
    with pytest.raises(MarginExceeded):
        weak_strong_distance(problem, [st], [shifted])
