"""Monitored quantities: energy balance, Serrin norms, acceleration
functionals, C1 norm of the displacement and weak-strong distances.

Trajectories are sequences of CoupledState (fluid may be None for
shell-only runs).  Norms of fluid quantities are computed on the reference
grid; L2 and L^s norms carry the volume weight J so they are norms on the
deformed domain.
"""
from dataclasses import dataclass, fields
import math

import numpy as np

from . import _fourier
from .errors import InvalidPair, MarginExceeded
from .geometry import DisplacementField
from .mac import CELL, P_LAT, V1_LAT, V2_LAT, V3_LAT, flat_plate_coefficients


# -- Serrin ---------------------------------------------------------------
@dataclass(frozen=True)
class SerrinConfig:
    r: float = 4.0
    s: float = 6.0
    quadrature: str = "trapezoid"

    def __post_init__(self):
        r, s = self.r, self.s
        if not (2 <= r < math.inf):
            raise InvalidPair(f"r = {r} outside [2, inf)")
        if not (s > 3):
            raise InvalidPair(f"s = {s} outside (3, inf]")
        if 2.0 / r + (0.0 if math.isinf(s) else 3.0 / s) > 1.0 + 1e-12:
            raise InvalidPair(f"2/r + 3/s = {2 / r + 3 / s:.4g} > 1")
        if self.quadrature not in ("trapezoid", "left"):
            raise ValueError("quadrature must be 'trapezoid' or 'left'")


def time_integral(times, values, rule="trapezoid"):
    t = np.asarray(times, float)
    v = np.asarray(values, float)
    if t.size < 2:
        return 0.0
    dt = np.diff(t)
    if rule == "left":
        return float(np.sum(dt * v[:-1]))
    return float(np.sum(dt * 0.5 * (v[1:] + v[:-1])))


def serrin_from_norms(times, norms, cfg=SerrinConfig()):
    """(int ||v(t)||_{L^s}^r dt)^{1/r} from sampled spatial norms."""
    vals = np.asarray(norms, float) ** cfg.r
    return time_integral(times, vals, cfg.quadrature) ** (1.0 / cfg.r)


def cell_velocity(grid, x):
    """Velocity interpolated to cell centres, shape (3, N, N, N)."""
    v1, v2, v3 = grid.split(x)
    c1 = 0.5 * (v1 + np.roll(v1, -1, axis=1))
    c2 = 0.5 * (v2 + np.roll(v2, -1, axis=2))
    c3 = 0.5 * (v3[1:] + v3[:-1])
    return np.stack([c1, c2, c3])


def velocity_lebesgue_norm(grid, x, J, s):
    """||v||_{L^s(Omega_eta)} with cell-centred values and volume weight J."""
    v = cell_velocity(grid, x)
    mag = np.sqrt(np.sum(v**2, axis=0)).ravel()
    if math.isinf(s):
        return float(mag.max()) if mag.size else 0.0
    return float(np.sum(J * mag**s) * grid.h**3) ** (1.0 / s)


def serrin_norm(problem, traj, cfg=SerrinConfig()):
    """C1 = ||v||_{L^r(L^s)} over a trajectory of coupled states."""
    times, norms = [], []
    for st in traj:
        co = flat_plate_coefficients(problem.grid, problem.geom, st.shell.eta)
        norms.append(velocity_lebesgue_norm(problem.grid, st.fluid.v, co.J[P_LAT], cfg.s))
        times.append(st.t)
    return serrin_from_norms(times, norms, cfg)


# -- spatial norms ----------------------------------------------------------
def shell_norms(eta, eta_dot):
    """Squared L2 norms of shell quantities used by the audits."""
    lap = _fourier.laplacian(eta)
    g1, g2 = _fourier.gradient(eta_dot)
    l1, l2 = _fourier.gradient(lap)
    return {
        "dt_grad_eta": float(np.mean(g1**2 + g2**2)),
        "grad_lap_eta": float(np.mean(l1**2 + l2**2)),
        "lap_eta": float(np.mean(lap**2)),
        "dt_eta": float(np.mean(eta_dot**2)),
        "dt_lap_eta": float(np.mean(_fourier.laplacian(eta_dot) ** 2)),
    }


def c1_norm(eta, refine=4):
    """max(|eta|_inf, |grad eta|_inf) on a refined spectral evaluation grid."""
    vals = eta.values if isinstance(eta, DisplacementField) else np.asarray(eta, float)
    off = eta.offset if isinstance(eta, DisplacementField) else 0.5
    g1, g2 = _fourier.gradient(vals)
    e = _fourier.refine(vals, refine, off)
    r1 = _fourier.refine(g1, refine, off)
    r2 = _fourier.refine(g2, refine, off)
    return float(max(np.abs(e).max(), np.sqrt(r1**2 + r2**2).max()))


def _with_walls(grid, x):
    """Full component fields including wall values (zero) for v1, v2."""
    n = grid.n
    v1, v2, v3 = grid.split(x)
    out = []
    for v in (v1, v2):
        e = np.zeros((n + 2, n, n))
        e[1:-1] = v
        e[0] = -v[0]
        e[-1] = -v[-1]
        out.append(e)
    out.append(v3)
    return out


def grad_norm_sq(problem, x):
    """||grad v||^2 with the identity-coefficient stiffness."""
    return float(x @ problem.ops.apply_diffusion(problem.identity, x))


def hessian_norm_sq(grid, x):
    """sum_i ||grad^2 v_i||^2 from centred second differences (interior levels)."""
    h = grid.h
    total = 0.0
    for u in _with_walls(grid, x):
        inner = slice(1, u.shape[0] - 1)
        c = u[inner]
        d11 = (np.roll(c, -1, 1) - 2 * c + np.roll(c, 1, 1)) / h**2
        d22 = (np.roll(c, -1, 2) - 2 * c + np.roll(c, 1, 2)) / h**2
        d33 = (u[2:] - 2 * c + u[:-2]) / h**2
        d12 = (np.roll(np.roll(c, -1, 1), -1, 2) - np.roll(np.roll(c, -1, 1), 1, 2)
               - np.roll(np.roll(c, 1, 1), -1, 2) + np.roll(np.roll(c, 1, 1), 1, 2)) / (4 * h**2)
        up, dn = u[2:], u[:-2]
        d13 = (np.roll(up, -1, 1) - np.roll(up, 1, 1) - np.roll(dn, -1, 1) + np.roll(dn, 1, 1)) / (4 * h**2)
        d23 = (np.roll(up, -1, 2) - np.roll(up, 1, 2) - np.roll(dn, -1, 2) + np.roll(dn, 1, 2)) / (4 * h**2)
        s = d11**2 + d22**2 + d33**2 + 2 * (d12**2 + d13**2 + d23**2)
        total += float(np.sum(s) * h**3)
    return total


def pressure_grad_norm_sq(grid, p):
    h = grid.h
    d1 = (np.roll(p, -1, 1) - p) / h
    d2 = (np.roll(p, -1, 2) - p) / h
    d3 = (p[1:] - p[:-1]) / h
    return float((np.sum(d1**2) + np.sum(d2**2) + np.sum(d3**2)) * h**3)


# -- per-step records ---------------------------------------------------------
@dataclass
class DiagnosticsRecord:
    step: int
    t: float
    dt: float
    energy: float
    shell_kinetic: float
    shell_elastic: float
    fluid_kinetic: float
    shell_dissipation_cum: float
    fluid_dissipation_cum: float
    work_cum: float
    numerical_dissipation_cum: float
    energy_defect: float
    serrin_accum: float
    serrin_C1: float
    c1_eta: float
    dt_grad_eta_sq: float
    grad_lap_eta_sq: float
    grad_v_sq: float
    int_dt_lap_eta_sq: float
    int_dtt_eta_sq: float
    int_hess_v_sq: float
    int_dt_v_sq: float
    int_grad_p_sq: float
    accel_lhs: float
    accel_rhs: float
    accel_ratio: float
    min_normal_dot: float
    min_area_element: float
    height_margin: float
    lipschitz: float
    iterations: int
    max_ratio: float
    kinematic_residual: float
    pressure_constant: float

    @classmethod
    def columns(cls):
        return [f.name for f in fields(cls)]

    def row(self):
        return [getattr(self, c) for c in self.columns()]


class DiagnosticsMonitor:
    """Streaming accumulator producing one DiagnosticsRecord per step."""

    def __init__(self, problem, initial, serrin=SerrinConfig(), data_norm=0.0):
        from .stepper import total_energy  # local import avoids a cycle

        self.problem = problem
        self.serrin = serrin
        self.prev = initial
        self.E0 = total_energy(problem, initial)
        self.cum = {"ds": 0.0, "df": 0.0, "w": 0.0, "num": 0.0, "serrin": 0.0, "dtlap": 0.0, "dtt": 0.0,
                    "hess": 0.0, "dtv": 0.0, "gp": 0.0, "f2": 0.0, "g2": 0.0}
        self.sup = {"dtg": 0.0, "gl": 0.0, "gv": 0.0}
        sn = shell_norms(initial.shell.eta.values, initial.shell.eta_dot.values)
        self.rhs0 = sn["dt_grad_eta"] + sn["grad_lap_eta"] + grad_norm_sq(problem, initial.fluid.v)
        self.data_norm = data_norm
        self._ls_prev = self._ls_norm(initial)
        self.records = [self._record(initial, None, 0.0)]

    def _ls_norm(self, st):
        co = flat_plate_coefficients(self.problem.grid, self.problem.geom, st.shell.eta)
        return velocity_lebesgue_norm(self.problem.grid, st.fluid.v, co.J[P_LAT], self.serrin.s)

    def _record(self, st, rec, dt):
        from .geometry import degeneracy_margins
        from .shell import shell_energy
        from .stepper import fluid_kinetic_energy

        p = self.problem
        co = flat_plate_coefficients(p.grid, p.geom, st.shell.eta)
        se = shell_energy(p.shell_params, st.shell)
        fk = fluid_kinetic_energy(p, st.fluid.v, co)
        E = se.total + fk
        sn = shell_norms(st.shell.eta.values, st.shell.eta_dot.values)
        gv = grad_norm_sq(p, st.fluid.v)
        self.sup["dtg"] = max(self.sup["dtg"], sn["dt_grad_eta"])
        self.sup["gl"] = max(self.sup["gl"], sn["grad_lap_eta"])
        self.sup["gv"] = max(self.sup["gv"], gv)
        lhs = (self.sup["dtg"] + self.sup["gl"] + self.sup["gv"] + self.cum["dtlap"]
               + self.cum["dtt"] + self.cum["hess"] + self.cum["dtv"] + self.cum["gp"])
        rhs = self.rhs0 + self.cum["f2"] + self.cum["g2"]
        m = degeneracy_margins(p.geom, st.shell.eta)
        defect = E + self.cum["ds"] + self.cum["df"] + self.cum["num"] - self.cum["w"] - self.E0
        return DiagnosticsRecord(
            step=st.step, t=st.t, dt=dt, energy=E, shell_kinetic=se.kinetic,
            shell_elastic=se.elastic, fluid_kinetic=fk,
            shell_dissipation_cum=self.cum["ds"], fluid_dissipation_cum=self.cum["df"],
            work_cum=self.cum["w"], numerical_dissipation_cum=self.cum["num"], energy_defect=defect,
            serrin_accum=self.cum["serrin"], serrin_C1=self.cum["serrin"] ** (1 / self.serrin.r),
            c1_eta=c1_norm(st.shell.eta),
            dt_grad_eta_sq=sn["dt_grad_eta"], grad_lap_eta_sq=sn["grad_lap_eta"], grad_v_sq=gv,
            int_dt_lap_eta_sq=self.cum["dtlap"], int_dtt_eta_sq=self.cum["dtt"],
            int_hess_v_sq=self.cum["hess"], int_dt_v_sq=self.cum["dtv"], int_grad_p_sq=self.cum["gp"],
            accel_lhs=lhs, accel_rhs=rhs, accel_ratio=lhs / rhs if rhs > 0 else float("nan"),
            min_normal_dot=m.min_normal_dot, min_area_element=m.min_area_element,
            height_margin=m.height_margin, lipschitz=m.lipschitz,
            iterations=0 if rec is None else rec.iterations,
            max_ratio=0.0 if rec is None else rec.max_ratio,
            kinematic_residual=0.0 if rec is None else rec.kinematic_residual,
            pressure_constant=0.0 if rec is None else rec.pressure_constant,
        )

    def update(self, st, rec, f_sq=0.0, g_sq=0.0):
        """Accumulate one accepted step (rec is the stepper's StepRecord)."""
        p = self.problem
        dt = rec.dt
        self.cum["ds"] += dt * rec.shell_dissipation
        self.cum["df"] += dt * rec.fluid_dissipation
        self.cum["w"] += dt * rec.work
        self.cum["num"] += dt * rec.numerical_dissipation
        ls = self._ls_norm(st)
        if self.serrin.quadrature == "left":
            self.cum["serrin"] += dt * self._ls_prev**self.serrin.r
        else:
            self.cum["serrin"] += dt * 0.5 * (self._ls_prev**self.serrin.r + ls**self.serrin.r)
        self._ls_prev = ls
        u0 = self.prev.shell.eta_dot.values
        u1 = st.shell.eta_dot.values
        self.cum["dtlap"] += dt * float(np.mean(_fourier.laplacian(u1) ** 2))
        self.cum["dtt"] += dt * float(np.mean(((u1 - u0) / dt) ** 2))
        self.cum["hess"] += dt * hessian_norm_sq(p.grid, st.fluid.v)
        co = flat_plate_coefficients(p.grid, p.geom, st.shell.eta)
        dv = (st.fluid.v - self.prev.fluid.v) / dt
        self.cum["dtv"] += dt * float(np.sum(p.ops.mass_diag(co) * dv**2))
        self.cum["gp"] += dt * pressure_grad_norm_sq(p.grid, st.fluid.p)
        self.cum["f2"] += dt * f_sq
        self.cum["g2"] += dt * g_sq
        self.prev = st
        r = self._record(st, rec, dt)
        self.records.append(r)
        return r


# -- energy audit ---------------------------------------------------------------
@dataclass
class EnergyAuditRow:
    t: float
    energy: float
    step_defect: float
    cumulative_defect: float
    violated: bool


def energy_audit(records, slack=1e-6):
    """Check E(t_{n+1}) + dt (dissipation - work) <= E(t_n) (1 + slack).

    ``records`` are stepper StepRecords.  step_defect is the signed excess
    E_{n+1} + dt D - dt W - E_n; a row is flagged when it exceeds
    slack * E_n.  The cumulative column is E(t) + int D - int W - E(0).
    """
    rows = []
    if not records:
        return rows
    E0 = records[0].energy_before
    cum = 0.0
    for r in records:
        d = r.energy_after + r.dt * (r.fluid_dissipation + r.shell_dissipation - r.work) - r.energy_before
        cum += r.dt * (r.fluid_dissipation + r.shell_dissipation - r.work)
        rows.append(EnergyAuditRow(
            t=r.t, energy=r.energy_after, step_defect=d,
            cumulative_defect=r.energy_after + cum - E0,
            violated=bool(d > slack * max(abs(r.energy_before), 1e-300)),
        ))
    return rows


def static_energy(problem, state):
    """Total energy; the fluid term is skipped when the fluid is at rest."""
    from .shell import shell_energy
    from .stepper import fluid_kinetic_energy

    E = shell_energy(problem.shell_params, state.shell).total
    if state.fluid is not None and np.any(state.fluid.v != 0):
        co = flat_plate_coefficients(problem.grid, problem.geom, state.shell.eta)
        E += fluid_kinetic_energy(problem, state.fluid.v, co)
    return E


# -- acceleration functionals -------------------------------------------------
@dataclass
class AccelerationSeries:
    t: np.ndarray
    dt_grad_eta_sq: np.ndarray
    grad_lap_eta_sq: np.ndarray
    grad_v_sq: np.ndarray
    int_dt_lap_eta_sq: np.ndarray
    int_dtt_eta_sq: np.ndarray
    int_hess_v_sq: np.ndarray
    int_dt_v_sq: np.ndarray
    int_grad_p_sq: np.ndarray
    lhs: np.ndarray
    rhs: np.ndarray

    @property
    def ratio(self):
        """Left/right ratio of the acceleration estimate (constant proxy)."""
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.rhs > 0, self.lhs / self.rhs, np.nan)


def acceleration_functionals(traj, problem=None, f_sq=None, g_sq=None):
    """Every term of the acceleration estimate along a trajectory.

    ``traj`` is a list of CoupledState (fluid may be None).  Time
    derivatives are backward differences of consecutive states.  ``f_sq``
    and ``g_sq`` are per-step squared data norms (len(traj) - 1 values).
    """
    m = len(traj)
    t = np.array([s.t for s in traj])
    out = {k: np.zeros(m) for k in ("dtg", "gl", "gv", "dtlap", "dtt", "hess", "dtv", "gp")}
    f_sq = np.zeros(m - 1) if f_sq is None else np.asarray(f_sq, float)
    g_sq = np.zeros(m - 1) if g_sq is None else np.asarray(g_sq, float)
    has_fluid = traj[0].fluid is not None and problem is not None
    for i, st in enumerate(traj):
        sn = shell_norms(st.shell.eta.values, st.shell.eta_dot.values)
        out["dtg"][i] = sn["dt_grad_eta"]
        out["gl"][i] = sn["grad_lap_eta"]
        if has_fluid:
            out["gv"][i] = grad_norm_sq(problem, st.fluid.v)
        if i == 0:
            continue
        dt = st.t - traj[i - 1].t
        u0, u1 = traj[i - 1].shell.eta_dot.values, st.shell.eta_dot.values
        inc = {
            "dtlap": float(np.mean(_fourier.laplacian(u1) ** 2)),
            "dtt": float(np.mean(((u1 - u0) / dt) ** 2)),
        }
        if has_fluid:
            co = flat_plate_coefficients(problem.grid, problem.geom, st.shell.eta)
            dv = (st.fluid.v - traj[i - 1].fluid.v) / dt
            inc["hess"] = hessian_norm_sq(problem.grid, st.fluid.v)
            inc["dtv"] = float(np.sum(problem.ops.mass_diag(co) * dv**2))
            inc["gp"] = pressure_grad_norm_sq(problem.grid, st.fluid.p)
        for k in ("dtlap", "dtt", "hess", "dtv", "gp"):
            out[k][i] = out[k][i - 1] + dt * inc.get(k, 0.0)
    sup = lambda a: np.maximum.accumulate(a)  # noqa: E731
    lhs = (sup(out["dtg"]) + sup(out["gl"]) + sup(out["gv"]) + out["dtlap"] + out["dtt"]
           + out["hess"] + out["dtv"] + out["gp"])
    dts = np.diff(t)
    data = np.concatenate([[0.0], np.cumsum(dts * (f_sq + g_sq))])
    rhs = out["dtg"][0] + out["gl"][0] + out["gv"][0] + data
    return AccelerationSeries(t, out["dtg"], out["gl"], out["gv"], out["dtlap"], out["dtt"],
                              out["hess"], out["dtv"], out["gp"], lhs, rhs)


# -- weak-strong distance ---------------------------------------------------------
def _column_interp(values, z_nodes, z_query):
    """Linear interpolation along axis 0 of ``values`` (levels, N, N)."""
    k = np.clip(np.searchsorted(z_nodes, z_query, side="right") - 1, 0, len(z_nodes) - 2)
    z0 = z_nodes[k]
    w = (z_query - z0) / (z_nodes[k + 1] - z0)
    lo = np.take_along_axis(values, k, axis=0)
    hi = np.take_along_axis(values, k + 1, axis=0)
    return (1 - w) * lo + w * hi


def _lattice_with_walls(grid, field, lat):
    """Column values and heights including wall values for interpolation."""
    n, h = grid.n, grid.h
    if lat[2] == CELL:
        z = np.concatenate([[0.0], (np.arange(n) + 0.5) * h, [1.0]])
        full = np.concatenate([np.zeros((1, n, n)), field, np.zeros((1, n, n))])
        return full, z
    return field, np.arange(n + 1) * h


def map_velocity(problem, eta1, eta2, x2):
    """Pull the second velocity back onto the first domain.

    For a reference node x, z = Psi_{eta1}(x) is moved by the Hanzawa map of
    the difference eta2 - eta1 (built on the deformed top of the first
    domain); then x2 = Psi_{eta2}^{-1}(z) and the second reference
    velocity is interpolated at x2.  FlatPlate maps act column-wise, so
    only vertical interpolation is needed.
    """
    geom = problem.geom
    grid = problem.grid
    delta = eta2.values - eta1.values
    if np.max(np.abs(delta)) >= geom.alpha:
        raise MarginExceeded(
            f"|eta2 - eta1|_inf = {np.max(np.abs(delta)):.4g} exceeds alpha = {geom.alpha:.4g}")
    comps = grid.split(x2)
    out = []
    for comp, lat in enumerate((V1_LAT, V2_LAT, V3_LAT)):
        _, _, Z = grid.positions(lat)
        s1, s2 = lat[0] - 0.5, lat[1] - 0.5
        e1 = DisplacementField(eta1.values).on_lattice(s1, s2)[None]
        e2 = DisplacementField(eta2.values).on_lattice(s1, s2)[None]
        d = e2 - e1
        z1 = Z + e1 * geom.cutoff(Z - 1.0)
        # vertical Hanzawa shift of the first deformed domain by delta
        z = z1 + d * geom.cutoff(z1 - 1.0 - e1)
        # invert Psi_{eta2} column-wise: s + e2 phi(s) = z - 1
        target = z - 1.0
        s = target - e2
        for _ in range(50):
            res = s + e2 * geom.cutoff(s) - target
            step = res / (1.0 + e2 * geom.cutoff.derivative(s))
            s = s - step
            if np.max(np.abs(step)) < 1e-14:
                break
        xz = np.where(Z - 1.0 > -geom.L, 1.0 + s, z)
        if np.all(d == 0):
            xz = Z
        vals, zn = _lattice_with_walls(grid, comps[comp], lat)
        out.append(_column_interp(vals, zn, np.clip(xz, 0.0, 1.0)))
    return grid.pack(*out)


@dataclass
class WeakStrongSeries:
    t: np.ndarray
    v_diff_sq: np.ndarray
    dt_eta_diff_sq: np.ndarray
    lap_eta_diff_sq: np.ndarray
    grad_v_diff_sq: np.ndarray
    dt_grad_eta_diff_sq: np.ndarray
    lhs: np.ndarray
    rhs: np.ndarray

    @property
    def distance(self):
        """Square root of the accumulated left side (scales linearly in the data)."""
        return np.sqrt(self.lhs)


def weak_strong_distance(problem, traj_a, traj_b, f_diff_sq=None, g_diff_sq=None):
    """Difference norms between two trajectories on a common time grid."""
    if len(traj_a) != len(traj_b):
        raise ValueError("trajectories must share the time grid")
    m = len(traj_a)
    t = np.array([s.t for s in traj_a])
    tb = np.array([s.t for s in traj_b])
    if np.max(np.abs(t - tb)) > 1e-12 * max(1.0, np.abs(t).max()):
        raise ValueError("trajectories must share the time grid")
    cols = {k: np.zeros(m) for k in ("v", "dte", "lape", "gv", "dtge")}
    for i, (a, b) in enumerate(zip(traj_a, traj_b)):
        xb = map_velocity(problem, a.shell.eta, b.shell.eta, b.fluid.v)
        dv = a.fluid.v - xb
        co = flat_plate_coefficients(problem.grid, problem.geom, a.shell.eta)
        cols["v"][i] = float(np.sum(problem.ops.mass_diag(co) * dv**2))
        cols["gv"][i] = grad_norm_sq(problem, dv)
        de = a.shell.eta.values - b.shell.eta.values
        du = a.shell.eta_dot.values - b.shell.eta_dot.values
        cols["dte"][i] = float(np.mean(du**2))
        cols["lape"][i] = float(np.mean(_fourier.laplacian(de) ** 2))
        g1, g2 = _fourier.gradient(du)
        cols["dtge"][i] = float(np.mean(g1**2 + g2**2))
    sup = np.maximum.accumulate
    integ = lambda a: np.concatenate([[0.0], np.cumsum(np.diff(t) * a[1:])])  # noqa: E731
    lhs = sup(cols["v"]) + sup(cols["dte"]) + sup(cols["lape"]) + integ(cols["gv"]) + integ(cols["dtge"])
    fd = np.zeros(m) if f_diff_sq is None else np.concatenate([[0.0], np.asarray(f_diff_sq, float)])
    gd = np.zeros(m) if g_diff_sq is None else np.concatenate([[0.0], np.asarray(g_diff_sq, float)])
    rhs = cols["v"][0] + cols["dte"][0] + cols["lape"][0] + integ(fd) + integ(gd)
    return WeakStrongSeries(t, cols["v"], cols["dte"], cols["lape"], cols["gv"], cols["dtge"], lhs, rhs)


def deformed_volume(problem, eta):
    """int_Omega J dx_hat; equals 1 + int eta = 1 for zero-mean eta."""
    co = flat_plate_coefficients(problem.grid, problem.geom, eta)
    return float(np.sum(co.J[P_LAT]) * problem.grid.h**3)
