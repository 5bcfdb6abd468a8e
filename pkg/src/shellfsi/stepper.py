"""Coupled fluid-shell time stepping by fixed-point iteration.

Each step freezes the Hanzawa coefficients at the step start and iterates
the map (zeta, w, q) -> (eta, v, p): the geometry-dependent remainders are
evaluated at the current iterate and moved to the right-hand side of a
linear coupled system whose matrix never changes within the step.

Fluid: backward Euler with the frozen J0, A0, B0.  Shell: implicit
midpoint; its mid-step velocity is the top-plane fluid velocity g, so the
kinematic condition (eta^{n+1} - eta^n) / dt = g holds exactly and the
traction is the discrete boundary reaction of the fluid rows at g.
"""
from dataclasses import dataclass, field
import logging
import time as _time

import numpy as np

from . import _fourier
from . import shell as _shell
from .errors import (
    DegenerateGeometry,
    DtUnderflow,
    NoContraction,
    NonPositiveJacobian,
    SolveFailure,
)
from .fluid import (
    FluidParams,
    FluidState,
    ShellCoupling,
    assemble_linear_system,
    consistent_traction,
    solve_system,
)
from .geometry import DisplacementField, ReferenceGeometry, degeneracy_margins
from .mac import VEL_LATS, LatticeCoefficients, MACGrid, MACOperators, flat_plate_coefficients
from .shell import ShellParams, ShellState

log = logging.getLogger(__name__)


@dataclass
class CoupledProblem:
    """Everything that stays fixed during a run."""

    geom: ReferenceGeometry
    grid: MACGrid
    shell_params: ShellParams = ShellParams()
    fluid_params: FluidParams = FluidParams()
    body_force: object = None   # f(t, x1, x2, x3) -> (f1, f2, f3), physical points
    shell_force: object = None  # g(t, y1, y2) -> array on the shell grid

    def __post_init__(self):
        self.ops = MACOperators(self.grid)
        self.identity = LatticeCoefficients.identity(self.grid)

    def shell_forcing(self, t):
        n = self.grid.n
        if self.shell_force is None:
            return np.zeros((n, n))
        y = (np.arange(n) + 0.5) / n
        Y1, Y2 = np.meshgrid(y, y, indexing="ij")
        return np.asarray(self.shell_force(t, Y1, Y2), dtype=float) * np.ones((n, n))

    def body_load(self, t, eta, co):
        """M(J) f(Psi_eta(x)) as a velocity load vector."""
        if self.body_force is None:
            return np.zeros(self.grid.nvel)
        g = self.grid
        comps = []
        for c, lat in enumerate(VEL_LATS):
            X1, X2, Z = g.positions(lat)
            e = eta.on_lattice(lat[0] - 0.5, lat[1] - 0.5)
            Zp = Z + e[None] * self.geom.cutoff(Z - 1.0)
            comps.append(np.asarray(self.body_force(t, X1, X2, Zp)[c], float) * np.ones(Z.shape))
        return self.ops.mass_diag(co) * g.pack(*comps)


@dataclass
class CoupledState:
    shell: ShellState
    fluid: FluidState
    t: float = 0.0
    step: int = 0

    def copy(self):
        s = ShellState(
            DisplacementField(self.shell.eta.values.copy()),
            DisplacementField(self.shell.eta_dot.values.copy()),
            self.shell.t,
        )
        f = FluidState(self.fluid.v.copy(), self.fluid.p.copy(), self.fluid.t)
        return CoupledState(s, f, self.t, self.step)


@dataclass(frozen=True)
class FixedPointConfig:
    max_iters: int = 50
    tol: float = 1e-8
    contraction_window: int = 3
    dt_shrink: float = 0.5
    dt_grow: float = 1.2
    theta: float = 1.0
    easy_steps: int = 5
    easy_iters: int = 4
    dt_min: float = 1e-7
    dt_max: float = np.inf
    cfl: float = 1.0
    margin_threshold: float = 1e-3
    solver: str = "auto"

    def __post_init__(self):
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if not 0 < self.dt_shrink < 1 < self.dt_grow:
            raise ValueError("need 0 < dt_shrink < 1 < dt_grow")
        if not 0 < self.theta <= 1:
            raise ValueError("relaxation must lie in (0, 1]")


@dataclass
class PerturbationTerms:
    """Right-hand sides of the linearised system at one iterate.

    h     : cell field, (B0 - B_zeta) : grad w (conservative discrete form)
    h_vec : velocity load, mass-variation, convection and body-force terms
    H     : velocity load of (A0 - A_zeta) grad w - (B0 - B_zeta) q
    """

    h: np.ndarray
    h_vec: np.ndarray
    H: np.ndarray


def compute_perturbations(problem, co0, coz, w_now, w_prev=None, q=None, f_load=None,
                          dt=None, form="skew"):
    """Perturbation terms for coefficients ``coz`` of the iterate zeta.

    ``form='skew'`` (used by the stepper) writes the mass-variation and
    transport terms in the energy-neutral form
        -1/2 (M_zeta - M0) w / dt - N(c) w,   N = (L - L^T) / 2,
    ``form='advective'`` keeps (M0 - M_zeta) dw/dt - L(c) w.
    c = J w_mesh + B^T w is the transport velocity of the iterate.
    """
    ops = problem.ops
    mu = problem.fluid_params.mu
    rho = problem.fluid_params.rho
    grid = problem.grid
    h = ops.apply_divergence(co0, w_now) - ops.apply_divergence(coz, w_now)
    H = ops.apply_diffusion(co0, w_now, mu) - ops.apply_diffusion(coz, w_now, mu)
    if q is not None:
        qq = np.ravel(q)
        H -= grid.h**3 * (ops.apply_divergence_T(co0, qq) - ops.apply_divergence_T(coz, qq))
    hv = np.zeros(grid.nvel)
    m0, mz = ops.mass_diag(co0), ops.mass_diag(coz)
    if form == "skew":
        N = ops.convection(coz, w_now)
        if dt is not None:
            hv -= 0.5 * rho * (mz - m0) * w_now / dt
        hv -= rho * (N @ w_now)
    elif form == "advective":
        if dt is not None and w_prev is not None:
            hv += rho * (m0 - mz) * (w_now - w_prev) / dt
        hv -= rho * _advective(ops, coz, w_now)
    else:
        raise ValueError(f"unknown form {form!r}")
    if f_load is not None:
        hv += f_load
    return PerturbationTerms(h=h, h_vec=hv, H=H)


def _advective(ops, co, w):
    """L(c) w with the h^3 weights (g rows zero)."""
    g = ops.grid
    out = np.zeros(g.nvel)
    rows = [g.vel_slices[0], g.vel_slices[1], slice(g.vel_slices[2].start, g.vel_slices[2].stop)]
    for comp in range(3):
        c = ops.transport_velocity(co, w, comp)
        Dc = g.central_blocks(comp)
        out[rows[comp]] = sum(c[:, j] * (Dc[j] @ w) for j in range(3))
    return g.h**3 * out


@dataclass
class IterationReport:
    iterations: int = 0
    distances: list = field(default_factory=list)
    ratios: list = field(default_factory=list)
    converged: bool = False
    solver_iterations: list = field(default_factory=list)

    @property
    def max_ratio(self):
        return max(self.ratios) if self.ratios else 0.0


@dataclass
class StepRecord:
    """Energy bookkeeping of one accepted step."""

    t: float
    dt: float
    energy_before: float
    energy_after: float
    shell_kinetic: float
    shell_elastic: float
    fluid_kinetic: float
    fluid_dissipation: float
    shell_dissipation: float
    work: float
    numerical_dissipation: float
    kinematic_residual: float
    pressure_constant: float
    traction_balance: float
    iterations: int
    max_ratio: float


def fluid_kinetic_energy(problem, x, co):
    return 0.5 * problem.fluid_params.rho * float(np.sum(problem.ops.mass_diag(co) * x**2))


def total_energy(problem, state, co=None):
    co = co or flat_plate_coefficients(problem.grid, problem.geom, state.shell.eta)
    se = _shell.shell_energy(problem.shell_params, state.shell)
    return se.total + fluid_kinetic_energy(problem, state.fluid.v, co)


class _Metric:
    """Discrete X-norm components used for the iterate distance."""

    def __init__(self, problem):
        self.p = problem

    def components(self, eta, g, x, q):
        grid = self.p.grid
        ops = self.p.ops
        lap = _fourier.laplacian(eta)
        # eta_dot^{n+1} = 2 g - eta_dot^n, so differences scale with 2 g
        u = 2.0 * g
        g1, g2 = _fourier.gradient(u)
        xm = ops.mass_diag(self.p.identity) * x
        return (
            np.sqrt(np.mean(lap**2)),
            np.sqrt(np.mean(u**2) + np.mean(g1**2 + g2**2)),
            np.sqrt(max(float(x @ xm + x @ ops.apply_diffusion(self.p.identity, x)), 0.0)),
            np.sqrt(np.sum(q**2) * grid.h**3),
        )

    def distance(self, a, b):
        return max(self.components(*(ai - bi for ai, bi in zip(a, b))))

    def size(self, a):
        return max(self.components(*a))


def _check_margins(problem, eta, cfg):
    m = degeneracy_margins(problem.geom, eta, threshold=cfg.margin_threshold)
    if m.near_degenerate:
        raise DegenerateGeometry(
            "geometry left the admissible set: "
            f"min n.n_eta = {m.min_normal_dot:.4g}, L - |eta|_inf = {m.height_margin:.4g}, "
            f"alpha - |eta|_inf = {m.height_margin - problem.geom.L + problem.geom.alpha:.4g}",
            margins=m,
        )
    return m


def fixed_point_step(problem, state, cfg, dt):
    """Advance ``state`` by ``dt``; returns (new state, report, record)."""
    grid = problem.grid
    geom = problem.geom
    n = grid.n
    h3 = grid.h**3
    sp_ = problem.shell_params
    eta_n = state.shell.eta
    u_n = state.shell.eta_dot.values
    x_n = state.fluid.v
    t_new = state.t + dt
    co0 = flat_plate_coefficients(grid, geom, eta_n)
    g_ext = problem.shell_forcing(state.t + 0.5 * dt)
    coupling = ShellCoupling(sp_, eta_n.values, u_n, g_ext)
    system = assemble_linear_system(problem.fluid_params, co0, dt, coupling, grid=grid, v_prev=x_n)
    base = system.rhs.copy()
    metric = _Metric(problem)
    report = IterationReport()

    zeta = eta_n.values.copy()
    w = x_n.copy()
    q = state.fluid.p.copy()
    gv = w[grid.vel_slices[3]].reshape(n, n).copy()
    prev = None
    above = 0
    for it in range(1, cfg.max_iters + 1):
        zf = DisplacementField(zeta)
        zdot = DisplacementField((zeta - eta_n.values) / dt)
        try:
            coz = flat_plate_coefficients(grid, geom, zf, zdot)
        except NonPositiveJacobian as exc:
            raise NoContraction(f"iterate left the invertible range: {exc}", report=report)
        f_load = problem.body_load(t_new, zf, coz)
        pert = compute_perturbations(problem, co0, coz, w, x_n, q, f_load, dt)
        b = base.copy()
        b[: grid.nvel] += pert.h_vec + pert.H
        b[grid.nvel:] += -h3 * pert.h
        y, info = solve_system(system, b, method=cfg.solver)
        report.solver_iterations.append(info.iterations)
        x_new, p_new = system.unpack(y)
        g_new = x_new[grid.vel_slices[3]].reshape(n, n)
        zeta_new = eta_n.values + dt * g_new
        zeta_new -= zeta_new.mean()
        if cfg.theta < 1.0 and it > 1:
            th = cfg.theta
            zeta_new = th * zeta_new + (1 - th) * zeta
            x_new = th * x_new + (1 - th) * w
            p_new = th * p_new + (1 - th) * q
            g_new = x_new[grid.vel_slices[3]].reshape(n, n)
        dist = metric.distance((zeta_new, g_new, x_new, p_new), (zeta, gv, w, q))
        scale = metric.size((zeta_new, g_new, x_new, p_new))
        report.distances.append(dist)
        if prev is not None and prev > 0:
            r = dist / prev
            report.ratios.append(r)
            above = above + 1 if r > 1.0 else 0
        prev = dist
        zeta, w, q, gv = zeta_new, x_new, p_new, g_new
        report.iterations = it
        if not np.all(np.isfinite(w)):
            raise NoContraction("iterates became non-finite", report=report)
        if dist <= cfg.tol * max(scale, 1e-300) or dist == 0.0:
            report.converged = True
            break
        if above >= cfg.contraction_window:
            raise NoContraction(
                f"iterate distance grew for {above} consecutive iterations "
                f"(last ratio {report.ratios[-1]:.3g})", report=report)
    else:
        raise NoContraction(f"no convergence in {cfg.max_iters} iterations "
                            f"(last ratio {report.ratios[-1] if report.ratios else float('nan'):.3g})",
                            report=report)

    # accepted: close the shell step with the mid-step velocity g
    new_shell = _shell.advance_with_midpoint_velocity(state.shell, gv, dt)
    new_fluid = FluidState(w, q, t_new)
    new_state = CoupledState(new_shell, new_fluid, t_new, state.step + 1)
    _check_margins(problem, new_shell.eta, cfg)

    # energy bookkeeping at the accepted iterate
    coz = flat_plate_coefficients(grid, geom, new_shell.eta)
    ops = problem.ops
    fp = problem.fluid_params
    se0 = _shell.shell_energy(sp_, state.shell)
    se1 = _shell.shell_energy(sp_, new_shell)
    fk0 = fluid_kinetic_energy(problem, x_n, co0)
    fk1 = fluid_kinetic_energy(problem, w, coz)
    diss_f = float(w @ ops.apply_diffusion(coz, w, fp.mu))
    diss_s = float(_shell.shell_dissipation(sp_, gv))
    f_load = problem.body_load(t_new, new_shell.eta, coz)
    work = float(w @ f_load) + float(np.mean(g_ext * gv))
    dx = w - x_n
    num = 0.5 * fp.rho * float(np.sum(ops.mass_diag(co0) * dx**2)) / dt
    F = consistent_traction(system, y)
    accel = (new_shell.eta_dot.values - u_n) / dt
    record = StepRecord(
        t=t_new, dt=dt,
        energy_before=se0.total + fk0, energy_after=se1.total + fk1,
        shell_kinetic=se1.kinetic, shell_elastic=se1.elastic, fluid_kinetic=fk1,
        fluid_dissipation=diss_f, shell_dissipation=diss_s, work=work,
        numerical_dissipation=num,
        kinematic_residual=float(np.max(np.abs((new_shell.eta.values - eta_n.values) / dt - gv))),
        pressure_constant=float(q.mean()),
        traction_balance=float(np.mean(accel) - np.mean(g_ext) - np.mean(F)),
        iterations=report.iterations, max_ratio=report.max_ratio,
    )
    return new_state, report, record


def apply_map(problem, state, dt, iterate):
    """One application of the fixed-point map to (zeta, w, q); for audits."""
    grid = problem.grid
    n = grid.n
    eta_n = state.shell.eta
    co0 = flat_plate_coefficients(grid, problem.geom, eta_n)
    g_ext = problem.shell_forcing(state.t + 0.5 * dt)
    coupling = ShellCoupling(problem.shell_params, eta_n.values, state.shell.eta_dot.values, g_ext)
    system = assemble_linear_system(problem.fluid_params, co0, dt, coupling, grid=grid,
                                    v_prev=state.fluid.v)
    zeta, w, q = iterate
    coz = flat_plate_coefficients(grid, problem.geom, DisplacementField(zeta),
                                  DisplacementField((zeta - eta_n.values) / dt))
    f_load = problem.body_load(state.t + dt, DisplacementField(zeta), coz)
    pert = compute_perturbations(problem, co0, coz, w, state.fluid.v, q, f_load, dt)
    b = system.rhs.copy()
    b[: grid.nvel] += pert.h_vec + pert.H
    b[grid.nvel:] += -grid.h**3 * pert.h
    y, _ = solve_system(system, b)
    x, p = system.unpack(y)
    g = x[grid.vel_slices[3]].reshape(n, n)
    z = eta_n.values + dt * g
    return z - z.mean(), x, p


@dataclass
class RunResult:
    states: list
    records: list
    reports: list
    status: str = "ok"
    error: Exception = None
    dt: float = None
    easy: int = 0

    @property
    def final(self):
        return self.states[-1]


def run(problem, state, t_end, dt0, cfg=FixedPointConfig(), easy=0, keep_states=True,
        on_step=None, max_steps=None):
    """Adaptive time loop until ``t_end``, degeneracy or dt underflow.

    Degeneracy and dt underflow are recorded in the result (status
    'degenerate' / 'dt_underflow') together with the exception, the last
    accepted state stays in ``states``.  ``on_step(state, record, dt, easy)``
    is called after every accepted step (checkpoint hook).
    """
    dt = float(dt0)
    res = RunResult(states=[state], records=[], reports=[], dt=dt, easy=easy)
    cur = state
    h = problem.grid.h
    eps = 1e-12 * max(1.0, abs(t_end))
    steps = 0
    while cur.t < t_end - eps:
        if max_steps is not None and steps >= max_steps:
            break
        vmax = float(np.max(np.abs(cur.fluid.v))) if cur.fluid.v.size else 0.0
        dt_try = min(dt, cfg.dt_max, t_end - cur.t)
        if vmax > 0:
            dt_try = min(dt_try, cfg.cfl * h / vmax)
        while True:
            if dt_try < cfg.dt_min:
                res.status = "dt_underflow"
                res.error = DtUnderflow(f"dt fell below {cfg.dt_min:g} at t = {cur.t:.6g}")
                res.dt, res.easy = dt, easy
                return res
            try:
                t0 = _time.perf_counter()
                new, report, record = fixed_point_step(problem, cur, cfg, dt_try)
                break
            except NoContraction as exc:
                log.info("t=%.6g dt=%.3g: %s; shrinking", cur.t, dt_try, exc)
                dt_try *= cfg.dt_shrink
                dt = dt_try
                easy = 0
            except DegenerateGeometry as exc:
                res.status = "degenerate"
                res.error = exc
                res.dt, res.easy = dt, easy
                return res
        steps += 1
        cur = new
        res.records.append(record)
        res.reports.append(report)
        if keep_states:
            res.states.append(cur)
        else:
            res.states[-1:] = [cur]
        log.info("step %d t=%.6g dt=%.3g iters=%d ratio=%.3g E=%.6g (%.2fs)", cur.step, cur.t,
                 dt_try, report.iterations, report.max_ratio, record.energy_after,
                 _time.perf_counter() - t0)
        if dt_try >= dt * (1 - 1e-12):
            easy = easy + 1 if report.iterations <= cfg.easy_iters else 0
            if easy >= cfg.easy_steps:
                dt = dt * cfg.dt_grow
                easy = 0
        if on_step is not None:
            on_step(cur, record, dt, easy)
    res.dt, res.easy = dt, easy
    return res
