"""Transformed Stokes / Navier-Stokes saddle systems on the MAC grid.

Momentum rows are tested against the velocity unknowns with h^3 weights,
so the velocity block is symmetric:

    [ rho M / dt + mu K + S    -h^3 C^T ] [x]   [f]
    [ -h^3 C                   0        ] [p] = [-h^3 h]

K is the diffusion stiffness of A, C the conservative divergence of B and M
the lumped J-weighted mass.  In coupled mode the top-plane velocity g is an
unknown and S adds the shell's implicit-midpoint block h^2 * symbol(k) on
the g rows; the fluid rows at g are then the discrete boundary reaction.
"""
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import shell as _shell
from .errors import DegenerateGeometry, IncompatibleFlux, SolveFailure
from .mac import P_LAT, V1_LAT, V3_LAT, LatticeCoefficients, MACGrid, MACOperators


@dataclass(frozen=True)
class FluidParams:
    rho: float = 1.0
    mu: float = 1.0

    def __post_init__(self):
        if not (self.rho > 0 and self.mu > 0):
            raise ValueError("fluid parameters must be positive")


@dataclass
class FluidState:
    """Packed staggered velocity (including the top plane) and cell pressure."""

    v: np.ndarray
    p: np.ndarray
    t: float = 0.0

    @classmethod
    def zeros(cls, grid):
        return cls(np.zeros(grid.nvel), np.zeros((grid.n, grid.n, grid.n)), 0.0)

    def pressure_split(self):
        """(p0, c) with p = p0 + c and mean(p0) = 0."""
        c = float(self.p.mean())
        return self.p - c, c


@dataclass
class ShellCoupling:
    """Shell data entering the g rows of a coupled system."""

    params: object
    eta: np.ndarray
    eta_dot: np.ndarray
    forcing: np.ndarray

    def rhs(self, dt):
        r = _shell.midpoint_rhs(self.params, self.eta, self.eta_dot, dt) + np.fft.fft2(self.forcing)
        return np.fft.ifft2(r).real


def _shell_apply(params, n, dt, g):
    sym = _shell.midpoint_symbol(params, n, dt)
    return np.fft.ifft2(sym * np.fft.fft2(g.reshape(n, n))).real.ravel()


@dataclass
class SaddleSystem:
    grid: MACGrid
    matrix: sp.csr_matrix
    rhs: np.ndarray
    dt: float
    fp: FluidParams
    coupled: bool
    shell_params: object = None
    g_fixed: np.ndarray = None
    key: tuple = None
    shell_rhs: np.ndarray = None
    _lu: object = field(default=None, repr=False)

    @property
    def nv(self):
        g = self.grid
        return g.nvel if self.coupled else g.nvel - g.plane

    @property
    def size(self):
        return self.matrix.shape[0]

    def matvec(self, y):
        out = self.matrix @ y
        if self.coupled:
            g = self.grid
            s = g.vel_slices[3]
            out[s] += g.h**2 * _shell_apply(self.shell_params, g.n, self.dt, y[s])
        return out

    def operator(self):
        return spla.LinearOperator((self.size, self.size), matvec=self.matvec, dtype=float)

    def full_matrix(self):
        if not self.coupled:
            return self.matrix
        g = self.grid
        n = g.n
        e = np.eye(g.plane)
        S = np.stack([_shell_apply(self.shell_params, n, self.dt, e[i]) for i in range(g.plane)], axis=1)
        s = g.vel_slices[3]
        blk = sp.lil_matrix(self.matrix.shape)
        blk[s, s] = g.h**2 * S
        return (self.matrix + blk.tocsr()).tocsr()

    def unpack(self, y):
        """(packed velocity including g, pressure array)."""
        g = self.grid
        if self.coupled:
            x = y[:g.nvel].copy()
        else:
            x = np.concatenate([y[:self.nv], self.g_fixed])
        return x, y[self.nv:].reshape(g.n, g.n, g.n).copy()


def _velocity_block(ops, co, fp, dt):
    K = ops.diffusion(co, fp.mu)
    if dt is None:
        return K
    return (K + sp.diags(fp.rho * ops.mass_diag(co) / dt)).tocsr()


def assemble_linear_system(fp, coeff0, dt, bc, rhs=None, grid=None, v_prev=None, flux_tol=1e-9):
    """Assemble the frozen-coefficient saddle system.

    Parameters
    ----------
    coeff0 : LatticeCoefficients at the step start.
    dt : float or None
        None assembles the steady Stokes system (no mass term).
    bc : ndarray (N, N) or ShellCoupling
        Prescribed top-plane normal velocity, or shell data for a coupled solve.
    rhs : dict with optional 'h' (cell array), 'load' (velocity load vector,
        the discrete h_vec + H contributions).
    v_prev : packed velocity at the previous step (backward Euler mass term).
    """
    grid = grid or MACGrid(round(len(coeff0.J[P_LAT]) ** (1 / 3)))
    ops = MACOperators(grid)
    h3 = grid.h**3
    rhs = rhs or {}
    hdiv = np.asarray(rhs.get("h", np.zeros(grid.npres)), dtype=float).ravel()
    load = np.asarray(rhs.get("load", np.zeros(grid.nvel)), dtype=float).copy()
    if dt is not None and v_prev is not None:
        load += fp.rho * ops.mass_diag(coeff0) / dt * v_prev
    Avv = _velocity_block(ops, coeff0, fp, dt)
    C = ops.divergence(coeff0)
    coupled = isinstance(bc, ShellCoupling)
    key = (grid.n, dt, fp, coupled, bc.params if coupled else None)
    if coupled:
        shell_rhs = bc.rhs(dt)
        load[grid.vel_slices[3]] += grid.h**2 * shell_rhs.ravel()
        M = sp.bmat([[Avv, -h3 * C.T], [-h3 * C, None]], format="csr")
        b = np.concatenate([load, -h3 * hdiv])
        return SaddleSystem(grid, M, b, dt, fp, True, shell_params=bc.params, key=key,
                            shell_rhs=shell_rhs)
    gval = np.asarray(bc, dtype=float).ravel()
    flux = np.sum(gval) * grid.h**2
    if abs(flux - np.sum(hdiv) * h3) > flux_tol * max(1.0, np.abs(gval).max() if gval.size else 1.0):
        raise IncompatibleFlux(
            f"boundary flux {flux:.3e} does not match integral of h {np.sum(hdiv) * h3:.3e}"
        )
    nv = grid.nvel - grid.plane
    Cu, Cg = C[:, :nv], C[:, nv:]
    b_v = load[:nv] - Avv[:nv, nv:] @ gval
    b_p = -h3 * hdiv + h3 * (Cg @ gval)
    M = sp.bmat([[Avv[:nv, :nv], -h3 * Cu.T], [-h3 * Cu, None]], format="csr")
    return SaddleSystem(grid, M, np.concatenate([b_v, b_p]), dt, fp, False, g_fixed=gval, key=key)


# -- preconditioner ---------------------------------------------------------
_PRECOND_CACHE = {}


def _slot_order(grid, coupled):
    """Order of the (field, level) planes by height, for a banded block."""
    n, h = grid.n, grid.h
    z = list((np.arange(n) + 0.5) * h) * 2 + list(np.arange(1, n) * h)
    fid = [0] * n + [1] * n + [2] * (n - 1)
    if coupled:
        z.append(1.0)
        fid.append(2)
    z += list((np.arange(n) + 0.5) * h)
    fid += [3] * n
    return np.lexsort((fid, z))


class FourierBlockPreconditioner:
    """Exact inverse of the flat (eta = 0) system, one block per lateral mode.

    At eta = 0 every operator is translation invariant in x1 and x2, so the
    system decouples into N x (N/2 + 1) small blocks after a real 2D FFT of
    each (field, level) plane.  The blocks are extracted numerically from
    the assembled sparse matrix and factorized together as one banded
    block-diagonal sparse matrix; the mean mode uses a pseudo-inverse to
    absorb the pressure constant of uncoupled systems.
    """

    def __init__(self, system):
        grid = system.grid
        n, n2 = grid.n, grid.plane
        self.n = n
        self.m = system.size // n2
        self.n_half = n // 2 + 1
        self.modes = n * self.n_half
        A = system.matrix.tocoo()
        rows = A.row % n2 == 0
        r_slot = A.row[rows] // n2
        c_slot = A.col[rows] // n2
        c_lat = A.col[rows] % n2
        ci, cj = c_lat // n, c_lat % n
        vals = A.data[rows]
        k1 = np.arange(n)[:, None]
        k2 = np.arange(self.n_half)[None, :]
        phase = np.exp(2j * np.pi * ((k1[..., None] * ci) + (k2[..., None] * cj)) / n)
        phase = phase.reshape(self.modes, -1) * vals
        order = _slot_order(grid, system.coupled)
        inv_order = np.empty_like(order)
        inv_order[order] = np.arange(self.m)
        self.order = order
        rr = inv_order[r_slot]
        cc = inv_order[c_slot]
        base = (np.arange(self.modes) * self.m)[:, None]
        R = (base + rr[None, :]).ravel()
        Cc = (base + cc[None, :]).ravel()
        V = phase.ravel()
        if system.coupled:
            sym = _shell.midpoint_symbol(system.shell_params, n, system.dt)[:, :self.n_half]
            gs = inv_order[grid.vel_slices[3].start // n2]
            R = np.concatenate([R, np.arange(self.modes) * self.m + gs])
            Cc = np.concatenate([Cc, np.arange(self.modes) * self.m + gs])
            V = np.concatenate([V, grid.h**2 * sym.ravel()])
        big = sp.coo_matrix((V, (R, Cc)), shape=(self.modes * self.m,) * 2).tocsr()
        b0 = big[: self.m, : self.m].toarray()
        self.mean_inverse = np.linalg.pinv(b0, rcond=1e-10)
        big = big.tolil()
        big[: self.m, : self.m] = sp.identity(self.m)
        self.lu = spla.splu(big.tocsc(), permc_spec="NATURAL")

    def solve(self, r):
        n, m = self.n, self.m
        R = np.fft.rfft2(r.reshape(m, n, n))[self.order]
        Rm = R.reshape(m, self.modes).T.copy()
        X0 = self.mean_inverse @ Rm[0]
        X = self.lu.solve(Rm.ravel()).reshape(self.modes, m)
        X[0] = X0
        out = np.empty((m, n, self.n_half), dtype=complex)
        out[self.order] = X.T.reshape(m, n, self.n_half)
        return np.fft.irfft2(out, s=(n, n)).reshape(-1)


def flat_preconditioner(system):
    key = system.key
    if key not in _PRECOND_CACHE:
        grid = system.grid
        flat = LatticeCoefficients.identity(grid)
        if system.coupled:
            bc = ShellCoupling(system.shell_params, np.zeros((grid.n,) * 2),
                               np.zeros((grid.n,) * 2), np.zeros((grid.n,) * 2))
        else:
            bc = np.zeros(grid.plane)
        ref = assemble_linear_system(system.fp, flat, system.dt, bc, grid=grid)
        if len(_PRECOND_CACHE) > 4:
            _PRECOND_CACHE.clear()
        _PRECOND_CACHE[key] = FourierBlockPreconditioner(ref)
    return _PRECOND_CACHE[key]


@dataclass
class SolveInfo:
    method: str
    iterations: int
    residual: float


def _gauge(system, y):
    if not system.coupled:
        y[system.nv:] -= y[system.nv:].mean()
    return y


def solve_system(system, b=None, method="auto", tol=1e-11, maxiter=200):
    """Solve for right-hand side ``b`` (defaults to the assembled one)."""
    b = system.rhs if b is None else b
    bnorm = np.linalg.norm(b)
    if bnorm == 0:
        return np.zeros_like(b), SolveInfo("trivial", 0, 0.0)
    if method == "auto":
        method = "direct" if system.grid.n <= 8 else "iterative"
    if method == "direct":
        if system._lu is None:
            A = system.full_matrix()
            if not system.coupled:
                # border with the mean-pressure gauge
                e = np.zeros(system.size)
                e[system.nv:] = 1.0
                A = sp.bmat([[A, sp.csr_matrix(e).T], [sp.csr_matrix(e), None]], format="csc")
            try:
                system._lu = spla.splu(sp.csc_matrix(A))
            except RuntimeError as exc:
                raise SolveFailure(f"sparse factorization failed: {exc}") from exc
        rhs = b if system.coupled else np.concatenate([b, [0.0]])
        y = system._lu.solve(rhs)[: system.size]
        its = 1
    elif method == "iterative":
        P = flat_preconditioner(system)
        Mop = spla.LinearOperator((system.size,) * 2, matvec=P.solve, dtype=float)
        Aop = system.operator()
        y = P.solve(b)
        its = 0
        for _ in range(5):
            count = [0]

            def cb(_):
                count[0] += 1

            y, info = spla.gmres(Aop, b, x0=y, rtol=tol, atol=0.0, restart=60,
                                 maxiter=maxiter, M=Mop, callback=cb, callback_type="pr_norm")
            its += count[0]
            res = np.linalg.norm(b - Aop @ _gauge(system, y)) / bnorm
            if res <= 1e-9:
                break
        else:
            raise SolveFailure(f"GMRES stalled: relative residual {res:.3e} after {its} iterations",
                               info={"iterations": its, "residual": res})
    else:
        raise ValueError(f"unknown method {method!r}")
    y = _gauge(system, y)
    res = np.linalg.norm(b - system.matvec(y)) / bnorm
    if not np.isfinite(res) or res > 1e-9:
        raise SolveFailure(f"saddle solve residual {res:.3e} exceeds 1e-9",
                           info={"method": method, "residual": res})
    return y, SolveInfo(method, its, float(res))


def solve_saddle(system, method="auto"):
    """Return (packed velocity, zero-mean pressure p0, info).

    For coupled systems the pressure constant is part of the solution;
    the returned pressure is the full field (use FluidState.pressure_split).
    """
    y, info = solve_system(system, method=method)
    x, p = system.unpack(y)
    return x, p, info


# -- boundary quantities ------------------------------------------------------
def boundary_gradient(grid, x):
    """Reference velocity gradient G[..., i, j] = d_j v_i on the top plane.

    Second-order one-sided stencils in x3; all values at the cell-centred
    shell positions.
    """
    n, h = grid.n, grid.h
    v1, v2, v3 = grid.split(x)
    G = np.zeros((n, n, 3, 3))
    # v1, v2 vanish on the wall: values at 0, -h/2, -3h/2
    d3v1 = (-9.0 * v1[n - 1] + v1[n - 2]) / (3.0 * h)
    d3v2 = (-9.0 * v2[n - 1] + v2[n - 2]) / (3.0 * h)
    G[..., 0, 2] = 0.5 * (d3v1 + np.roll(d3v1, -1, axis=0))
    G[..., 1, 2] = 0.5 * (d3v2 + np.roll(d3v2, -1, axis=1))
    top = v3[n]
    G[..., 2, 0] = (np.roll(top, -1, 0) - np.roll(top, 1, 0)) / (2 * h)
    G[..., 2, 1] = (np.roll(top, -1, 1) - np.roll(top, 1, 1)) / (2 * h)
    G[..., 2, 2] = (3.0 * v3[n] - 4.0 * v3[n - 1] + v3[n - 2]) / (2.0 * h)
    return G


def boundary_pressure(p):
    """Quadratic extrapolation of cell pressure to the top plane."""
    return (15.0 * p[-1] - 10.0 * p[-2] + 3.0 * p[-3]) / 8.0


def traction(state, grid, eta, fp=FluidParams()):
    """Normal traction density F = -n^T tau n_eta |det grad phi_eta| on omega.

    tau = mu (grad v + grad v^T) - p I with the physical gradient
    grad v = grad_ref v F^{-1} evaluated on the deformed top boundary.
    """
    G = boundary_gradient(grid, state.v)
    p = boundary_pressure(state.p)
    g1, g2 = eta.gradient_on_lattice(0.0, 0.0)
    Finv = np.broadcast_to(np.eye(3), G.shape).copy()
    Finv[..., 2, 0] = -g1
    Finv[..., 2, 1] = -g2
    Gx = G @ Finv
    tau = fp.mu * (Gx + np.swapaxes(Gx, -1, -2)) - p[..., None, None] * np.eye(3)
    m = np.stack([-g1, -g2, np.ones_like(g1)], axis=-1)  # n_eta |det grad phi_eta|
    return -np.einsum("...j,...j->...", tau[..., 2, :], m)


def consistent_traction(system, y):
    """Traction on the shell as the discrete fluid reaction at the g rows.

    At a solution the g rows read h^2 (S g - shell rhs) + reaction = 0, so
    the force the fluid exerts on the shell is S g - shell rhs.
    """
    if not system.coupled:
        raise ValueError("consistent traction needs a coupled system")
    g = system.grid
    gv = y[g.vel_slices[3]]
    return (_shell_apply(system.shell_params, g.n, system.dt, gv)
            - system.shell_rhs.ravel()).reshape(g.n, g.n)


def recover_pressure_constant(state, shell_accel, g_ext, grid, eta, fp=FluidParams()):
    """Pressure constant from the global balance of the structure equation.

    c * int n.n_eta |det| = int n^T (mu(grad v + grad v^T) - p0 I) n_eta |det|
                            + int eta_tt - int g
    """
    p0, _ = state.pressure_split()
    F0 = traction(FluidState(state.v, p0, state.t), grid, eta, fp)
    g1, g2 = eta.gradient_on_lattice(0.0, 0.0)
    # FlatPlate: n . n_eta |det grad phi_eta| = 1 pointwise
    denom = float(np.mean(np.ones_like(g1)))
    if denom <= 0:
        raise DegenerateGeometry("vanishing normal weight in pressure recovery")
    num = -np.mean(F0) + np.mean(shell_accel) - np.mean(g_ext)
    return float(num / denom)


# -- manufactured Stokes solution ---------------------------------------------
def _sin2_derivative(x, m):
    """m-th derivative of sin^2(pi x)."""
    pi = np.pi
    if m == 0:
        return np.sin(pi * x) ** 2
    if m == 1:
        return pi * np.sin(2 * pi * x)
    if m == 2:
        return 2 * pi**2 * np.cos(2 * pi * x)
    if m == 3:
        return -4 * pi**3 * np.sin(2 * pi * x)
    raise ValueError(m)


def _potential_derivative(x1, x2, x3, a):
    return _sin2_derivative(x1, a[0]) * _sin2_derivative(x2, a[1]) * _sin2_derivative(x3, a[2])


_E = np.eye(3, dtype=int)
# v = curl(psi, psi, psi) = (d2 - d3, d3 - d1, d1 - d2) psi
_CURL = ((1, 2), (2, 0), (0, 1))


def mms_velocity(x1, x2, x3):
    out = []
    for plus, minus in _CURL:
        out.append(_potential_derivative(x1, x2, x3, _E[plus])
                   - _potential_derivative(x1, x2, x3, _E[minus]))
    return tuple(out)


def mms_pressure(x1, x2, x3):
    return np.cos(2 * np.pi * x1) + 0.0 * x2 + 0.0 * x3


def mms_forcing(x1, x2, x3, mu=1.0):
    """f = -mu lap v + grad p for the manufactured pair."""
    out = []
    for c, (plus, minus) in enumerate(_CURL):
        lap = 0.0
        for d in range(3):
            lap = lap + _potential_derivative(x1, x2, x3, _E[plus] + 2 * _E[d])
            lap = lap - _potential_derivative(x1, x2, x3, _E[minus] + 2 * _E[d])
        gp = -2 * np.pi * np.sin(2 * np.pi * x1) if c == 0 else 0.0 * x1
        out.append(-mu * lap + gp)
    return tuple(out)


@dataclass
class MMSResult:
    n: int
    velocity_error: float
    pressure_error: float
    info: SolveInfo


def solve_manufactured_stokes(n, method="auto", mu=1.0):
    """Steady flat Stokes with the manufactured forcing; L2 errors."""
    grid = MACGrid(n)
    ops = MACOperators(grid)
    co = LatticeCoefficients.identity(grid)
    f = grid.sample_velocity(lambda a, b, c: mms_forcing(a, b, c, mu))
    load = ops.mass_diag(co) * f
    sys_ = assemble_linear_system(FluidParams(mu=mu), co, None, np.zeros(grid.plane),
                                  rhs={"load": load}, grid=grid)
    x, p, info = solve_saddle(sys_, method=method)
    ve = x - grid.sample_velocity(mms_velocity)
    w = ops.mass_diag(co)
    verr = float(np.sqrt(np.sum(w * ve**2)))
    pex = grid.sample_pressure(mms_pressure)
    pe = (p - p.mean()) - (pex - pex.mean())
    perr = float(np.sqrt(np.sum(pe**2) * grid.h**3))
    return MMSResult(n, verr, perr, info)
