"""Visco-elastic plate on the periodic unit cell.

    rho * eta_tt - gamma * lap(eta_t) + alpha * lap^2(eta) = forcing

Space is pseudo-spectral, time is implicit midpoint.  Every Fourier mode
decouples, so the implicit solve is one division per mode.
"""
from dataclasses import dataclass, replace

import numpy as np

from . import _fourier
from .errors import SolveFailure
from .geometry import DisplacementField


@dataclass(frozen=True)
class ShellParams:
    rho: float = 1.0
    gamma: float = 1.0
    alpha: float = 1.0

    def __post_init__(self):
        if not (self.rho > 0 and self.gamma > 0 and self.alpha > 0):
            raise ValueError("shell parameters must be positive")


@dataclass
class ShellState:
    eta: DisplacementField
    eta_dot: DisplacementField
    t: float = 0.0

    @classmethod
    def zeros(cls, n):
        return cls(DisplacementField.zeros(n), DisplacementField.zeros(n), 0.0)

    @classmethod
    def from_arrays(cls, eta, eta_dot, t=0.0):
        return cls(DisplacementField(eta), DisplacementField(eta_dot), t)

    @property
    def n(self):
        return self.eta.n


def _values(field):
    return field.values if isinstance(field, DisplacementField) else np.asarray(field, float)


def shell_operator_apply(p, eta, eta_dot):
    """-gamma * lap(eta_dot) + alpha * lap^2(eta), zero mean."""
    e, u = _values(eta), _values(eta_dot)
    k2 = _fourier.k_squared(e.shape[0])
    out_hat = p.gamma * k2 * np.fft.fft2(u) + p.alpha * k2**2 * np.fft.fft2(e)
    out_hat[0, 0] = 0.0
    return np.fft.ifft2(out_hat).real


def midpoint_symbol(p, n, dt):
    """Per-mode coefficient of the mid-step velocity in the implicit solve."""
    k2 = _fourier.k_squared(n)
    return 2.0 * p.rho / dt + p.gamma * k2 + 0.5 * dt * p.alpha * k2**2


def midpoint_rhs(p, eta, eta_dot, dt):
    """Forcing-free part of the right-hand side (spectral)."""
    k2 = _fourier.k_squared(eta.shape[0])
    return 2.0 * p.rho / dt * np.fft.fft2(eta_dot) - p.alpha * k2**2 * np.fft.fft2(eta)


def midpoint_velocity(p, eta, eta_dot, forcing, dt):
    """Mid-step velocity u_m = (u^n + u^{n+1}) / 2 of one midpoint step."""
    n = eta.shape[0]
    sym = midpoint_symbol(p, n, dt)
    if not np.all(np.isfinite(sym)) or np.min(sym) <= 0:
        raise SolveFailure("degenerate shell symbol")
    rhs = midpoint_rhs(p, eta, eta_dot, dt) + np.fft.fft2(forcing)
    um = rhs / sym
    um[0, 0] = 0.0
    return np.fft.ifft2(um).real


def advance_with_midpoint_velocity(state, um, dt):
    """Close the midpoint step given the mid-step velocity."""
    e = state.eta.values + dt * um
    u = 2.0 * um - state.eta_dot.values
    e -= e.mean()
    u -= u.mean()
    return ShellState(
        replace_values(state.eta, e), replace_values(state.eta_dot, u), state.t + dt
    )


def replace_values(field, values):
    return DisplacementField(values, offset=field.offset, zero_mean=field.zero_mean)


def shell_step(p, state, forcing, dt):
    """One implicit-midpoint step with forcing held over the step.

    The mean of ``forcing`` is discarded (it is balanced by the pressure
    constant in coupled runs).
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    f = np.zeros((state.n, state.n)) if forcing is None else _values(forcing)
    um = midpoint_velocity(p, state.eta.values, state.eta_dot.values, f, dt)
    return advance_with_midpoint_velocity(state, um, dt)


@dataclass(frozen=True)
class ShellEnergy:
    kinetic: float
    elastic: float

    @property
    def total(self):
        return self.kinetic + self.elastic


def shell_energy(p, state):
    """Grid quadrature; exact for band-limited fields."""
    u = _values(state.eta_dot)
    lap = _fourier.laplacian(_values(state.eta))
    return ShellEnergy(0.5 * p.rho * np.mean(u**2), 0.5 * p.alpha * np.mean(lap**2))


def shell_dissipation(p, eta_dot_mid):
    """gamma * ||grad eta_dot||^2 at the mid-step velocity."""
    g1, g2 = _fourier.gradient(_values(eta_dot_mid))
    return p.gamma * np.mean(g1**2 + g2**2)


def dispersion_roots(p, k):
    """Continuum rates: roots of rho lam^2 + gamma |k|^2 lam + alpha |k|^4 = 0."""
    k2 = float(np.dot(k, k))
    return np.roots([p.rho, p.gamma * k2, p.alpha * k2**2])


@dataclass
class DispersionResult:
    mode: tuple
    measured: np.ndarray
    exact: np.ndarray

    @property
    def rel_error(self):
        m = self.measured[np.argsort(self.measured.imag)]
        e = self.exact[np.argsort(self.exact.imag)]
        return float(np.max(np.abs(m - e) / np.abs(e)))

    @property
    def decay_error(self):
        return float(abs(self.measured.real.mean() - self.exact.real.mean())
                     / abs(self.exact.real.mean()))

    @property
    def frequency_error(self):
        return float(abs(np.abs(self.measured.imag).max() - np.abs(self.exact.imag).max())
                     / np.abs(self.exact.imag).max())


def measure_dispersion(p, n, mode=(1, 0), dt=1e-4, t_final=None):
    """Fit the complex rates of one Fourier mode from a free-vibration run.

    The trajectory of (eta_hat, eta_dot_hat) for the mode is fitted by a
    2x2 linear one-step map; its eigenvalues give log(mu)/dt.
    """
    m1, m2 = mode
    kvec = 2 * np.pi * np.array([m1, m2], dtype=float)
    exact = dispersion_roots(p, kvec)
    if t_final is None:
        t_final = 2 * np.pi / max(np.abs(exact.imag).max(), 1e-12)
    y = (np.arange(n) + 0.5) / n
    Y1, Y2 = np.meshgrid(y, y, indexing="ij")
    state = ShellState.from_arrays(np.cos(2 * np.pi * (m1 * Y1 + m2 * Y2)), np.zeros((n, n)))
    steps = max(int(round(t_final / dt)), 4)
    idx = (m1 % n, m2 % n)
    traj = np.empty((steps + 1, 2), dtype=complex)
    zero = np.zeros((n, n))
    for s in range(steps + 1):
        traj[s] = np.fft.fft2(state.eta.values)[idx], np.fft.fft2(state.eta_dot.values)[idx]
        if s < steps:
            state = shell_step(p, state, zero, dt)
    X, Y = traj[:-1], traj[1:]
    M = np.linalg.lstsq(X, Y, rcond=None)[0].T
    mu = np.linalg.eigvals(M)
    return DispersionResult(mode=tuple(mode), measured=np.log(mu.astype(complex)) / dt, exact=exact)
