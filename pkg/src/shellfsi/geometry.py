"""Reference domains, the Hanzawa transform and its coefficient fields.

A reference domain is described by a periodic boundary parametrization
``phi: (0,1)^2 -> R^3`` with outer unit normal ``n``.  Near the boundary a
point is written ``x = phi(y) + s n(y)``; the Hanzawa transform moves it to
``x + eta(y) * cutoff(s) * n(y)`` and leaves the rest of the domain fixed.

Index conventions: ``F[..., i, j] = d Psi_i / d x_j``; ``B = J F^{-T}`` (the
cofactor matrix, so ``B : grad v = J div v`` with ``(grad v)_ij = d_j v_i``)
and ``A = J F^{-1} F^{-T}`` (the pulled-back diffusion tensor).
"""
from dataclasses import dataclass, field
import enum

import numpy as np

from . import _fourier
from .errors import (
    DegenerateDisplacement,
    NoConvergence,
    NonPositiveJacobian,
    OutsideDomain,
)


class GeometryKind(str, enum.Enum):
    FLAT_PLATE = "FlatPlate"
    CYLINDER = "Cylinder"
    SPHERE = "Sphere"


def _psi(t):
    out = np.zeros_like(t)
    pos = t > 0
    out[pos] = np.exp(-1.0 / t[pos])
    return out


def _dpsi(t):
    out = np.zeros_like(t)
    pos = t > 0
    out[pos] = np.exp(-1.0 / t[pos]) / t[pos] ** 2
    return out


class SmoothCutoff:
    """C-infinity step: 0 for s <= start, 1 for s >= end."""

    def __init__(self, start, end):
        if not start < end:
            raise ValueError("cutoff needs start < end")
        self.start = float(start)
        self.end = float(end)
        # max of the unit smooth step derivative is 2, attained at t = 1/2
        self.max_slope = 2.0 / (self.end - self.start)

    def __call__(self, s):
        t = (np.asarray(s, dtype=float) - self.start) / (self.end - self.start)
        t = np.clip(t, 0.0, 1.0)
        a, b = _psi(t), _psi(1.0 - t)
        return a / (a + b)

    def derivative(self, s):
        t = (np.asarray(s, dtype=float) - self.start) / (self.end - self.start)
        inside = (t > 0) & (t < 1)
        t = np.clip(t, 0.0, 1.0)
        a, b = _psi(t), _psi(1.0 - t)
        da, db = _dpsi(t), -_dpsi(1.0 - t)
        den = np.where(inside, (a + b) ** 2, 1.0)
        d = (da * (a + b) - a * (da + db)) / den
        return np.where(inside, d, 0.0) / (self.end - self.start)


class PolynomialCutoff:
    """Septic smoothstep: 0 for s <= start, 1 for s >= end, C^3 overall.

    The first three derivatives vanish at both ends, so grad Psi is C^2
    and centred differences of the coefficients stay second order.
    """

    def __init__(self, start, end):
        if not start < end:
            raise ValueError("cutoff needs start < end")
        self.start = float(start)
        self.end = float(end)
        # unit profile slope 140 t^3 (1 - t)^3 peaks at t = 1/2 with 35/16
        self.max_slope = 35.0 / 16.0 / (self.end - self.start)

    def _t(self, s):
        return np.clip((np.asarray(s, dtype=float) - self.start) / (self.end - self.start), 0.0, 1.0)

    def __call__(self, s):
        t = self._t(s)
        return t**4 * (35.0 - 84.0 * t + 70.0 * t**2 - 20.0 * t**3)

    def derivative(self, s):
        t = self._t(s)
        return 140.0 * t**3 * (1.0 - t) ** 3 / (self.end - self.start)


class LinearCutoff:
    """Affine profile 1 + s/L on (-L, 0]; only meant for closed-form tests."""

    def __init__(self, L):
        self.L = float(L)
        self.max_slope = 1.0 / self.L

    def __call__(self, s):
        return np.clip(1.0 + np.asarray(s, dtype=float) / self.L, 0.0, None)

    def derivative(self, s):
        s = np.asarray(s, dtype=float)
        return np.where(s > -self.L, 1.0 / self.L, 0.0)


@dataclass(frozen=True)
class ReferenceGeometry:
    """Reference domain with tubular half-width ``L`` and safety margin ``alpha``.

    FlatPlate: the box (0,1)^2 x (0,1), periodic laterally, shell on x3 = 1.
    Cylinder: r < radius, periodic in x3 with period ``height``.
    Sphere: the ball r < radius; y2 in (0,1) is the polar angle / pi.
    """

    kind: GeometryKind = GeometryKind.FLAT_PLATE
    L: float = 0.5
    alpha: float = None
    cutoff: object = None
    radius: float = 1.0
    height: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", GeometryKind(self.kind))
        if self.alpha is None:
            object.__setattr__(self, "alpha", 0.35 * self.L)
        if self.cutoff is None:
            object.__setattr__(self, "cutoff", PolynomialCutoff(-self.L, 0.0))
        if not 0 < self.alpha < self.L:
            raise ValueError("need 0 < alpha < L")
        if self.alpha * self.cutoff.max_slope >= 1.0:
            raise ValueError("cutoff too steep: Hanzawa map not invertible for |eta| < alpha")
        if self.kind is not GeometryKind.FLAT_PLATE and self.L >= self.radius:
            raise ValueError("L must be smaller than the radius")
        if self.kind is GeometryKind.FLAT_PLATE and self.L > 1.0:
            raise ValueError("FlatPlate admits L up to the box height 1")

    # -- boundary parametrization -------------------------------------
    def boundary_point(self, y):
        y = np.asarray(y, dtype=float)
        y1, y2 = y[..., 0], y[..., 1]
        if self.kind is GeometryKind.FLAT_PLATE:
            return np.stack([y1, y2, np.ones_like(y1)], axis=-1)
        return self.radius * self.normal(y) + self._axial(y)

    def _axial(self, y):
        y = np.asarray(y, dtype=float)
        out = np.zeros(y.shape[:-1] + (3,))
        if self.kind is GeometryKind.CYLINDER:
            out[..., 2] = self.height * y[..., 1]
        return out

    def normal(self, y):
        y = np.asarray(y, dtype=float)
        y1, y2 = y[..., 0], y[..., 1]
        if self.kind is GeometryKind.FLAT_PLATE:
            z = np.zeros_like(y1)
            return np.stack([z, z, np.ones_like(y1)], axis=-1)
        ph = 2 * np.pi * y1
        if self.kind is GeometryKind.CYLINDER:
            return np.stack([np.cos(ph), np.sin(ph), np.zeros_like(y1)], axis=-1)
        th = np.pi * y2
        return np.stack(
            [np.sin(th) * np.cos(ph), np.sin(th) * np.sin(ph), np.cos(th)], axis=-1
        )

    def normal_derivatives(self, y):
        """(d n/d y1, d n/d y2)."""
        y = np.asarray(y, dtype=float)
        y1, y2 = y[..., 0], y[..., 1]
        z = np.zeros(y.shape[:-1] + (3,))
        if self.kind is GeometryKind.FLAT_PLATE:
            return z, z.copy()
        ph = 2 * np.pi * y1
        if self.kind is GeometryKind.CYLINDER:
            d1 = 2 * np.pi * np.stack([-np.sin(ph), np.cos(ph), np.zeros_like(y1)], axis=-1)
            return d1, z
        th = np.pi * y2
        d1 = 2 * np.pi * np.stack(
            [-np.sin(th) * np.sin(ph), np.sin(th) * np.cos(ph), np.zeros_like(y1)], axis=-1
        )
        d2 = np.pi * np.stack(
            [np.cos(th) * np.cos(ph), np.cos(th) * np.sin(ph), -np.sin(th)], axis=-1
        )
        return d1, d2

    def tangents(self, y):
        """(d phi/d y1, d phi/d y2)."""
        if self.kind is GeometryKind.FLAT_PLATE:
            y = np.asarray(y, dtype=float)
            e1 = np.zeros(y.shape[:-1] + (3,))
            e2 = np.zeros(y.shape[:-1] + (3,))
            e1[..., 0] = 1.0
            e2[..., 1] = 1.0
            return e1, e2
        d1, d2 = self.normal_derivatives(y)
        t1, t2 = self.radius * d1, self.radius * d2
        if self.kind is GeometryKind.CYLINDER:
            t2 = t2.copy()
            t2[..., 2] += self.height
        return t1, t2

    def sample_points(self, n):
        """Cell-centred samples of omega (avoids the sphere poles)."""
        g = (np.arange(n) + 0.5) / n
        return np.stack(np.meshgrid(g, g, indexing="ij"), axis=-1)

    # -- tubular coordinates -------------------------------------------
    def tubular_coordinates(self, x):
        """Return (y, s) with x = phi(y) + s n(y); y is NaN-free everywhere."""
        x = np.asarray(x, dtype=float)
        if self.kind is GeometryKind.FLAT_PLATE:
            y = np.stack([np.mod(x[..., 0], 1.0), np.mod(x[..., 1], 1.0)], axis=-1)
            return y, x[..., 2] - 1.0
        if self.kind is GeometryKind.CYLINDER:
            r = np.hypot(x[..., 0], x[..., 1])
            y1 = np.mod(np.arctan2(x[..., 1], x[..., 0]) / (2 * np.pi), 1.0)
            y2 = np.mod(x[..., 2] / self.height, 1.0)
            return np.stack([y1, y2], axis=-1), r - self.radius
        r = np.sqrt(np.sum(x**2, axis=-1))
        rs = np.where(r > 0, r, 1.0)
        y1 = np.mod(np.arctan2(x[..., 1], x[..., 0]) / (2 * np.pi), 1.0)
        y2 = np.arccos(np.clip(x[..., 2] / rs, -1.0, 1.0)) / np.pi
        return np.stack([y1, y2], axis=-1), r - self.radius

    def contains(self, x, tol=1e-12):
        x = np.asarray(x, dtype=float)
        _, s = self.tubular_coordinates(x)
        inside = s <= tol
        if self.kind is GeometryKind.FLAT_PLATE:
            inside &= x[..., 2] >= -tol
        return inside


class DisplacementField:
    """Scalar displacement on the periodic N x N grid over omega.

    ``values[i, j]`` sits at ((i + offset)/N, (j + offset)/N).  An optional
    analytic ``func(y)`` takes precedence for point evaluation (used for
    curved references, where y2 is not periodic).
    """

    def __init__(self, values, offset=0.5, func=None, zero_mean=True):
        values = np.array(values, dtype=float)
        if values.ndim != 2 or values.shape[0] != values.shape[1]:
            raise ValueError("displacement must live on a square grid")
        if zero_mean and func is None:
            values = values - values.mean()
        self.values = values
        self.offset = float(offset)
        self.func = func
        self.zero_mean = zero_mean

    @classmethod
    def from_function(cls, func, n, offset=0.5, zero_mean=True, analytic=False):
        g = (np.arange(n) + offset) / n
        y = np.stack(np.meshgrid(g, g, indexing="ij"), axis=-1)
        return cls(func(y), offset=offset, func=func if analytic else None,
                   zero_mean=zero_mean)

    @classmethod
    def zeros(cls, n, offset=0.5):
        return cls(np.zeros((n, n)), offset=offset)

    @property
    def n(self):
        return self.values.shape[0]

    def positions(self):
        g = (np.arange(self.n) + self.offset) / self.n
        return np.stack(np.meshgrid(g, g, indexing="ij"), axis=-1)

    def sup(self):
        return float(np.max(np.abs(self.values))) if self.values.size else 0.0

    def __call__(self, y):
        if self.func is not None:
            return np.asarray(self.func(np.asarray(y, dtype=float)), dtype=float)
        return _fourier.evaluate(self.values, y, self.offset)

    def gradient(self, y, step=1e-5):
        if self.func is not None:
            y = np.asarray(y, dtype=float)
            e1 = np.array([step, 0.0])
            e2 = np.array([0.0, step])
            d1 = (self(y + e1) - self(y - e1)) / (2 * step)
            d2 = (self(y + e2) - self(y - e2)) / (2 * step)
            return d1, d2
        g1, g2 = _fourier.gradient(self.values)
        return (_fourier.evaluate(g1, y, self.offset),
                _fourier.evaluate(g2, y, self.offset))

    def on_lattice(self, s1=0.0, s2=0.0):
        """Values shifted by (s1, s2) cells (fast path for staggered grids)."""
        if s1 == 0 and s2 == 0:
            return self.values
        return _fourier.shift(self.values, s1, s2)

    def gradient_on_lattice(self, s1=0.0, s2=0.0):
        g1, g2 = _fourier.gradient(self.values)
        if s1 == 0 and s2 == 0:
            return g1, g2
        return _fourier.shift(g1, s1, s2), _fourier.shift(g2, s1, s2)


def _check_margin(geom, eta):
    if eta.sup() >= geom.alpha:
        raise DegenerateDisplacement(
            f"|eta|_inf = {eta.sup():.6g} >= safety margin alpha = {geom.alpha:.6g}"
        )


def hanzawa_displacement(geom, eta, x):
    """Psi_eta(x) - x without domain checks (also valid slightly outside)."""
    x = np.asarray(x, dtype=float)
    y, s = geom.tubular_coordinates(x)
    tube = s > -geom.L
    out = np.zeros_like(x)
    if np.any(tube):
        yt, st = y[tube], s[tube]
        amp = eta(yt) * geom.cutoff(st)
        out[tube] = amp[..., None] * geom.normal(yt)
    return out


def hanzawa_map(geom, eta, x):
    """Psi_eta(x) for points x of the reference domain."""
    _check_margin(geom, eta)
    x = np.asarray(x, dtype=float)
    if not np.all(geom.contains(x)):
        raise OutsideDomain("point outside the reference domain")
    return x + hanzawa_displacement(geom, eta, x)


def inverse_hanzawa_map(geom, eta, xhat, tol=1e-13, max_iter=50):
    """Psi_eta^{-1}(xhat) by scalar Newton along the normal line."""
    _check_margin(geom, eta)
    xhat = np.asarray(xhat, dtype=float)
    y, shat = geom.tubular_coordinates(xhat)
    tube = shat > -geom.L
    etay = np.zeros_like(shat)
    if np.any(tube):
        etay[tube] = eta(y[tube])
    outside = shat > etay + 1e-12
    if geom.kind is GeometryKind.FLAT_PLATE:
        outside |= xhat[..., 2] < -1e-12
    if np.any(outside):
        raise OutsideDomain("point outside the deformed domain")
    t = np.where(tube, shat - etay, shat)
    for _ in range(max_iter):
        res = t + etay * geom.cutoff(t) - shat
        dres = 1.0 + etay * geom.cutoff.derivative(t)
        step = np.where(tube, res / dres, 0.0)
        t = t - step
        if np.all(np.abs(step) <= tol * np.maximum(1.0, np.abs(t))):
            break
    else:
        raise NoConvergence("inverse Hanzawa Newton did not converge in %d steps" % max_iter)
    out = xhat.copy()
    if np.any(tube):
        out[tube] = xhat[tube] + (t[tube] - shat[tube])[..., None] * geom.normal(y[tube])
    return out


@dataclass
class HanzawaCoefficients:
    """Coefficient fields sampled at a set of reference points."""

    J: np.ndarray
    A: np.ndarray
    B: np.ndarray
    w_mesh: np.ndarray
    F: np.ndarray = field(repr=False, default=None)


def coefficients_from_jacobian(F, dpsi_dt=None):
    J = np.linalg.det(F)
    if np.any(J <= 0):
        raise NonPositiveJacobian(f"min det(grad Psi) = {J.min():.3e} <= 0")
    Finv = np.linalg.inv(F)
    FinvT = np.swapaxes(Finv, -1, -2)
    A = J[..., None, None] * (Finv @ FinvT)
    B = J[..., None, None] * FinvT
    if dpsi_dt is None:
        w = np.zeros(F.shape[:-1])
    else:
        w = -np.einsum("...ij,...j->...i", Finv, dpsi_dt)
    return HanzawaCoefficients(J=J, A=A, B=B, w_mesh=w, F=F)


def assemble_coefficients(geom, eta, eta_dot, points, h=1e-3, method="fd"):
    """J, A, B and mesh velocity at ``points`` (shape (..., 3)).

    ``method='fd'`` differentiates the Hanzawa displacement with centred
    differences of step ``h``; ``method='analytic'`` (FlatPlate only) uses
    the closed form grad Psi = I + n (x) grad(eta * cutoff).
    """
    _check_margin(geom, eta)
    pts = np.asarray(points, dtype=float)
    if method == "analytic":
        if geom.kind is not GeometryKind.FLAT_PLATE:
            raise ValueError("analytic Jacobian only for FlatPlate")
        y, s = geom.tubular_coordinates(pts)
        e = eta(y)
        g1, g2 = eta.gradient(y)
        c, dc = geom.cutoff(s), geom.cutoff.derivative(s)
        F = np.broadcast_to(np.eye(3), pts.shape[:-1] + (3, 3)).copy()
        F[..., 2, 0] = g1 * c
        F[..., 2, 1] = g2 * c
        F[..., 2, 2] = 1.0 + e * dc
    elif method == "fd":
        F = np.broadcast_to(np.eye(3), pts.shape[:-1] + (3, 3)).copy()
        for k in range(3):
            dx = np.zeros(3)
            dx[k] = h
            dp = hanzawa_displacement(geom, eta, pts + dx)
            dm = hanzawa_displacement(geom, eta, pts - dx)
            F[..., :, k] += (dp - dm) / (2 * h)
    else:
        raise ValueError(f"unknown method {method!r}")
    dpsi = None
    if eta_dot is not None:
        y, s = geom.tubular_coordinates(pts)
        tube = s > -geom.L
        dpsi = np.zeros(pts.shape)
        if np.any(tube):
            dpsi[tube] = (eta_dot(y[tube]) * geom.cutoff(s[tube]))[..., None] * geom.normal(y[tube])
    return coefficients_from_jacobian(F, dpsi)


def piola_transform(coeff, w):
    """Push-forward values F w / J, attached to the mapped points Psi(x)."""
    if np.any(coeff.J <= 0):
        raise NonPositiveJacobian("non-positive Jacobian in Piola transform")
    return np.einsum("...ij,...j->...i", coeff.F, w) / coeff.J[..., None]


def inverse_piola_transform(coeff, u):
    if np.any(coeff.J <= 0):
        raise NonPositiveJacobian("non-positive Jacobian in Piola transform")
    return np.einsum("...ij,...j->...i", coeff.B.swapaxes(-1, -2), u)


@dataclass
class MarginReport:
    min_normal_dot: float
    min_area_element: float
    height_margin: float
    lipschitz: float
    near_degenerate: bool

    def as_dict(self):
        return {
            "min_normal_dot": self.min_normal_dot,
            "min_area_element": self.min_area_element,
            "height_margin": self.height_margin,
            "lipschitz": self.lipschitz,
            "near_degenerate": self.near_degenerate,
        }


def deformed_boundary(geom, eta, y):
    """(phi_eta, d1 phi_eta, d2 phi_eta, n_eta, n) at parameter points y."""
    e = eta(y)
    g1, g2 = eta.gradient(y)
    n = geom.normal(y)
    t1, t2 = geom.tangents(y)
    dn1, dn2 = geom.normal_derivatives(y)
    p = geom.boundary_point(y) + e[..., None] * n
    d1 = t1 + g1[..., None] * n + e[..., None] * dn1
    d2 = t2 + g2[..., None] * n + e[..., None] * dn2
    cross = np.cross(d1, d2)
    area = np.linalg.norm(cross, axis=-1)
    ref_cross = np.cross(t1, t2)
    sign = np.sign(np.sum(ref_cross * n, axis=-1))
    n_eta = sign[..., None] * cross / np.where(area > 0, area, 1.0)[..., None]
    return p, d1, d2, n_eta, n, area


def margin_samples(geom, eta, refine=4):
    if geom.kind is GeometryKind.FLAT_PLATE:
        m = refine * eta.n
        g = np.arange(m) / m
    else:
        m = refine * eta.n
        g = (np.arange(m) + 0.5) / m
    return np.stack(np.meshgrid(g, g, indexing="ij"), axis=-1)


def degeneracy_margins(geom, eta, refine=4, threshold=1e-3):
    """Sampled non-degeneracy margins of the deformed boundary."""
    y = margin_samples(geom, eta, refine)
    if geom.kind is GeometryKind.FLAT_PLATE and eta.func is None:
        e = _fourier.refine(eta.values, refine, eta.offset)
        g1, g2 = _fourier.gradient(eta.values)
        g1 = _fourier.refine(g1, refine, eta.offset)
        g2 = _fourier.refine(g2, refine, eta.offset)
        n = geom.normal(y)
        d1 = np.zeros(y.shape[:-1] + (3,))
        d2 = np.zeros_like(d1)
        d1[..., 0] = 1.0
        d1[..., 2] = g1
        d2[..., 1] = 1.0
        d2[..., 2] = g2
        p = geom.boundary_point(y) + e[..., None] * n
        cross = np.cross(d1, d2)
        area = np.linalg.norm(cross, axis=-1)
        n_eta = cross / area[..., None]
        sup = float(np.max(np.abs(e)))
    else:
        p, d1, d2, n_eta, n, area = deformed_boundary(geom, eta, y)
        sup = max(float(np.max(np.abs(eta(y)))), eta.sup())
    ndot = np.sum(n * n_eta, axis=-1)
    lip = 0.0
    for axis in (0, 1):
        q = np.roll(p, -1, axis=axis)
        nm = n + np.roll(n, -1, axis=axis)
        d = q - p
        if geom.kind is GeometryKind.FLAT_PLATE:
            d[..., axis] = np.mod(d[..., axis] + 0.5, 1.0) - 0.5
        elif geom.kind is GeometryKind.CYLINDER and axis == 1:
            d[..., 2] = np.mod(d[..., 2] + 0.5 * geom.height, geom.height) - 0.5 * geom.height
        if geom.kind is GeometryKind.SPHERE and axis == 1:
            d, nm = d[:, :-1], nm[:, :-1]
        nm = nm / np.linalg.norm(nm, axis=-1, keepdims=True)
        dn = np.sum(d * nm, axis=-1)
        dt = np.linalg.norm(d - dn[..., None] * nm, axis=-1)
        lip = max(lip, float(np.max(np.abs(dn) / np.maximum(dt, 1e-300))))
    margin = geom.L - sup
    report = MarginReport(
        min_normal_dot=float(np.min(ndot)),
        min_area_element=float(np.min(area)),
        height_margin=float(margin),
        lipschitz=lip,
        near_degenerate=bool(sup >= geom.alpha or np.min(ndot) <= threshold),
    )
    return report


def reference_grid(geom, n, pad=0):
    """Cartesian nodes covering the reference domain with spacing h.

    FlatPlate: x = (i h, j h, k h) with k = -pad .. n + pad.  Curved
    references: a cube around the ball / disc, periodic axis for Cylinder.
    Returns (points, h).
    """
    if geom.kind is GeometryKind.FLAT_PLATE:
        h = 1.0 / n
        g = np.arange(n) * h
        g3 = np.arange(-pad, n + pad + 1) * h
        X = np.stack(np.meshgrid(g, g, g3, indexing="ij"), axis=-1)
        return X, h
    R = geom.radius
    h = 2 * R / n
    g = -R + np.arange(-pad, n + pad + 1) * h
    if geom.kind is GeometryKind.CYLINDER:
        hz = geom.height / n
        gz = np.arange(n) * hz
        X = np.stack(np.meshgrid(g, g, gz, indexing="ij"), axis=-1)
        return X, (h, h, hz)
    X = np.stack(np.meshgrid(g, g, g, indexing="ij"), axis=-1)
    return X, h


def _domain_nodes(geom, n):
    X, hsp = reference_grid(geom, n)
    h = np.broadcast_to(np.asarray(hsp, dtype=float), (3,))
    inside = geom.contains(X)
    if geom.kind is GeometryKind.FLAT_PLATE:
        inside &= (X[..., 2] > 0.5 * h[2]) & (X[..., 2] < 1.0 - 0.5 * h[2])
    return X[inside], h


def _defect_norm(values, h, norm):
    if norm == "max":
        return float(np.max(np.abs(values)))
    if norm == "l2":
        return float(np.sqrt(np.sum(np.abs(values) ** 2) * np.prod(h)))
    raise ValueError(f"unknown norm {norm!r}")


def piola_divergence(geom, eta, n, fd_step=1e-5, norm="max"):
    """Size of sum_j D_j B_ij over reference-grid nodes of the domain.

    D_j is the centred difference with the grid spacing; B comes from the
    finite-difference Jacobian of the Hanzawa map, so the result measures
    the discrete defect of the Piola identity div(cof grad Psi) = 0.
    ``norm`` is "max" or "l2" (node sum weighted by the cell volume).
    """
    pts, h = _domain_nodes(geom, n)
    div = np.zeros(pts.shape)
    for j in range(3):
        e = np.zeros(3)
        e[j] = h[j]
        Bp = assemble_coefficients(geom, eta, None, pts + e, h=fd_step).B
        Bm = assemble_coefficients(geom, eta, None, pts - e, h=fd_step).B
        div += (Bp[..., :, j] - Bm[..., :, j]) / (2 * h[j])
    return _defect_norm(np.linalg.norm(div, axis=-1), h, norm)


def transformed_divergence_defect(geom, eta, velocity, divergence, n, fd_step=1e-5,
                                  norm="max"):
    """Size of B : grad(v o Psi) - J (div v) o Psi over reference-grid nodes.

    ``velocity(x)`` returns (..., 3) values at physical points and
    ``divergence(x)`` its exact divergence; grad(v o Psi) uses centred
    differences with the grid spacing.
    """
    pts, h = _domain_nodes(geom, n)
    co = assemble_coefficients(geom, eta, None, pts, h=fd_step)
    grad = np.zeros(pts.shape + (3,))
    for j in range(3):
        e = np.zeros(3)
        e[j] = h[j]
        vp = velocity(pts + e + hanzawa_displacement(geom, eta, pts + e))
        vm = velocity(pts - e + hanzawa_displacement(geom, eta, pts - e))
        grad[..., :, j] = (vp - vm) / (2 * h[j])
    lhs = np.einsum("...ij,...ij->...", co.B, grad)
    rhs = co.J * divergence(pts + hanzawa_displacement(geom, eta, pts))
    return _defect_norm(lhs - rhs, h, norm)
