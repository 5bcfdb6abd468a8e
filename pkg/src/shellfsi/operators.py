"""Extension, mean-correction and Bogovskij operators.

The Bogovskij operator works on a physical Cartesian MAC grid covering
every admissible deformed FlatPlate domain, (0,1)^2 x (0, 1 + L), periodic
in x1 and x2.  A deformed domain is represented by the mask of cells whose
centres lie below the deformed top.
"""
from dataclasses import dataclass
import hashlib

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.interpolate import RegularGridInterpolator

from . import _fourier
from .errors import BudgetExceeded, DegenerateGeometry, DegenerateDisplacement
from .geometry import GeometryKind, deformed_boundary, margin_samples, reference_grid


# -- extension of boundary data -------------------------------------------------
@dataclass
class GridVectorField:
    """Vector samples at reference points (shape (..., 3)) on a regular grid."""

    points: np.ndarray
    values: np.ndarray
    spacing: object


def extend_boundary_data(geom, eta, b, n, pad=0):
    """Extension of the scalar boundary datum ``b`` in the normal direction.

    The value at the reference point x (physical point Psi_eta(x)) is
    b(y(x)) cutoff(s(x)) n(y(x)), so the trace on the deformed boundary is
    exactly b n and the field vanishes for s <= -L.  ``b`` is a
    DisplacementField (grid values, optional analytic func).
    """
    if eta.sup() >= geom.alpha:
        raise DegenerateDisplacement("displacement outside the safety margin")
    X, hsp = reference_grid(geom, n, pad=pad)
    y, s = geom.tubular_coordinates(X)
    tube = s > -geom.L
    vals = np.zeros(X.shape)
    if np.any(tube):
        vals[tube] = (b(y[tube]) * geom.cutoff(s[tube]))[..., None] * geom.normal(y[tube])
    return GridVectorField(X, vals, hsp)


def _interpolator(geom, field):
    X = field.points
    if geom.kind is GeometryKind.FLAT_PLATE:
        # one periodic layer in x1 and x2 so points in [1 - h, 1] interpolate
        g1 = np.append(X[:, 0, 0, 0], 1.0)
        g2 = np.append(X[0, :, 0, 1], 1.0)
        g3 = X[0, 0, :, 2]
        v = np.concatenate([field.values, field.values[:1]], axis=0)
        v = np.concatenate([v, v[:, :1]], axis=1)
        return RegularGridInterpolator((g1, g2, g3), v)
    if geom.kind is GeometryKind.CYLINDER:
        g3 = np.append(X[0, 0, :, 2], geom.height)
        v = np.concatenate([field.values, field.values[:, :, :1]], axis=2)
        return RegularGridInterpolator((X[:, 0, 0, 0], X[0, :, 0, 1], g3), v)
    return RegularGridInterpolator((X[:, 0, 0, 0], X[0, :, 0, 1], X[0, 0, :, 2]), field.values)


def trace_defect(geom, eta, b, field, n_samples=24):
    """max |(extension) o phi - b n| over boundary samples (reference trace).

    The extension's value at reference boundary points equals its value at
    the deformed boundary points phi_eta(y) = Psi_eta(phi(y)).
    """
    y = margin_samples(geom, eta, refine=1) if n_samples is None else None
    if y is None:
        g = (np.arange(n_samples) + 0.5) / n_samples
        y = np.stack(np.meshgrid(g, g, indexing="ij"), axis=-1)
    pts = geom.boundary_point(y)
    if geom.kind is GeometryKind.CYLINDER:
        pts = pts.copy()
        pts[..., 2] = np.mod(pts[..., 2], geom.height)
    val = _interpolator(geom, field)(pts.reshape(-1, 3)).reshape(pts.shape)
    return float(np.max(np.abs(val - b(y)[..., None] * geom.normal(y))))


def half_norm(b_values):
    """Spectral W^{1/2,2} norm on the periodic unit square."""
    n = b_values.shape[0]
    hat = np.fft.fft2(b_values) / n**2
    w = np.sqrt(1.0 + _fourier.k_squared(n))
    return float(np.sqrt(np.sum(w * np.abs(hat) ** 2)))


def grid_w12_norm(field):
    """Discrete W^{1,2} norm of a FlatPlate node field (periodic laterally)."""
    v = field.values
    h = field.spacing
    d1 = (np.roll(v, -1, 0) - v) / h
    d2 = (np.roll(v, -1, 1) - v) / h
    d3 = np.diff(v, axis=2) / h
    return float(np.sqrt((np.sum(v**2) + np.sum(d1**2) + np.sum(d2**2) + np.sum(d3**2)) * h**3))


# -- mean correction -----------------------------------------------------------
def boundary_weight(geom, eta, y=None):
    """n . n_eta |d1 phi_eta x d2 phi_eta| at parameter samples."""
    if geom.kind is GeometryKind.FLAT_PLATE:
        # the graph normal times the area element is (-grad eta, 1)
        shape = eta.values.shape if y is None else y.shape[:-1]
        return np.ones(shape)
    y = eta.positions() if y is None else y
    _, _, _, n_eta, n, area = deformed_boundary(geom, eta, y)
    return np.sum(n * n_eta, axis=-1) * area


def mean_correction(geom, eta, xi):
    """Split the boundary datum into a flux-free part and the constant K.

    K = int xi w / int w with w = n . n_eta |det grad phi_eta|, so that
    int (xi - K) w dy = 0 (Gauss constraint for a solenoidal extension).
    """
    xi = np.asarray(xi, dtype=float)
    w = boundary_weight(geom, eta)
    total = float(np.mean(w))
    if total <= 0:
        raise DegenerateGeometry("boundary weight integral is not positive")
    K = float(np.mean(w * xi)) / total
    return xi - K, K


# -- Bogovskij operator ----------------------------------------------------------
def _bump1d(x, c, r):
    t = (x - c) / r
    out = np.zeros_like(t)
    inside = np.abs(t) < 1
    out[inside] = np.exp(-1.0 / (1.0 - t[inside] ** 2))
    return out


@dataclass
class BogovskijResult:
    u1: np.ndarray  # x1-faces, (levels, N, N), face i at x1 = i h
    u2: np.ndarray  # x2-faces
    u3: np.ndarray  # x3-faces, (levels + 1, N, N), face k at x3 = k h
    mask: np.ndarray
    rhs: np.ndarray  # f - b int f on the mask


class BogovskijOperator:
    """Right inverse of the divergence with zero boundary values.

    One instance serves every displacement within the budgets
    |eta|_inf <= L and |grad eta|_inf <= C_L.  For a mask of cells inside
    the deformed domain it solves the Neumann graph Laplacian on interior
    faces for the compatible datum g = f - b int f, and returns the face
    gradient of the potential; faces touching the boundary carry zero.
    """

    def __init__(self, n, L=0.5, lipschitz_budget=1.0, bump_center=(0.5, 0.5, 0.25),
                 bump_radius=0.2):
        self.n = int(n)
        self.h = 1.0 / n
        self.L = float(L)
        self.C_L = float(lipschitz_budget)
        self.levels = int(np.ceil((1.0 + self.L) / self.h))
        z = (np.arange(self.levels) + 0.5) * self.h
        g = (np.arange(self.n) + 0.5) * self.h
        c1, c2, c3 = bump_center
        if c3 + bump_radius >= 1.0 - self.L:
            raise ValueError("bump support must avoid the tubular neighbourhood")
        b = (_bump1d(z, c3, bump_radius)[:, None, None] * _bump1d(g, c1, bump_radius)[None, :, None]
             * _bump1d(g, c2, bump_radius)[None, None, :])
        self.bump = b / (np.sum(b) * self.h**3)
        self._factor_cache = {}

    def cell_centres(self):
        g = (np.arange(self.n) + 0.5) * self.h
        z = (np.arange(self.levels) + 0.5) * self.h
        return np.meshgrid(z, g, g, indexing="ij")

    def mask_for(self, eta):
        """Cells whose centres lie strictly inside the deformed box."""
        lat = eta.on_lattice(0.0, 0.0) if eta.n == self.n else None
        if lat is None:
            g = (np.arange(self.n) + 0.5) * self.h
            y = np.stack(np.meshgrid(g, g, indexing="ij"), axis=-1)
            lat = eta(y)
        Z = (np.arange(self.levels) + 0.5)[:, None, None] * self.h
        return Z < 1.0 + lat[None]

    def check_budget(self, eta):
        g1, g2 = eta.gradient_on_lattice(0.0, 0.0)
        lip = float(np.sqrt(g1**2 + g2**2).max())
        if eta.sup() > self.L or lip > self.C_L:
            raise BudgetExceeded(
                f"|eta|_inf = {eta.sup():.3g} (budget {self.L:.3g}), "
                f"|grad eta|_inf = {lip:.3g} (budget {self.C_L:.3g})")

    def _faces(self, mask):
        """Interior faces: (axis, lower cell index, upper cell index)."""
        idx = np.arange(mask.size).reshape(mask.shape)
        out = []
        for axis in (1, 2):
            nb = np.roll(idx, -1, axis=axis)
            both = mask & np.roll(mask, -1, axis=axis)
            out.append((axis, idx[both], nb[both]))
        both = mask[:-1] & mask[1:]
        out.append((0, idx[:-1][both], idx[1:][both]))
        return out

    def _factor(self, mask):
        key = hashlib.sha1(np.packbits(mask).tobytes()).hexdigest()
        if key not in self._factor_cache:
            cells = np.flatnonzero(mask.ravel())
            pos = -np.ones(mask.size, dtype=int)
            pos[cells] = np.arange(cells.size)
            faces = self._faces(mask)
            nf = sum(lo.size for _, lo, _ in faces)
            # G: potential on mask cells -> gradient on interior faces
            r = []
            c = []
            v = []
            off = 0
            for _, lo, hi in faces:
                m = lo.size
                r += [np.arange(off, off + m)] * 2
                c += [pos[hi], pos[lo]]
                v += [np.full(m, 1.0 / self.h), np.full(m, -1.0 / self.h)]
                off += m
            G = sp.csr_matrix((np.concatenate(v), (np.concatenate(r), np.concatenate(c))),
                              shape=(nf, cells.size))
            Lap = (-(G.T @ G)).tocsc()  # div o grad, div = -G^T
            K = Lap[1:, 1:].tocsc()
            lu = spla.splu(K, permc_spec="MMD_AT_PLUS_A", options={"SymmetricMode": True})
            if len(self._factor_cache) > 16:
                self._factor_cache.clear()
            self._factor_cache[key] = (cells, pos, faces, G, (K, lu))
        return self._factor_cache[key]

    def divergence(self, res):
        """Discrete MAC divergence of a face field on the physical grid."""
        h = self.h
        d = (np.roll(res.u1, -1, axis=1) - res.u1) / h + (np.roll(res.u2, -1, axis=2) - res.u2) / h
        d += (res.u3[1:] - res.u3[:-1]) / h
        return d

    def apply(self, eta, f):
        """Bog f for the deformed domain of ``eta``.

        ``f`` is an array on the physical cell grid (levels, N, N) or a
        callable f(x1, x2, x3); values outside the mask are ignored.
        """
        self.check_budget(eta)
        mask = self.mask_for(eta)
        if callable(f):
            Z, X1, X2 = self.cell_centres()
            f = f(X1, X2, Z)
        f = np.where(mask, np.asarray(f, dtype=float), 0.0)
        if np.any(self.bump[~mask] != 0):
            raise BudgetExceeded("bump support leaves the deformed domain")
        total = float(np.sum(f) * self.h**3)
        g = np.where(mask, f - self.bump * total, 0.0)
        cells, pos, faces, G, (K, lu) = self._factor(mask)
        rhs = g.ravel()[cells]
        phi = np.zeros(cells.size)
        phi[1:] = lu.solve(rhs[1:])
        phi[1:] += lu.solve(rhs[1:] - K @ phi[1:])  # one refinement step
        grad = G @ phi
        u = [np.zeros((self.levels, self.n, self.n)), np.zeros((self.levels, self.n, self.n)),
             np.zeros((self.levels + 1, self.n, self.n))]
        off = 0
        for axis, lo, hi in faces:
            m = lo.size
            vals = grad[off:off + m]
            off += m
            if axis == 1:
                # face between lo and its x1-neighbour sits at the neighbour's x1-face
                u[0].ravel()[hi] = vals
            elif axis == 2:
                u[1].ravel()[hi] = vals
            else:
                k, i, j = np.unravel_index(lo, mask.shape)
                u[2][k + 1, i, j] = vals
        return BogovskijResult(u[0], u[1], u[2], mask, g)

    def boundary_values(self, res):
        """Largest |u| on faces that touch the boundary or lie outside."""
        m = res.mask
        inner1 = m & np.roll(m, 1, axis=1)
        inner2 = m & np.roll(m, 1, axis=2)
        inner3 = np.zeros(res.u3.shape, dtype=bool)
        inner3[1:-1] = m[:-1] & m[1:]
        vals = [np.abs(res.u1[~inner1]), np.abs(res.u2[~inner2]), np.abs(res.u3[~inner3])]
        return float(max(v.max() if v.size else 0.0 for v in vals))

    def w12_norm(self, res):
        h = self.h
        tot = 0.0
        for u in (res.u1, res.u2, res.u3):
            d1 = (np.roll(u, -1, 1) - u) / h
            d2 = (np.roll(u, -1, 2) - u) / h
            d3 = np.diff(u, axis=0) / h
            tot += np.sum(u**2) + np.sum(d1**2) + np.sum(d2**2) + np.sum(d3**2)
        return float(np.sqrt(tot * h**3))


def bogovskij_apply(bog, eta, f):
    return bog.apply(eta, f)
