"""Staggered (MAC) grid for the FlatPlate box (0,1)^2 x (0,1).

The box has N x N x N cells of width h = 1/N, periodic in x1 and x2, with a
rigid no-slip wall at x3 = 0 and the shell at x3 = 1.

Arrays are shaped (levels, N, N) and indexed [k, i, j].  A lattice is a
triple (a1, a2, vert): lateral offsets in {0, 1/2} cells and a vertical
family, 'cell' (z = (k + 1/2) h, N levels) or 'node' (z = k h, N + 1 levels).

    v1  (0, 1/2, cell)      v2  (1/2, 0, cell)
    v3  (1/2, 1/2, node)    p   (1/2, 1/2, cell)

Velocity unknowns are stacked as [v1, v2, v3 interior (k = 1..N-1), g],
where g is v3 on the top plane (the shell mid-step velocity).  v1 and v2
vanish on both walls (ghost = -interior), v3 vanishes on the bottom.
"""
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .errors import NonPositiveJacobian

CELL, NODE = "cell", "node"
HALF = 0.5

V1_LAT = (0.0, HALF, CELL)
V2_LAT = (HALF, 0.0, CELL)
V3_LAT = (HALF, HALF, NODE)
P_LAT = (HALF, HALF, CELL)
VEL_LATS = (V1_LAT, V2_LAT, V3_LAT)
ALL_LATS = tuple((a1, a2, v) for a1 in (0.0, HALF) for a2 in (0.0, HALF) for v in (CELL, NODE))


def _periodic(n, offsets, values, scale=1.0):
    """n x n circulant sum_d values[d] * u[i + offsets[d]]."""
    m = sp.csr_matrix((n, n))
    for d, c in zip(offsets, values):
        m = m + c * sp.eye(n, k=d, format="csr") + (
            c * sp.eye(n, k=d - n, format="csr") if d > 0 else
            c * sp.eye(n, k=d + n, format="csr") if d < 0 else 0
        )
    return (scale * m).tocsr()


def lateral_op(n, h, kind, a):
    """1D periodic diff/avg taking offset a to offset a + 1/2 (mod 1)."""
    if a == 0.0:  # 0 -> 1/2: uses u[i], u[i+1]
        offs = (0, 1)
    else:  # 1/2 -> 0: uses u[i-1], u[i]
        offs = (-1, 0)
    if kind == "diff":
        return _periodic(n, offs, (-1.0, 1.0), 1.0 / h)
    return _periodic(n, offs, (0.5, 0.5))


def vertical_op(n, h, kind, vert):
    """Vertical diff/avg cell -> node (zero-wall ghosts) or node -> cell."""
    if vert == CELL:
        ext = sp.lil_matrix((n + 2, n))
        ext[0, 0] = -1.0
        for k in range(n):
            ext[k + 1, k] = 1.0
        ext[n + 1, n - 1] = -1.0
        m = n + 2
    else:
        ext = sp.eye(n + 1)
        m = n + 1
    a, b = (-1.0 / h, 1.0 / h) if kind == "diff" else (0.5, 0.5)
    op = sp.diags([np.full(m - 1, a), np.full(m - 1, b)], [0, 1], shape=(m - 1, m))
    return (op @ sp.csr_matrix(ext)).tocsr()


def _toggle(lat, axis):
    a1, a2, v = lat
    if axis == 0:
        return (HALF - a1, a2, v)
    if axis == 1:
        return (a1, HALF - a2, v)
    return (a1, a2, NODE if v == CELL else CELL)


class MACGrid:
    """Structural (coefficient-free) operators of the staggered grid."""

    def __init__(self, n):
        if n < 4:
            raise ValueError("grid too coarse")
        self.n = int(n)
        self.h = 1.0 / n
        self._cache = {}

    # -- sizes ----------------------------------------------------------
    def levels(self, vert):
        return self.n if vert == CELL else self.n + 1

    def size(self, lat):
        return self.levels(lat[2]) * self.n * self.n

    @property
    def plane(self):
        return self.n * self.n

    @cached_property
    def vel_sizes(self):
        n2 = self.plane
        return (self.n * n2, self.n * n2, (self.n - 1) * n2, n2)

    @cached_property
    def vel_slices(self):
        off = np.concatenate([[0], np.cumsum(self.vel_sizes)])
        return tuple(slice(off[i], off[i + 1]) for i in range(4))

    @property
    def nvel(self):
        return sum(self.vel_sizes)

    @property
    def npres(self):
        return self.n * self.plane

    def positions(self, lat):
        """(x1, x2, x3) arrays of shape (levels, N, N)."""
        a1, a2, v = lat
        g = np.arange(self.n) * self.h
        z = (np.arange(self.levels(v)) + (0.5 if v == CELL else 0.0)) * self.h
        Z, X1, X2 = np.meshgrid(z, g + a1 * self.h, g + a2 * self.h, indexing="ij")
        return X1, X2, Z

    def weights(self, lat):
        """Trapezoid weights: 1/2 on the wall planes of node lattices."""
        w = np.ones((self.levels(lat[2]), self.n, self.n))
        if lat[2] == NODE:
            w[0] = 0.5
            w[-1] = 0.5
        return w.ravel()

    # -- elementary operators ---------------------------------------------
    def op(self, kind, axis, lat):
        """Sparse diff/avg along ``axis`` acting on a field on ``lat``."""
        key = (kind, axis, lat)
        if key not in self._cache:
            n, h = self.n, self.h
            a1, a2, v = lat
            I = sp.identity(n, format="csr")
            Iv = sp.identity(self.levels(v), format="csr")
            if axis == 0:
                m = sp.kron(Iv, sp.kron(lateral_op(n, h, kind, a1), I))
            elif axis == 1:
                m = sp.kron(Iv, sp.kron(I, lateral_op(n, h, kind, a2)))
            else:
                m = sp.kron(vertical_op(n, h, kind, v), sp.identity(n * n))
            self._cache[key] = (sp.csr_matrix(m), _toggle(lat, axis))
        return self._cache[key]

    def transfer(self, src, dst):
        """Average from lattice ``src`` to lattice ``dst``."""
        key = ("transfer", src, dst)
        if key not in self._cache:
            m = sp.identity(self.size(src), format="csr")
            lat = src
            for axis in range(3):
                if lat[axis] != dst[axis]:
                    a, lat = self.op("avg", axis, lat)
                    m = a @ m
            self._cache[key] = sp.csr_matrix(m)
        return self._cache[key]

    @cached_property
    def prolong(self):
        """Velocity unknowns -> full fields on (v1, v2, v3) lattices."""
        n2 = self.plane
        s = self.vel_slices
        nv = self.nvel
        p1 = sp.csr_matrix((np.ones(self.vel_sizes[0]), (np.arange(self.vel_sizes[0]),
                            np.arange(s[0].start, s[0].stop))), shape=(self.size(V1_LAT), nv))
        p2 = sp.csr_matrix((np.ones(self.vel_sizes[1]), (np.arange(self.vel_sizes[1]),
                            np.arange(s[1].start, s[1].stop))), shape=(self.size(V2_LAT), nv))
        rows = np.arange(n2, self.size(V3_LAT))
        cols = np.arange(s[2].start, s[3].stop)
        p3 = sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(self.size(V3_LAT), nv))
        return p1, p2, p3

    def gradient_blocks(self, comp):
        """For velocity component ``comp``: D_j P (j = 0..2) and lattices."""
        key = ("grad", comp)
        if key not in self._cache:
            P = self.prolong[comp]
            lat = VEL_LATS[comp]
            out = []
            for j in range(3):
                d, lj = self.op("diff", j, lat)
                out.append((sp.csr_matrix(d @ P), lj))
            self._cache[key] = out
        return self._cache[key]

    def cross_blocks(self, comp, j, k):
        """(avg_k D_j P, avg_j D_k P) and their common lattice, j < k."""
        key = ("cross", comp, j, k)
        if key not in self._cache:
            G = self.gradient_blocks(comp)
            Gj, lj = G[j]
            Gk, lk = G[k]
            ak, ljk = self.op("avg", k, lj)
            aj, lkj = self.op("avg", j, lk)
            assert ljk == lkj
            self._cache[key] = (sp.csr_matrix(ak @ Gj), sp.csr_matrix(aj @ Gk), ljk)
        return self._cache[key]

    def divergence_blocks(self):
        """[(D_j, avg_{i->j} P_i)] for the conservative divergence."""
        key = ("div",)
        if key not in self._cache:
            out = []
            for j in range(3):
                d, lat = self.op("diff", j, VEL_LATS[j])
                assert lat == P_LAT
                row = []
                for i in range(3):
                    row.append(sp.csr_matrix(self.transfer(VEL_LATS[i], VEL_LATS[j]) @ self.prolong[i]))
                out.append((d, row))
            self._cache[key] = out
        return self._cache[key]

    def central_blocks(self, comp):
        """Central differences of component ``comp`` at its own unknowns.

        Returns 3 matrices (rows: unknowns of comp excluding g, cols: all
        velocity unknowns).
        """
        key = ("central", comp)
        if key not in self._cache:
            P = self.prolong[comp]
            lat = VEL_LATS[comp]
            out = []
            for j in range(3):
                d, lj = self.op("diff", j, lat)
                a, back = self.op("avg", j, lj)
                if lat[2] == NODE and j == 2:
                    # node -> cell -> node would need a ghost for the derivative
                    n = self.n
                    c = sp.diags([np.full(n, -0.5 / self.h), np.full(n, 0.5 / self.h)],
                                 [-1, 1], shape=(n + 1, n + 1))
                    m = sp.kron(c, sp.identity(self.plane)) @ P
                else:
                    m = a @ d @ P
                m = sp.csr_matrix(m)
                if comp == 2:
                    m = m[self.plane:self.size(V3_LAT) - self.plane]
                out.append(m)
            self._cache[key] = out
        return self._cache[key]

    def field_weights(self):
        """Trapezoid weights over velocity unknowns (1/2 on g)."""
        w = np.ones(self.nvel)
        w[self.vel_slices[3]] = 0.5
        return w

    # -- packing --------------------------------------------------------
    def split(self, x):
        n, n2 = self.n, self.plane
        s = self.vel_slices
        v1 = x[s[0]].reshape(n, n, n)
        v2 = x[s[1]].reshape(n, n, n)
        v3 = np.zeros((n + 1, n, n))
        v3[1:n] = x[s[2]].reshape(n - 1, n, n)
        v3[n] = x[s[3]].reshape(n, n)
        return v1, v2, v3

    def pack(self, v1, v2, v3):
        n = self.n
        return np.concatenate([v1.ravel(), v2.ravel(), v3[1:n].ravel(), v3[n].ravel()])

    def sample_velocity(self, func):
        """Pack func(x1, x2, x3) -> (u1, u2, u3) sampled at the staggered nodes."""
        comps = []
        for c, lat in enumerate(VEL_LATS):
            X1, X2, Z = self.positions(lat)
            comps.append(np.asarray(func(X1, X2, Z)[c], dtype=float) * np.ones(X1.shape))
        return self.pack(*comps)

    def sample_pressure(self, func):
        X1, X2, Z = self.positions(P_LAT)
        return np.asarray(func(X1, X2, Z), dtype=float) * np.ones(X1.shape)


@dataclass
class LatticeCoefficients:
    """J, A, B and mesh velocity on every lattice of the grid."""

    J: dict
    A: dict
    B: dict
    w_mesh: dict

    @classmethod
    def identity(cls, grid):
        J, A, B, W = {}, {}, {}, {}
        for lat in ALL_LATS:
            shape = (grid.size(lat),)
            J[lat] = np.ones(shape)
            A[lat] = np.broadcast_to(np.eye(3), shape + (3, 3)).copy()
            B[lat] = A[lat].copy()
            W[lat] = np.zeros(shape + (3,))
        return cls(J, A, B, W)


def flat_plate_coefficients(grid, geom, eta, eta_dot=None):
    """Closed-form Hanzawa coefficients of the FlatPlate map on all lattices.

    ``eta`` and ``eta_dot`` are DisplacementFields on the N x N cell-centred
    shell grid; staggered lateral positions are reached by spectral shifts.
    """
    J, A, B, W = {}, {}, {}, {}
    for lat in ALL_LATS:
        a1, a2, v = lat
        s1, s2 = a1 - 0.5, a2 - 0.5
        e = eta.on_lattice(s1, s2)
        g1, g2 = eta.gradient_on_lattice(s1, s2)
        _, _, Z = grid.positions(lat)
        z = Z[:, 0, 0]
        c = geom.cutoff(z - 1.0)[:, None, None]
        dc = geom.cutoff.derivative(z - 1.0)[:, None, None]
        # grad Psi = I + e3 (x) (c d1 eta, c d2 eta, eta c'); its cofactor is
        # B = [[J, 0, -c d1 eta], [0, J, -c d2 eta], [0, 0, 1]]
        shape = Z.shape
        j = (1.0 + e[None] * dc) * np.ones(shape)
        if np.any(j <= 0):
            raise NonPositiveJacobian(f"min det(grad Psi) = {j.min():.3e} <= 0")
        b13 = -g1[None] * c * np.ones(shape)
        b23 = -g2[None] * c * np.ones(shape)
        Bm = np.zeros(shape + (3, 3))
        Bm[..., 0, 0] = j
        Bm[..., 1, 1] = j
        Bm[..., 0, 2] = b13
        Bm[..., 1, 2] = b23
        Bm[..., 2, 2] = 1.0
        Am = np.einsum("...ki,...kj->...ij", Bm, Bm) / j[..., None, None]
        Wm = np.zeros(shape + (3,))
        if eta_dot is not None:
            Wm[..., 2] = -eta_dot.on_lattice(s1, s2)[None] * c / j
        J[lat] = j.ravel()
        A[lat] = Am.reshape(-1, 3, 3)
        B[lat] = Bm.reshape(-1, 3, 3)
        W[lat] = Wm.reshape(-1, 3)
    return LatticeCoefficients(J, A, B, W)


class MACOperators:
    """Coefficient-dependent operators: mass, diffusion, divergence, convection."""

    def __init__(self, grid):
        self.grid = grid

    def mass_diag(self, co):
        g = self.grid
        h3 = g.h**3
        s = g.vel_slices
        d = np.empty(g.nvel)
        d[s[0]] = co.J[V1_LAT]
        d[s[1]] = co.J[V2_LAT]
        j3 = co.J[V3_LAT].reshape(g.n + 1, g.plane)
        d[s[2]] = j3[1:g.n].ravel()
        d[s[3]] = 0.5 * j3[g.n]
        return d * h3

    def _diffusion_terms(self, co):
        g = self.grid
        for comp in range(3):
            G = g.gradient_blocks(comp)
            for j in range(3):
                Gj, lat = G[j]
                yield "diag", Gj, None, g.weights(lat) * co.A[lat][:, j, j]
            for j in range(3):
                for k in range(j + 1, 3):
                    P, Q, lat = g.cross_blocks(comp, j, k)
                    yield "cross", P, Q, g.weights(lat) * co.A[lat][:, j, k]

    def diffusion(self, co, mu=1.0):
        """Symmetric stiffness sum_ij int A grad v_i . grad v_i (times h^3)."""
        h3 = self.grid.h**3
        K = None
        for kind, P, Q, c in self._diffusion_terms(co):
            D = sp.diags(c)
            t = P.T @ D @ P if kind == "diag" else P.T @ D @ Q + Q.T @ D @ P
            K = t if K is None else K + t
        return (mu * h3 * K).tocsr()

    def apply_diffusion(self, co, x, mu=1.0):
        h3 = self.grid.h**3
        y = np.zeros_like(x)
        for kind, P, Q, c in self._diffusion_terms(co):
            if kind == "diag":
                y += P.T @ (c * (P @ x))
            else:
                y += P.T @ (c * (Q @ x)) + Q.T @ (c * (P @ x))
        return mu * h3 * y

    def divergence(self, co):
        """Conservative transformed divergence sum_j D_j (sum_i B_ij avg v_i)."""
        C = None
        for j, (d, row) in enumerate(self.grid.divergence_blocks()):
            lat = VEL_LATS[j]
            for i in range(3):
                b = co.B[lat][:, i, j]
                if not np.any(b):
                    continue
                t = d @ sp.diags(b) @ row[i]
                C = t if C is None else C + t
        return C.tocsr()

    def apply_divergence(self, co, x):
        out = np.zeros(self.grid.npres)
        for j, (d, row) in enumerate(self.grid.divergence_blocks()):
            lat = VEL_LATS[j]
            flux = np.zeros(d.shape[1])
            for i in range(3):
                b = co.B[lat][:, i, j]
                if np.any(b):
                    flux += b * (row[i] @ x)
            out += d @ flux
        return out

    def apply_divergence_T(self, co, q):
        y = np.zeros(self.grid.nvel)
        for j, (d, row) in enumerate(self.grid.divergence_blocks()):
            lat = VEL_LATS[j]
            t = d.T @ q
            for i in range(3):
                b = co.B[lat][:, i, j]
                if np.any(b):
                    y += row[i].T @ (b * t)
        return y

    def transport_velocity(self, co, x, comp):
        """c = J w_mesh + B^T v at the unknowns of component ``comp``."""
        g = self.grid
        lat = VEL_LATS[comp]
        fields = [g.transfer(VEL_LATS[i], lat) @ (g.prolong[i] @ x) for i in range(3)]
        B = co.B[lat]
        c = co.J[lat][:, None] * co.w_mesh[lat]
        for i in range(3):
            c = c + B[:, i, :] * fields[i][:, None]
        if comp == 2:
            c = c[g.plane:g.size(V3_LAT) - g.plane]
        return c

    def convection(self, co, x):
        """Skew-symmetric convection matrix N = (L - L^T) / 2, h^3-weighted.

        L applies (c . grad) to each component by central differences with
        the transport velocity c built from ``x``; the g rows of L are zero,
        so x^T N x = 0 exactly.
        """
        g = self.grid
        h3 = g.h**3
        blocks = []
        for comp in range(3):
            c = self.transport_velocity(co, x, comp)
            Dc = g.central_blocks(comp)
            L = sp.diags(c[:, 0]) @ Dc[0] + sp.diags(c[:, 1]) @ Dc[1] + sp.diags(c[:, 2]) @ Dc[2]
            blocks.append(L)
        blocks.append(sp.csr_matrix((g.plane, g.nvel)))
        L = h3 * sp.vstack(blocks).tocsr()
        return 0.5 * (L - L.T)

    def top_flux(self, x):
        """Boundary flux through the top plane, sum of g * h^2."""
        return float(np.sum(x[self.grid.vel_slices[3]]) * self.grid.h**2)
