"""Hybrid mimetic mixed (HMM) gradient discretisation.

Unknowns: one value per cell followed by one value per face.  ``Pi`` is the
cell value; on the diamond ``D_{K,sigma}`` the gradient is the consistent
cell gradient ``G_K v = |K|^{-1} sum |sigma'| v_sigma' n_{K,sigma'}`` plus the
stabilisation ``sqrt(2)/d_{K,sigma} (v_sigma - v_K - G_K v . (x_sigma - x_K))
n_{K,sigma}``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .gdm import GradientDiscretisation, _tensor_values
from .linalg import assemble
from .quadrature import diamond_quadrature

__all__ = ["HmmGd", "FluxSet", "FVReport", "hmm_build", "hmm_fluxes", "check_fv_relations"]

STAB = np.sqrt(2.0)


class HmmGd(GradientDiscretisation):
    name = "hmm"
    pi_degree = 0
    grad_degree = 0

    def __init__(self, mesh):
        super().__init__(mesh)
        if np.any(mesh.hf_dist <= 0):
            raise ValueError("degenerate diamond: d_K,sigma <= 0")
        self._build_gradients()

    @property
    def n_dofs(self) -> int:
        return self.mesh.n_cells + self.mesh.n_faces

    def cell_dof(self, k):
        return np.asarray(k)

    def face_dof(self, f):
        return self.mesh.n_cells + np.asarray(f)

    def _build_gradients(self):
        m = self.mesh
        nc = m.n_cells
        counts = m.faces_per_cell
        # group cells by face count for dense per-cell algebra
        self.groups = {}
        rows, cols, vx, vy = [], [], [], []
        for n in np.unique(counts):
            cells = np.flatnonzero(counts == n)
            hf = m.cell_ptr[cells][:, None] + np.arange(n)[None, :]  # (ncg, n)
            area = m.cell_areas[cells]
            nrm = m.hf_normal[hf]  # (ncg, n, 2)
            ln = m.hf_length[hf]
            gbar = ln[..., None] * nrm / area[:, None, None]  # coefficient of v_sigma'
            xk = m.cell_points[cells]
            dx = m.hf_center[hf] - xk[:, None, :]  # (ncg, n, 2)
            s = STAB / m.hf_dist[hf]  # (ncg, n)
            # C[k, j, l, :] = coefficient of face l in the gradient on diamond j
            proj = np.einsum("kli,kji->kjl", gbar, dx)  # gbar_l . (x_j - x_K)
            C = gbar[:, None, :, :] - (s[..., None] * proj)[..., None] * nrm[:, :, None, :]
            eye = np.eye(n)[None, :, :, None]
            C = C + eye * (s[..., None, None] * nrm[:, :, None, :])
            CK = -s[..., None] * nrm  # coefficient of v_K on diamond j
            self.groups[int(n)] = (cells, hf, C, CK)
            faces = m.hf_face[hf]  # (ncg, n)
            r = np.broadcast_to(hf[:, :, None], C.shape[:3])
            c = np.broadcast_to(nc + faces[:, None, :], C.shape[:3])
            rows += [r.ravel(), hf.ravel()]
            cols += [c.ravel(), np.broadcast_to(cells[:, None], hf.shape).ravel()]
            vx += [C[..., 0].ravel(), CK[..., 0].ravel()]
            vy += [C[..., 1].ravel(), CK[..., 1].ravel()]
        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        shape = (m.n_halffaces, self.n_dofs)
        self.grad_x = assemble(rows, cols, np.concatenate(vx), shape)
        self.grad_y = assemble(rows, cols, np.concatenate(vy), shape)
        self._pi = sp.csr_matrix(
            (np.ones(m.n_halffaces), (np.arange(m.n_halffaces), m.hf_cell)),
            shape=shape,
        )

    def reconstruct(self, hf, points=None):
        hf = np.asarray(hf)
        return self._pi[hf], self.grad_x[hf], self.grad_y[hf]

    def diamond_gradient(self, v) -> np.ndarray:
        """Constant gradient on every diamond, shape ``(nhf, 2)``."""
        v = self._check(v)
        return np.stack([self.grad_x @ v, self.grad_y @ v], axis=1)

    def cell_values(self, v) -> np.ndarray:
        return self._check(v)[: self.mesh.n_cells]

    def interpolate_initial(self, f) -> np.ndarray:
        """Cell averages on cells, zero on faces."""
        m = self.mesh
        q = diamond_quadrature(m, 5)
        vals = np.asarray(f(q.points), dtype=float) * np.ones(len(q))
        cell_int = np.bincount(m.hf_cell[q.hf], weights=q.weights * vals, minlength=m.n_cells)
        out = np.zeros(self.n_dofs)
        out[: m.n_cells] = cell_int / m.cell_areas
        return out

    def interpolate_smooth(self, f) -> np.ndarray:
        """Point values at the cell points and face midpoints."""
        m = self.mesh
        out = np.empty(self.n_dofs)
        out[: m.n_cells] = f(m.cell_points)
        out[m.n_cells:] = f(m.face_centers)
        return out

    # -- fluxes ------------------------------------------------------------------
    def local_matrices(self, A=None):
        """Per cell-group local flux matrices ``L[k, s, s']``.

        ``sum_s F_{K,s} (v_K - v_s) = int_K A grad p . grad v`` with
        ``F_{K,s} = sum_s' L[s, s'] (p_K - p_s')``.
        """
        nhf = self.mesh.n_halffaces
        At = _tensor_values(np.eye(2) if A is None else A, nhf)
        area = self.mesh.diamonds.areas
        out = {}
        for n, (cells, hf, C, _) in self.groups.items():
            Aj = At[hf] * area[hf][..., None, None]  # (ncg, n, 2, 2)
            L = np.einsum("kjai,kjim,kjbm->kab", C, Aj, C)
            out[n] = (cells, hf, L)
        return out

    def fluxes(self, p, A=None) -> "FluxSet":
        p = self._check(p)
        nc = self.mesh.n_cells
        F = np.zeros(self.mesh.n_halffaces)
        for n, (cells, hf, L) in self.local_matrices(A).items():
            w = p[cells][:, None] - p[nc + self.mesh.hf_face[hf]]
            F[hf] = np.einsum("kab,kb->ka", L, w)
        return FluxSet(self.mesh, F)


@dataclass(frozen=True)
class FVReport:
    balance: float
    conservativity: float
    boundary: float
    scale: float

    def as_dict(self) -> dict:
        return {
            "balance": self.balance,
            "conservativity": self.conservativity,
            "boundary": self.boundary,
            "scale": self.scale,
        }


class FluxSet:
    """Fluxes ``F_{K,sigma}`` indexed by half-face."""

    def __init__(self, mesh, values):
        values = np.asarray(values, dtype=float)
        if values.shape != (mesh.n_halffaces,):
            raise ValueError("one flux per half-face required")
        self.mesh = mesh
        self.values = values

    @property
    def scale(self) -> float:
        return float(np.max(np.abs(self.values))) if len(self.values) else 0.0

    def cell_sums(self) -> np.ndarray:
        return np.bincount(self.mesh.hf_cell, weights=self.values, minlength=self.mesh.n_cells)

    def conservativity_residual(self) -> float:
        fh = self.mesh.face_halffaces
        inner = fh[:, 1] >= 0
        if not np.any(inner):
            return 0.0
        r = self.values[fh[inner, 0]] + self.values[fh[inner, 1]]
        return float(np.max(np.abs(r)))

    def boundary_residual(self) -> float:
        fh = self.mesh.face_halffaces
        bnd = fh[:, 1] < 0
        return float(np.max(np.abs(self.values[fh[bnd, 0]]))) if np.any(bnd) else 0.0

    def symmetrized(self) -> "FluxSet":
        """Conservative fluxes ``(F_K - F_L)/2`` on internal faces, zero on the boundary."""
        fh = self.mesh.face_halffaces
        out = np.zeros_like(self.values)
        inner = fh[:, 1] >= 0
        a, b = fh[inner, 0], fh[inner, 1]
        half = 0.5 * (self.values[a] - self.values[b])
        out[a] = half
        out[b] = -half
        return FluxSet(self.mesh, out)

    def __add__(self, other):
        return FluxSet(self.mesh, self.values + other.values)

    def __mul__(self, s):
        return FluxSet(self.mesh, s * self.values)

    __rmul__ = __mul__


def hmm_build(mesh) -> HmmGd:
    return HmmGd(mesh)


def hmm_fluxes(gd: HmmGd, A, p) -> FluxSet:
    return gd.fluxes(p, A)


def check_fv_relations(fluxes: FluxSet, source_integrals) -> FVReport:
    """Residuals of the balance, conservativity and boundary relations.

    ``source_integrals[K]`` is ``int_K (q+ - q-)``.
    """
    s = np.asarray(source_integrals, dtype=float)
    bal = fluxes.cell_sums() - s
    return FVReport(
        balance=float(np.max(np.abs(bal))) if len(bal) else 0.0,
        conservativity=fluxes.conservativity_residual(),
        boundary=fluxes.boundary_residual(),
        scale=max(fluxes.scale, float(np.max(np.abs(s))) if len(s) else 0.0),
    )
