"""Finite element gradient discretisations on triangulations.

* :class:`P1Gd` - continuous piecewise linear functions, nodal unknowns.
* :class:`Rt0MixedGd` - piecewise constant unknowns with the gradient
  defined by duality against the lowest-order Raviart-Thomas space with
  zero normal trace, weighted by a diffusion tensor frozen per element.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .darcy import DarcyField
from .gdm import GradientDiscretisation, _tensor_values
from .linalg import SolverConfig, assemble, pcg, solve_zero_mean, SolverError
from .quadrature import diamond_quadrature, triangle_rule

__all__ = ["P1Gd", "Rt0MixedGd", "p1_build", "rt0_build", "rt0_darcy"]


def _require_triangles(mesh):
    if not mesh.is_triangular:
        raise ValueError("finite element GDs need a triangulation (3 faces per cell)")


def _triangle_vertices(mesh) -> np.ndarray:
    """(ncells, 3) vertex ids in counter-clockwise order."""
    return mesh.cell_vertices.reshape(-1, 3)


class P1Gd(GradientDiscretisation):
    """Conforming P1 elements; ``Pi`` is the piecewise linear interpolant."""

    name = "p1"
    pi_degree = 1
    grad_degree = 0

    def __init__(self, mesh):
        _require_triangles(mesh)
        super().__init__(mesh)
        tv = _triangle_vertices(mesh)
        X = mesh.vertices[tv]  # (nc, 3, 2)
        # barycentric lambda_i(x) = c_i + g_i . x
        T = np.concatenate([np.ones((len(tv), 3, 1)), X], axis=2)  # rows (1, x, y)
        inv = np.linalg.inv(T)  # columns give coefficients
        self._tv = tv
        self._c = inv[:, 0, :]  # (nc, 3)
        self._g = np.transpose(inv[:, 1:, :], (0, 2, 1))  # (nc, 3, 2)

    @property
    def n_dofs(self) -> int:
        return self.mesh.n_vertices

    def reconstruct(self, hf, points):
        hf = np.asarray(hf)
        pts = np.asarray(points, dtype=float)
        k = self.mesh.hf_cell[hf]
        lam = self._c[k] + np.einsum("pij,pj->pi", self._g[k], pts)
        n = len(hf)
        rows = np.repeat(np.arange(n), 3)
        cols = self._tv[k].ravel()
        shape = (n, self.n_dofs)
        P = sp.csr_matrix((lam.ravel(), (rows, cols)), shape=shape)
        Gx = sp.csr_matrix((self._g[k][:, :, 0].ravel(), (rows, cols)), shape=shape)
        Gy = sp.csr_matrix((self._g[k][:, :, 1].ravel(), (rows, cols)), shape=shape)
        return P, Gx, Gy

    def element_gradient(self, v) -> np.ndarray:
        v = self._check(v)
        return np.einsum("kij,ki->kj", self._g, v[self._tv])

    def diamond_gradient(self, v) -> np.ndarray:
        return self.element_gradient(v)[self.mesh.hf_cell]

    def interpolate_initial(self, f) -> np.ndarray:
        return np.asarray(f(self.mesh.vertices), dtype=float) * np.ones(self.n_dofs)

    def interpolate_smooth(self, f) -> np.ndarray:
        return self.interpolate_initial(f)


class Rt0MixedGd(GradientDiscretisation):
    """Mixed RT0 gradient discretisation of the pressure.

    With ``M`` the ``A^{-1}``-weighted RT0 mass matrix on internal edges and
    ``B[K, e] = int_K div phi_e``, the reconstructed gradient of ``z`` is
    ``A^{-1} sum_e alpha_e phi_e`` with ``M alpha = -B^T z``.
    """

    name = "rt0"
    pi_degree = 0
    grad_degree = 1

    def __init__(self, mesh, A=None, config: SolverConfig = SolverConfig(tol=1e-13)):
        _require_triangles(mesh)
        super().__init__(mesh)
        nc = mesh.n_cells
        At = np.array(_tensor_values(np.eye(2) if A is None else A, nc), dtype=float)
        if np.any(np.linalg.eigvalsh(0.5 * (At + At.transpose(0, 2, 1))) <= 0):
            raise ValueError("diffusion tensor must be SPD in every element")
        self.A = At
        self.Ainv = np.linalg.inv(At)
        self.config = config
        inner = ~mesh.boundary_faces
        self.edge_of_face = -np.ones(mesh.n_faces, dtype=np.int64)
        self.edge_of_face[inner] = np.arange(int(inner.sum()))
        self.n_edges = int(inner.sum())
        tv = _triangle_vertices(mesh)
        X = mesh.vertices[tv]
        hf = np.arange(mesh.n_halffaces).reshape(nc, 3)
        # local edge i = half-face i (v_i -> v_{i+1}); opposite vertex v_{i+2}
        self._opp = X[:, [2, 0, 1], :]  # (nc, 3, 2)
        self._sign = np.where(mesh.face_halffaces[mesh.hf_face[hf], 0] == hf, 1.0, -1.0)
        self._edge = self.edge_of_face[mesh.hf_face[hf]]  # (nc, 3), -1 on boundary
        self._X = X
        # local mass matrices by a degree-2 rule (integrand quadratic)
        bary, w = triangle_rule(2)
        pts = np.einsum("qi,kij->kqj", bary, X)  # (nc, nq, 2)
        area = mesh.cell_areas
        phi = (pts[:, :, None, :] - self._opp[:, None, :, :]) / (2 * area)[:, None, None, None]
        phi *= self._sign[:, None, :, None]  # (nc, nq, 3, 2)
        Mloc = np.einsum("q,kqim,kmn,kqjn->kij", w, phi, self.Ainv, phi) * area[:, None, None]
        self._Mloc = Mloc
        ok = (self._edge[:, :, None] >= 0) & (self._edge[:, None, :] >= 0)
        ri = np.broadcast_to(self._edge[:, :, None], Mloc.shape)
        ci = np.broadcast_to(self._edge[:, None, :], Mloc.shape)
        self.M = assemble(ri[ok], ci[ok], Mloc[ok], (self.n_edges, self.n_edges))
        okb = self._edge >= 0
        self.B = assemble(
            np.broadcast_to(np.arange(nc)[:, None], (nc, 3))[okb],
            self._edge[okb], self._sign[okb], (nc, self.n_edges),
        )
        self._Mdiag = self.M.diagonal()
        self._dense_op = None

    @property
    def n_dofs(self) -> int:
        return self.mesh.n_cells

    # -- mixed algebra -------------------------------------------------------
    def solve_mass(self, rhs) -> np.ndarray:
        x, info = pcg(self.M, rhs, self.config, diag=self._Mdiag)
        if not info.converged:
            raise SolverError(f"RT0 mass solve failed (residual {info.residual:.3e})")
        return x

    def edge_coefficients(self, z) -> np.ndarray:
        """``alpha = -M^{-1} B^T z`` (coefficients of ``A grad z``)."""
        return -self.solve_mass(self.B.T @ self._check(z))

    def schur_operator(self):
        """``z -> B M^{-1} B^T z`` and an approximation of its diagonal."""
        def op(z):
            return self.B @ self.solve_mass(self.B.T @ z)

        Bc = self.B.tocsc()
        diag = np.asarray(Bc.multiply(Bc) @ (1.0 / self._Mdiag)).ravel()
        return op, diag

    def solve_pressure(self, rhs, config: SolverConfig = SolverConfig(), return_info=False):
        op, diag = self.schur_operator()
        m = self.mean_functional()
        return solve_zero_mean(op, rhs, m, config, diag=diag, return_info=return_info,
                               ritz=return_info)

    def _dense_gradient_operator(self) -> np.ndarray:
        if self._dense_op is None:
            if self.n_edges > 4000:
                raise MemoryError("dense RT0 gradient operator only for small meshes")
            Minv_Bt = np.linalg.solve(self.M.toarray(), self.B.T.toarray())
            self._dense_op = -Minv_Bt  # (ne, nc)
        return self._dense_op

    def basis_values(self, hf, points) -> tuple[np.ndarray, np.ndarray]:
        """Values ``(npts, 3, 2)`` of the three local RT0 basis functions
        at points of the given diamonds, and their global edge ids."""
        k = self.mesh.hf_cell[np.asarray(hf)]
        pts = np.asarray(points, dtype=float)
        area = self.mesh.cell_areas[k]
        phi = (pts[:, None, :] - self._opp[k]) / (2 * area)[:, None, None]
        return phi * self._sign[k][:, :, None], self._edge[k]

    def reconstruct(self, hf, points):
        hf = np.asarray(hf)
        n = len(hf)
        k = self.mesh.hf_cell[hf]
        P = sp.csr_matrix((np.ones(n), (np.arange(n), k)), shape=(n, self.n_dofs))
        op = self._dense_gradient_operator()
        phi, e = self.basis_values(hf, points)
        valid = e >= 0
        # A-weighted field sum_e alpha_e phi_e, alpha = op @ z
        coef = np.where(valid[..., None], phi, 0.0)
        rows = op[np.where(valid, e, 0)]  # (n, 3, nc)
        ux = np.einsum("pi,pic->pc", coef[:, :, 0], rows)
        uy = np.einsum("pi,pic->pc", coef[:, :, 1], rows)
        Ai = self.Ainv[k]
        Gx = Ai[:, 0, 0, None] * ux + Ai[:, 0, 1, None] * uy
        Gy = Ai[:, 1, 0, None] * ux + Ai[:, 1, 1, None] * uy
        return P, sp.csr_matrix(Gx), sp.csr_matrix(Gy)

    def interpolate_initial(self, f) -> np.ndarray:
        m = self.mesh
        q = diamond_quadrature(m, 5)
        vals = np.asarray(f(q.points), dtype=float) * np.ones(len(q))
        return np.bincount(m.hf_cell[q.hf], weights=q.weights * vals,
                           minlength=m.n_cells) / m.cell_areas

    def interpolate_smooth(self, f) -> np.ndarray:
        return self.interpolate_initial(f)

    def darcy(self, p) -> DarcyField:
        """Conforming velocity ``u = -A grad_P p`` as a diamond-wise RT0 field."""
        alpha = self.solve_mass(self.B.T @ self._check(p))  # coefficients of u
        return self.darcy_from_edge_coefficients(alpha)

    def darcy_from_edge_coefficients(self, alpha) -> DarcyField:
        m = self.mesh
        alpha = np.asarray(alpha, dtype=float)
        full = np.where(self._edge >= 0, alpha[np.maximum(self._edge, 0)], 0.0)
        F = full * self._sign  # outward flux of u through local edge i
        area = m.cell_areas
        b = F.sum(axis=1) / (2 * area)
        a = -np.einsum("ki,kij->kj", F, self._opp) / (2 * area)[:, None]
        return DarcyField(m, a[m.hf_cell], b[m.hf_cell], "rt0")


def p1_build(mesh) -> P1Gd:
    return P1Gd(mesh)


def rt0_build(mesh, A=None) -> Rt0MixedGd:
    return Rt0MixedGd(mesh, A)


def rt0_darcy(gd: Rt0MixedGd, p) -> DarcyField:
    return gd.darcy(p)
