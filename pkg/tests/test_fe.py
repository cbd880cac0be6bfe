import numpy as np
import pytest

from ellam.darcy import validate
from ellam.fe import P1Gd, Rt0MixedGd, p1_build, rt0_build, rt0_darcy
from ellam.gdm import gd_norm
from ellam.linalg import SolverConfig
from ellam.mesh import PolytopalMesh, build_cartesian, build_triangulated
from ellam.quadrature import diamond_quadrature, triangle_rule


class TestP1:
    def test_affine_gradient(self):
        gd = p1_build(build_triangulated(3, 2))
        xi = np.array([1.5, -0.5])
        v = gd.interpolate_smooth(lambda x: x @ xi + 2.0)
        np.testing.assert_allclose(gd.element_gradient(v), np.tile(xi, (gd.mesh.n_cells, 1)), atol=1e-13)

    def test_reference_triangle(self):
        mesh = PolytopalMesh(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]), [[0, 1, 2]])
        gd = P1Gd(mesh)
        np.testing.assert_allclose(gd.element_gradient(np.array([0.0, 0.0, 1.0]))[0], [0.0, 1.0], atol=1e-15)

    def test_norm_of_constants(self):
        gd = P1Gd(build_triangulated(2, 2, (0.0, 2.0, 0.0, 1.0)))
        assert gd_norm(gd, np.ones(gd.n_dofs)) == pytest.approx(2.0, rel=1e-13)

    def test_rejects_quadrilaterals(self):
        with pytest.raises(ValueError):
            P1Gd(build_cartesian(2, 2))


def _area(t):
    d1, d2 = t[1] - t[0], t[2] - t[0]
    return 0.5 * abs(d1[0] * d2[1] - d1[1] * d2[0])


def _unit_flux_basis(tri, edge_start, edge_end):
    """RT0 function of a triangle with unit outward flux through one edge."""
    opp = [v for v in tri if not (np.allclose(v, edge_start) or np.allclose(v, edge_end))][0]
    return lambda x: (x - opp) / (2 * _area(tri))


class TestRt0:
    def test_constant_has_zero_gradient(self):
        gd = rt0_build(build_triangulated(3, 3))
        q = diamond_quadrature(gd.mesh, 2)
        _, Gx, Gy = gd.reconstruct(q.hf, q.points)
        z = np.full(gd.n_dofs, 2.5)
        assert max(np.abs(Gx @ z).max(), np.abs(Gy @ z).max()) <= 1e-12

    def test_two_cell_saddle_oracle(self):
        mesh = build_triangulated(1, 1)
        gd = Rt0MixedGd(mesh)
        z = gd.interpolate_initial(lambda x: 3.0 * x[:, 0])
        # independent construction: one internal edge (the diagonal)
        V = mesh.vertices
        a, c = V[0], V[3]
        t0 = V[mesh.cell_loop(0)]
        t1 = V[mesh.cell_loop(1)]
        phi0 = _unit_flux_basis(t0, a, c)   # outward from cell 0
        phi1 = _unit_flux_basis(t1, a, c)   # outward from cell 1
        bary, w = triangle_rule(6)
        M = 0.0
        for t, f in ((t0, phi0), (t1, phi1)):
            pts = bary @ t
            M += _area(t) * w @ (f(pts) ** 2).sum(axis=1)
        # basis w_e = phi0 on cell 0, -phi1 on cell 1 ; int_K div w_e = +1, -1
        B = np.array([1.0, -1.0])
        # saddle system [[M, B^T], [B, 0]]: with one edge, M alpha = -B.z
        alpha = -(B @ z) / M
        pts = np.array([[0.7, 0.2], [0.2, 0.7]])
        hf = mesh.locate_diamond(pts)
        _, Gx, Gy = gd.reconstruct(hf, pts)
        g = np.column_stack([Gx @ z, Gy @ z])
        ref = np.array([alpha * phi0(pts[0]), -alpha * phi1(pts[1])])
        np.testing.assert_allclose(g, ref, atol=1e-12)
        # the gradient of a linear-in-x profile points along x on average
        assert ref[0][0] > 0

    def test_defining_relation(self):
        gd = Rt0MixedGd(build_triangulated(3, 3), A=np.diag([2.0, 0.5]))
        rng = np.random.default_rng(0)
        z = rng.standard_normal(gd.n_dofs)
        q = diamond_quadrature(gd.mesh, 2)
        _, Gx, Gy = gd.reconstruct(q.hf, q.points)
        grad = np.column_stack([Gx @ z, Gy @ z])
        phi, e = gd.basis_values(q.hf, q.points)
        for edge in range(gd.n_edges):
            sel = e == edge
            wv = np.einsum("pk,pki->pi", sel.astype(float), phi)
            lhs = q.weights @ np.einsum("pi,pi->p", wv, grad)
            div = (gd.B[:, edge].toarray().ravel() @ z)
            assert abs(lhs + div) <= 1e-11

    def test_darcy_zero(self):
        gd = Rt0MixedGd(build_triangulated(2, 2))
        u = rt0_darcy(gd, np.zeros(gd.n_dofs))
        assert np.abs(u.a).max() == 0.0 and np.abs(u.b).max() == 0.0

    def test_darcy_conforming_and_bounded(self):
        mesh = build_triangulated(6, 6)
        gd = Rt0MixedGd(mesh)
        c = mesh.cell_centroids
        s = np.where(np.hypot(c[:, 0] - 0.2, c[:, 1] - 0.2) < 0.2, 1.0, 0.0)
        s -= np.where(np.hypot(c[:, 0] - 0.8, c[:, 1] - 0.8) < 0.2, 1.0, 0.0)
        s -= (s @ mesh.cell_areas) / mesh.area
        tol = 1e-11
        p = gd.solve_pressure(s * mesh.cell_areas, SolverConfig(tol=tol))
        u = gd.darcy(p)
        dv = validate(u, div_bound=np.abs(s).max())
        assert dv.normal_jump <= 1e-12
        assert dv.boundary_trace <= 1e-12
        assert dv.div_max <= np.abs(s).max() + 1e-9
        np.testing.assert_allclose(u.cell_div, s, atol=1e-8)
