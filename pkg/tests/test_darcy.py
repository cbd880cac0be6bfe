import numpy as np
import pytest

from ellam.darcy import (
    DarcyField, ReconstructionError, load_field, reconstruct, save_field, validate,
)
from ellam.hmm import FluxSet, HmmGd
from ellam.harness import coupled_wells_model
from ellam.mesh import PolytopalMesh, build_cartesian
from ellam.scheme import SchemeConfig, Simulation


def _constant_fluxes(mesh, u0):
    return mesh.hf_length * (mesh.hf_normal @ np.asarray(u0, dtype=float))


def _pentagon_mesh():
    v = np.array([[0, 0], [1, 0], [2, 0], [2, 1], [1, 1.4], [0, 1], [1, 0.6]], dtype=float)
    return PolytopalMesh(v, [[0, 1, 6, 4, 5], [1, 2, 3, 4, 6]])


class TestReconstruct:
    def test_zero(self):
        m = build_cartesian(3, 3)
        u = reconstruct(m, np.zeros(m.n_halffaces))
        assert np.abs(u.a).max() == 0.0 and np.abs(u.b).max() == 0.0

    def test_constant_field_single_cell(self):
        m = build_cartesian(1, 1)
        F = _constant_fluxes(m, (1.0, 0.0))
        np.testing.assert_allclose(np.abs(F), [0, 1, 0, 1], atol=1e-15)
        u = reconstruct(m, F, no_flow=False)
        pts = np.random.default_rng(0).random((50, 2))
        np.testing.assert_allclose(u.velocity(pts), np.tile([1.0, 0.0], (50, 1)), atol=1e-14)
        np.testing.assert_allclose(u.divergence, 0.0, atol=1e-14)

    def test_minimal_norm_matches_least_squares(self):
        m = _pentagon_mesh()
        rng = np.random.default_rng(1)
        F = rng.standard_normal(m.n_halffaces)
        fh = m.face_halffaces
        inner = fh[:, 1] >= 0
        F[fh[inner, 1]] = -F[fh[inner, 0]]
        u = reconstruct(m, F, no_flow=False)
        d = m.diamonds
        for k in range(m.n_cells):
            hf = np.arange(m.cell_ptr[k], m.cell_ptr[k + 1])
            n = len(hf)
            delta = F[hf].sum() / m.cell_areas[k]
            # unknown g_j: flux out of diamond j through its edge x_K -> next face
            A = np.eye(n) - np.roll(np.eye(n), 1, axis=0)  # (A g)_j = g_j - g_{j-1}
            rhs = delta * d.areas[hf] - F[hf]
            g = np.linalg.lstsq(A, rhs, rcond=None)[0]
            np.testing.assert_allclose(u.edge_flux[hf, 1], g, atol=1e-12)

    def test_solved_pressure_divergence_and_energy(self):
        gd = HmmGd(build_cartesian(8, 8))
        sim = Simulation(gd.mesh, coupled_wells_model(), SchemeConfig(n_steps=1))
        qp, qm = sim.sources(0)
        p, u, U, info = sim.pressure_step(sim.initial_concentration(), qp, qm)
        m = gd.mesh
        fl = info["fluxes"].values
        div_cell = np.bincount(m.hf_cell, weights=fl, minlength=m.n_cells) / m.cell_areas
        assert np.abs(u.divergence - div_cell[m.hf_cell]).max() <= 1e-12 * max(1.0, np.abs(div_cell).max())
        ratio = u.l2_norm() / info["grad_p_l2"]
        assert np.isfinite(ratio) and 0 < ratio < 10

    def test_linearity(self):
        m = _pentagon_mesh()
        rng = np.random.default_rng(2)
        fh = m.face_halffaces
        inner = fh[:, 1] >= 0

        def cons():
            F = np.zeros(m.n_halffaces)
            F[fh[inner, 0]] = rng.standard_normal(int(inner.sum()))
            F[fh[inner, 1]] = -F[fh[inner, 0]]
            return F

        F1, F2 = cons(), cons()
        u = reconstruct(m, 2.0 * F1 - 3.0 * F2)
        v = 2.0 * reconstruct(m, F1) + (-3.0) * reconstruct(m, F2)
        np.testing.assert_allclose(u.a, v.a, atol=1e-12)
        np.testing.assert_allclose(u.b, v.b, atol=1e-12)

    def test_rejects_non_conservative(self):
        m = build_cartesian(2, 1)
        F = np.zeros(m.n_halffaces)
        F[m.face_halffaces[~m.boundary_faces][0, 0]] = 1.0
        with pytest.raises(ReconstructionError):
            reconstruct(m, F)

    def test_rejects_boundary_flux_with_no_flow(self):
        m = build_cartesian(1, 1)
        with pytest.raises(ReconstructionError):
            reconstruct(m, _constant_fluxes(m, (1.0, 0.0)))


class TestValidate:
    def test_zero_field(self):
        d = validate(DarcyField.zero(build_cartesian(2, 2)), div_bound=0.0)
        assert (d.normal_jump, d.boundary_trace, d.div_max, d.l2_norm) == (0.0, 0.0, 0.0, 0.0)
        assert d.ok

    def test_reconstructed_coupled_wells(self):
        m = build_cartesian(8, 8)
        sim = Simulation(m, coupled_wells_model(), SchemeConfig(n_steps=1))
        qp, qm = sim.sources(0)
        _, u, _, _ = sim.pressure_step(sim.initial_concentration(), qp, qm)
        d = validate(u, div_bound=sim.M_plus + sim.M_minus)
        assert d.normal_jump <= 1e-11
        assert d.boundary_trace <= 1e-11
        assert d.div_max <= sim.M_plus + sim.M_minus + 1e-9
        assert d.ok

    def test_detects_jump(self):
        m = build_cartesian(2, 1)
        a = np.zeros((m.n_halffaces, 2))
        a[m.hf_cell == 0] = [1.0, 0.0]
        d = validate(DarcyField(m, a, np.zeros(m.n_halffaces)))
        assert d.normal_jump > 0.1
        assert not d.ok


class TestFieldFile:
    def test_round_trip(self, tmp_path):
        m = build_cartesian(3, 2)
        u = DarcyField.interpolate(m, lambda x: np.column_stack([x[:, 1], -x[:, 0]]))
        save_field(u, tmp_path / "u.txt")
        v = load_field(m, tmp_path / "u.txt")
        np.testing.assert_array_equal(u.a, v.a)
        np.testing.assert_array_equal(u.b, v.b)

    def test_wrong_mesh(self, tmp_path):
        save_field(DarcyField.zero(build_cartesian(2, 2)), tmp_path / "u.txt")
        with pytest.raises(ValueError):
            load_field(build_cartesian(3, 3), tmp_path / "u.txt")

    def test_interpolated_constant_is_exact(self):
        m = _pentagon_mesh()
        u = DarcyField.interpolate(m, lambda x: np.tile([0.3, -0.2], (len(x), 1)))
        np.testing.assert_allclose(u.velocity(np.array([[0.5, 0.5], [1.5, 0.5]])),
                                   [[0.3, -0.2], [0.3, -0.2]], atol=1e-14)
