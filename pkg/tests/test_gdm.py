import numpy as np
import pytest
import scipy.sparse as sp

from ellam.fe import P1Gd
from ellam.gdm import (
    GradientDiscretisation, SpaceTimeField, SpaceTimeGD, coercivity_constant,
    conformity_defect, consistency_defect, gd_norm, interpolate_initial, interpolate_smooth,
)
from ellam.harness import vortex
from ellam.hmm import HmmGd
from ellam.mesh import build_cartesian, build_triangulated
from ellam.quadrature import diamond_quadrature


class ConstantGd(GradientDiscretisation):
    """One unknown: Pi v = v on the whole domain, grad v = 0."""

    @property
    def n_dofs(self):
        return 1

    def reconstruct(self, hf, points):
        n = len(hf)
        return sp.csr_matrix(np.ones((n, 1))), sp.csr_matrix((n, 1)), sp.csr_matrix((n, 1))


class ScaledGd(GradientDiscretisation):
    """``Pi`` and ``grad`` of a base GD multiplied by the same factor."""

    def __init__(self, base, factor):
        super().__init__(base.mesh)
        self.base, self.factor = base, factor
        self.pi_degree, self.grad_degree = base.pi_degree, base.grad_degree

    @property
    def n_dofs(self):
        return self.base.n_dofs

    def reconstruct(self, hf, points):
        return tuple(self.factor * M for M in self.base.reconstruct(hf, points))


def _cos(x):
    return np.cos(np.pi * x[:, 0]) * np.cos(np.pi * x[:, 1])


def _gcos(x):
    return np.column_stack([-np.pi * np.sin(np.pi * x[:, 0]) * np.cos(np.pi * x[:, 1]),
                            -np.pi * np.cos(np.pi * x[:, 0]) * np.sin(np.pi * x[:, 1])])


def _zero_div(x):
    return np.zeros(len(x))


class TestGdNorm:
    def test_zero(self):
        gd = HmmGd(build_cartesian(3, 3))
        assert gd_norm(gd, np.zeros(gd.n_dofs)) == 0.0

    def test_constants_give_area(self):
        gd = HmmGd(build_cartesian(3, 2, (0.0, 2.0, 0.0, 1.5)))
        assert gd_norm(gd, np.ones(gd.n_dofs)) == pytest.approx(3.0, rel=1e-12)

    @pytest.mark.parametrize("gd", [HmmGd(build_cartesian(4, 4)), P1Gd(build_triangulated(4, 4))])
    def test_matches_independent_quadrature(self, gd):
        v = np.random.default_rng(0).standard_normal(gd.n_dofs)
        q = diamond_quadrature(gd.mesh, 8)
        P, Gx, Gy = gd.reconstruct(q.hf, q.points)
        ref = np.sqrt(q.weights @ ((Gx @ v) ** 2 + (Gy @ v) ** 2) + (q.weights @ (P @ v)) ** 2)
        assert gd_norm(gd, v) == pytest.approx(ref, rel=1e-10)

    def test_positive_definite(self):
        gd = HmmGd(build_cartesian(2, 2))
        rng = np.random.default_rng(5)
        assert all(gd_norm(gd, rng.standard_normal(gd.n_dofs)) > 0 for _ in range(20))


class TestCoercivity:
    def test_one_dof_space(self):
        assert coercivity_constant(ConstantGd(build_cartesian(1, 1))) == pytest.approx(1.0, rel=1e-10)

    def test_one_dof_space_scales_with_area(self):
        gd = ConstantGd(build_cartesian(1, 1, (0.0, 2.0, 0.0, 2.0)))
        assert coercivity_constant(gd) == pytest.approx(np.sqrt(4.0) / 4.0, rel=1e-10)

    def test_p1_bounded_under_refinement(self):
        c = [coercivity_constant(P1Gd(build_triangulated(n, n))) for n in (4, 8, 16)]
        assert max(c) / min(c) < 1.2
        assert np.all(np.isfinite(c))

    def test_homogeneous(self):
        gd = HmmGd(build_cartesian(4, 4))
        assert coercivity_constant(ScaledGd(gd, 2.0)) == pytest.approx(coercivity_constant(gd), rel=1e-7)


class TestConsistency:
    def test_p1_affine_exact(self):
        gd = P1Gd(build_triangulated(3, 3))
        f = lambda x: 2 * x[:, 0] - x[:, 1] + 0.5  # noqa: E731
        g = lambda x: np.tile([2.0, -1.0], (len(x), 1))  # noqa: E731
        assert consistency_defect(gd, f, g) <= 1e-10

    def test_hmm_constant_exact(self):
        gd = HmmGd(build_cartesian(3, 3))
        assert consistency_defect(gd, lambda x: np.full(len(x), 3.0),
                                  lambda x: np.zeros((len(x), 2))) <= 1e-10

    def test_zero(self):
        gd = HmmGd(build_cartesian(2, 2))
        assert consistency_defect(gd, lambda x: np.zeros(len(x)), lambda x: np.zeros((len(x), 2))) == 0.0

    def test_hmm_decreasing(self):
        s = [consistency_defect(HmmGd(build_cartesian(n, n)), _cos, _gcos) for n in (4, 8, 16)]
        assert s[0] > s[1] > s[2]


class TestConformity:
    def test_p1_conforming(self):
        gd = P1Gd(build_triangulated(8, 8))
        assert conformity_defect(gd, vortex, _zero_div, degree=6) <= 1e-8

    def test_zero_field(self):
        gd = HmmGd(build_cartesian(2, 2))
        assert conformity_defect(gd, lambda x: np.zeros((len(x), 2)), _zero_div) == 0.0

    def test_hmm_rotation_decreasing(self):
        psi = lambda x: np.column_stack([x[:, 1], -x[:, 0]])  # noqa: E731
        w = [conformity_defect(HmmGd(build_cartesian(n, n)), psi, _zero_div) for n in (4, 8, 16)]
        assert w[0] > w[1] > w[2]

    def test_hmm_zero_trace_field_decreasing(self):
        w = [conformity_defect(HmmGd(build_cartesian(n, n)), vortex, _zero_div) for n in (4, 8, 16)]
        assert w[0] > w[1] > w[2]
        assert w[2] < 0.3 * w[0]


class TestInterpolation:
    def test_hmm_constant(self):
        gd = HmmGd(build_cartesian(3, 3))
        v = interpolate_initial(gd, lambda x: np.ones(len(x)))
        np.testing.assert_allclose(v[: gd.mesh.n_cells], 1.0, rtol=1e-14)
        np.testing.assert_array_equal(v[gd.mesh.n_cells:], 0.0)
        q, P, _, _ = gd.quadrature(2)
        np.testing.assert_allclose(P @ v, 1.0, rtol=1e-14)

    def test_p1_affine(self):
        gd = P1Gd(build_triangulated(3, 3))
        f = lambda x: 1.0 + x[:, 0] - 3 * x[:, 1]  # noqa: E731
        v = interpolate_smooth(gd, f)
        q, P, _, _ = gd.quadrature(3)
        np.testing.assert_allclose(P @ v, f(q.points), atol=1e-14)

    def test_hmm_cell_average(self):
        gd = HmmGd(build_cartesian(1, 1))
        v = interpolate_initial(gd, lambda x: x[:, 0] ** 2)
        assert v[0] == pytest.approx(1.0 / 3.0, rel=1e-14)


class TestSpaceTime:
    def test_step_ratio(self):
        st = SpaceTimeGD(HmmGd(build_cartesian(1, 1)), np.array([0.0, 0.1, 0.3, 0.4]))
        assert st.n_steps == 3
        assert st.step_ratio == pytest.approx(2.0)

    def test_rejects_non_increasing(self):
        with pytest.raises(ValueError):
            SpaceTimeGD(HmmGd(build_cartesian(1, 1)), np.array([0.0, 0.0, 1.0]))

    def test_piecewise_constant_in_time(self):
        gd = HmmGd(build_cartesian(1, 1))
        st = SpaceTimeGD(gd, np.array([0.0, 1.0, 2.0]))
        vals = [np.full(gd.n_dofs, float(k)) for k in range(3)]
        f = SpaceTimeField(st, vals)
        x = np.array([[0.5, 0.5]])
        assert f.pi(x, 0.5)[0] == 1.0
        assert f.pi(x, 1.0)[0] == 1.0
        assert f.pi(x, 1.5)[0] == 2.0
        assert f.pi_left(x, 0.5)[0] == 0.0
        assert f.pi_left(x, 1.0)[0] == 1.0
