import numpy as np
import pytest

from ellam.darcy import DarcyField
from ellam.flow import (
    CLAMPED, CRITICAL, OK, FlowConfig, FlowError, Tracer, jacobian, jf_bound, trace,
    transport_apply,
)
from ellam.flow_checks import (
    adaptive_curves, discrete_seminorm, duality_check, duality_matrices, jacobian_checks,
    round_trip, semigroup_defect, swept_volume, translation_constant, verify_lemmas,
    weighted_mass_check,
)
from ellam.harness import vortex
from ellam.mesh import build_cartesian, build_triangulated


def _const(u):
    return lambda x: np.tile(np.asarray(u, dtype=float), (len(x), 1))


def _rotation(x):
    return np.column_stack([-(x[:, 1] - 0.5), x[:, 0] - 0.5])


def _layered(mesh):
    return np.where(mesh.cell_centroids[:, 1] < 0.5, 0.2, 0.25)


class TestTrace:
    def test_constant_field_straight_line(self):
        m = build_cartesian(4, 4)
        ft = trace(DarcyField.interpolate(m, _const((1.0, 0.0))), 2.0, [0.1, 0.5], 0.0, 1.0)
        np.testing.assert_allclose(ft.endpoint, [0.6, 0.5], atol=1e-14)
        assert ft.status == "ok"
        assert np.all(np.diff(ft.event_times) >= 0)

    def test_backward_time(self):
        m = build_cartesian(4, 4)
        ft = trace(DarcyField.interpolate(m, _const((0.0, 1.0))), 1.0, [0.3, 0.6], 1.0, 0.5)
        np.testing.assert_allclose(ft.endpoint, [0.3, 0.1], atol=1e-14)

    def test_rotation_full_revolution(self):
        n = 32
        m = build_cartesian(n, n)
        x = np.array([0.8, 0.5])
        ft = trace(DarcyField.interpolate(m, _rotation), 1.0, x, 0.0, 2 * np.pi)
        assert np.linalg.norm(ft.endpoint - x) <= 1.0 / n

    def test_confined_to_domain(self):
        m = build_triangulated(6, 6)
        tr = Tracer(DarcyField.interpolate(m, vortex), _layered(m))
        pts = np.random.default_rng(0).random((2000, 2))
        res = tr.trace(pts, 0.3)
        assert np.all((res.end >= -1e-14) & (res.end <= 1 + 1e-14))
        assert np.all(res.end_hf >= 0)

    def test_piecewise_porosity_rescales_speed(self):
        m = build_cartesian(2, 2)
        phi = np.array([1.0, 2.0, 1.0, 2.0])
        tr = Tracer(DarcyField.interpolate(m, _const((1.0, 0.0))), phi)
        # from x=0.25 to the interface at speed 1, then speed 1/2
        res = tr.trace(np.array([[0.25, 0.25]]), 0.5)
        np.testing.assert_allclose(res.end[0], [0.625, 0.25], atol=1e-14)

    def test_rejects_nonpositive_porosity(self):
        m = build_cartesian(2, 2)
        with pytest.raises(ValueError):
            Tracer(DarcyField.zero(m), np.array([1.0, 0.0, 1.0, 1.0]))

    def test_mixed_signs_rejected(self):
        m = build_cartesian(2, 2)
        tr = Tracer(DarcyField.interpolate(m, vortex), 1.0)
        with pytest.raises(ValueError):
            tr.trace(np.array([[0.3, 0.3], [0.6, 0.6]]), np.array([0.1, -0.1]))

    def test_per_point_spans(self):
        m = build_cartesian(4, 4)
        tr = Tracer(DarcyField.interpolate(m, _const((1.0, 0.0))), 1.0)
        res = tr.trace(np.array([[0.1, 0.2], [0.1, 0.7]]), np.array([0.2, 0.5]))
        np.testing.assert_allclose(res.end, [[0.3, 0.2], [0.6, 0.7]], atol=1e-14)

    def test_event_limit(self):
        m = build_cartesian(8, 8)
        tr = Tracer(DarcyField.interpolate(m, _const((1.0, 0.0))), 1.0, FlowConfig(max_events=2))
        with pytest.raises(FlowError):
            tr.trace(np.array([[0.01, 0.5]]), 0.9)

    def test_bad_config(self):
        with pytest.raises(ValueError):
            FlowConfig(eps=0.0)

    def test_status_codes_distinct(self):
        assert len({OK, CRITICAL, CLAMPED}) == 3


class TestJacobian:
    def test_divergence_free(self):
        m = build_cartesian(8, 8)
        tr = Tracer(DarcyField.interpolate(m, vortex), 1.0)
        res = tr.trace(np.random.default_rng(1).random((200, 2)), 0.2)
        np.testing.assert_allclose(jacobian(res), 1.0, atol=1e-12)

    def test_linear_field(self):
        m = build_cartesian(4, 4)
        u = DarcyField.interpolate(m, lambda x: x.copy())
        t = 0.5
        ft = trace(u, 1.0, [0.1, 0.15], 0.0, t)
        np.testing.assert_allclose(ft.endpoint, np.array([0.1, 0.15]) * np.exp(t), rtol=1e-13)
        assert ft.jacobian == pytest.approx(np.exp(2 * t), rel=1e-13)

    def test_identity_and_bound(self):
        from ellam.harness import coupled_wells_model
        from ellam.scheme import SchemeConfig, Simulation

        m = build_cartesian(8, 8)
        sim = Simulation(m, coupled_wells_model(), SchemeConfig(n_steps=1))
        qp, qm = sim.sources(0)
        _, u, _, _ = sim.pressure_step(sim.initial_concentration(), qp, qm)
        tr = Tracer(u, sim.phi)
        pts = np.random.default_rng(2).random((2000, 2))
        jc = jacobian_checks(tr, pts, 0.01)
        assert jc["identity_residual"] <= 1e-8
        assert jc["bound_violations"] == 0
        assert jc["jacobian_max"] <= jf_bound(tr, 0.01)
        jb = jacobian_checks(tr, pts, -0.01)
        assert jb["identity_residual"] <= 1e-8
        assert jb["bound_violations"] == 0


class TestTransportApply:
    def setup_method(self):
        m = build_cartesian(4, 4)
        self.times = np.array([0.0, 0.1, 0.2])
        self.pts = np.random.default_rng(3).random((50, 2))
        self.tr = [Tracer(DarcyField.interpolate(m, vortex), 1.0)] * 2
        self.still = [Tracer(DarcyField.zero(m), 1.0)] * 2

    def test_constant(self):
        one = lambda x, t: np.ones(len(x))  # noqa: E731
        for kind in ("T", "That"):
            np.testing.assert_array_equal(transport_apply(kind, self.tr, self.times, one, self.pts, 0.15), 1.0)

    def test_zero_velocity(self):
        psi = lambda x, t: x[:, 0] + t  # noqa: E731
        for kind in ("T", "That"):
            np.testing.assert_allclose(
                transport_apply(kind, self.still, self.times, psi, self.pts, 0.15),
                psi(self.pts, 0.15), atol=1e-15)

    def test_that_at_right_end_is_identity(self):
        psi = lambda x, t: x[:, 1]  # noqa: E731
        out = transport_apply("That", self.tr, self.times, psi, self.pts, 0.2)
        np.testing.assert_array_equal(out, self.pts[:, 1])

    def test_bad_time(self):
        with pytest.raises(ValueError):
            transport_apply("T", self.tr, self.times, lambda x, t: x[:, 0], self.pts, 0.0)


class TestProperties:
    def test_round_trip_rotation(self):
        m = build_cartesian(8, 8)
        tr = Tracer(DarcyField.interpolate(m, _rotation), 1.0)
        rng = np.random.default_rng(4)
        r = 0.4 * np.sqrt(rng.random(10_000))
        a = 2 * np.pi * rng.random(10_000)
        pts = 0.5 + np.column_stack([r * np.cos(a), r * np.sin(a)])
        st = round_trip(tr, pts, 0.5)
        assert st.fraction_within >= 0.999

    def test_round_trip_constant_field(self):
        m = build_cartesian(8, 8)
        tr = Tracer(DarcyField.interpolate(m, _const((0.3, 0.2))), 1.0)
        pts = 0.1 + 0.4 * np.random.default_rng(5).random((10_000, 2))
        st = round_trip(tr, pts, 0.5)
        assert st.fraction_within >= 0.999
        assert st.max_error <= 1e-8 * np.sqrt(2)

    def test_semigroup(self):
        m = build_triangulated(6, 6)
        tr = Tracer(DarcyField.interpolate(m, vortex), _layered(m))
        err, flagged = semigroup_defect(tr, np.random.default_rng(6).random((2000, 2)), 0.05, 0.07)
        assert err <= 1e-8 * np.sqrt(2)
        assert flagged <= 2


class TestLemmaChecks:
    def test_swept_volume_rectangle(self):
        m = build_cartesian(4, 4)
        tr = Tracer(DarcyField.interpolate(m, _const((1.0, 0.0))), 1.0)
        face = int(np.flatnonzero(
            (np.abs(m.face_centers[:, 0] - 0.5) < 1e-12) & (np.abs(m.face_centers[:, 1] - 0.375) < 1e-12))[0])
        t = 0.1
        sv = swept_volume(tr, face, t, 40_000, np.random.default_rng(7))
        exact = 0.25 * 1.0 * t
        assert abs(sv.estimate - exact) <= 3 * sv.std + 1e-12
        assert sv.bound == pytest.approx(exact, rel=1e-12)
        assert sv.ok

    def test_translation_constant_stable(self):
        R = []
        for n in (8, 16, 32):
            m = build_cartesian(n, n)
            tr = Tracer(DarcyField.interpolate(m, vortex), 1.0)
            f = np.random.default_rng(8).random(m.n_cells)
            R.append(translation_constant(tr, f, 0.25 / (n * np.pi))["R"])
        assert np.all(np.isfinite(R))
        assert max(R) / min(R) <= 1.5

    def test_discrete_seminorm(self):
        m = build_cartesian(2, 1)
        # one internal face of length 1, d_K + d_L = 0.5
        assert discrete_seminorm(m, np.array([0.0, 1.0])) == pytest.approx(np.sqrt(2.0))
        assert discrete_seminorm(m, np.array([3.0, 3.0])) == 0.0

    def test_weighted_mass(self):
        m = build_cartesian(8, 8)
        tr = Tracer(DarcyField.interpolate(m, vortex), _layered(m))
        r = weighted_mass_check(tr, lambda p: 1.0 + p[:, 0] ** 2, -0.05)
        assert r["ok"]

    def test_verify_lemmas(self):
        n = 8
        m = build_cartesian(n, n)
        tr = Tracer(DarcyField.interpolate(m, vortex), _layered(m))
        r = verify_lemmas(tr, 0.2 * 0.2 / (n * np.pi), n_faces=5, n_samples=5000, seed=1)
        assert r["swept_ok"]
        assert r["weighted_mass"]["ok"]
        assert r["jacobian"]["bound_violations"] == 0
        assert np.isfinite(r["translation"]["R"])

    def test_verify_lemmas_needs_samples(self):
        m = build_cartesian(2, 2)
        with pytest.raises(ValueError):
            verify_lemmas(Tracer(DarcyField.zero(m), 1.0), 0.1, n_samples=10)


class TestDuality:
    def test_adaptive_curves_line(self):
        fn = lambda ids, t: np.column_stack([t, (1 + ids) * t])  # noqa: E731
        curves, jumps = adaptive_curves(fn, 2, 1e-9)
        assert jumps == 0
        assert len(curves) == 2
        np.testing.assert_allclose(curves[1][-1], [1.0, 2.0])

    def test_small_mesh(self):
        from ellam.harness import coupled_wells_model
        from ellam.scheme import SchemeConfig, Simulation

        m = build_cartesian(2, 2)
        sim = Simulation(m, coupled_wells_model(radius=0.25), SchemeConfig(n_steps=1))
        qp, qm = sim.sources(0)
        _, u, _, _ = sim.pressure_step(sim.initial_concentration(), qp, qm)
        tr = Tracer(u, sim.phi)
        dt = 0.02
        res = duality_matrices(tr, dt)
        assert res.jumps == 0
        d = duality_check([res], [dt], rng=np.random.default_rng(9))
        assert d["max_relative"] <= 1e-6

    def test_interval_budget(self):
        fn = lambda ids, t: np.column_stack([t, np.sin(1.0 / (t + 1e-9))])  # noqa: E731
        _, jumps = adaptive_curves(fn, 1, 1e-9, max_intervals=1000)
        assert jumps > 0
