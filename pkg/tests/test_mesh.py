import numpy as np
import pytest

from ellam.mesh import (
    OUTSIDE, MeshError, build_cartesian, build_triangulated, load_mesh, locate,
    regularity, save_mesh,
)


class TestBuildCartesian:
    def test_single_cell(self):
        m = build_cartesian(1, 1)
        assert m.n_cells == 1
        assert m.n_faces == 4
        assert m.boundary_faces.all()

    def test_two_by_two_topology(self):
        m = build_cartesian(2, 2)
        assert m.n_cells == 4
        assert m.n_faces == 12
        assert int((~m.boundary_faces).sum()) == 4

    def test_areas_sum_to_domain(self):
        m = build_cartesian(8, 8)
        assert abs(m.cell_areas.sum() - 1.0) <= 1e-12

    def test_rejects_zero_cells(self):
        with pytest.raises(MeshError):
            build_cartesian(0, 3)

    def test_diamonds_tile_cells(self):
        m = build_triangulated(3, 2)
        d = m.diamonds
        tot = np.bincount(d.cell, weights=d.areas, minlength=m.n_cells)
        np.testing.assert_allclose(tot, m.cell_areas, rtol=1e-14)

    def test_closed_polygon_identity(self):
        m = build_cartesian(3, 4, (0.0, 2.0, -1.0, 1.0))
        s = np.zeros((m.n_cells, 2))
        np.add.at(s, m.hf_cell, m.hf_length[:, None] * m.hf_normal)
        assert np.abs(s).max() <= 1e-14


class TestMeshFile:
    def test_round_trip(self, tmp_path):
        m = build_cartesian(2, 2)
        save_mesh(m, tmp_path / "m.txt")
        m2 = load_mesh(tmp_path / "m.txt")
        assert m2.n_cells == 4
        np.testing.assert_array_equal(m2.vertices, m.vertices)

    def test_face_with_three_cells(self, tmp_path):
        # the face (0,1) appears in three cells
        text = "\n".join([
            "polymesh 2d",
            "v 0 0", "v 1 0", "v 0.5 1", "v 0.5 -1", "v 0.5 0.5",
            "c 0 1 2", "c 1 0 3", "c 0 1 4",
        ])
        (tmp_path / "bad.txt").write_text(text + "\n")
        with pytest.raises(MeshError):
            load_mesh(tmp_path / "bad.txt")

    def test_cell_point_outside(self, tmp_path):
        text = "polymesh 2d\nv 0 0\nv 1 0\nv 1 1\nv 0 1\nc 0 1 2 3 @ 2.0 0.5\n"
        (tmp_path / "bad.txt").write_text(text)
        with pytest.raises(MeshError, match="star-shaped"):
            load_mesh(tmp_path / "bad.txt")

    def test_missing_header(self, tmp_path):
        (tmp_path / "bad.txt").write_text("v 0 0\n")
        with pytest.raises(MeshError):
            load_mesh(tmp_path / "bad.txt")


def _triangle_ratio(a, b, c):
    s = [np.linalg.norm(b - a), np.linalg.norm(c - b), np.linalg.norm(a - c)]
    area = 0.5 * abs((b - a)[0] * (c - a)[1] - (b - a)[1] * (c - a)[0])
    return max(s) / (2 * area / sum(s))


class TestRegularity:
    def test_unit_square(self):
        q = regularity(build_cartesian(1, 1))
        ratio = _triangle_ratio(np.array([0.0, 0.0]), np.array([1.0, 0.0]), np.array([0.5, 0.5]))
        assert q.max_faces == 4
        assert q.rho == pytest.approx(4 + ratio, rel=1e-14)
        assert ratio == pytest.approx(2 * (1 + np.sqrt(2)), rel=1e-14)

    def test_refinement_invariant(self):
        r = [regularity(build_cartesian(n, n)).rho for n in (2, 4, 8)]
        assert r[0] == pytest.approx(r[1], rel=1e-12)
        assert r[1] == pytest.approx(r[2], rel=1e-12)

    def test_squashed_domain(self):
        r1 = regularity(build_cartesian(4, 4)).rho
        r2 = regularity(build_cartesian(4, 4, (0.0, 10.0, 0.0, 1.0))).rho
        assert r2 > r1


class TestLocate:
    def test_centroid(self):
        m = build_cartesian(2, 2)
        assert locate(m, m.cell_centroids[0]) == 0

    def test_tie_break_lowest_cell(self):
        m = build_cartesian(3, 1)
        assert locate(m, [2.0 / 3.0, 0.5]) == 1

    def test_outside(self):
        m = build_cartesian(2, 2)
        assert locate(m, [2.0, 2.0]) == OUTSIDE

    def test_vectorised(self):
        m = build_triangulated(4, 4)
        rng = np.random.default_rng(0)
        pts = rng.random((200, 2))
        cells = locate(m, pts)
        assert np.all(cells >= 0)
        hf = m.locate_diamond(pts)
        assert np.all(m.hf_cell[hf] == cells)
