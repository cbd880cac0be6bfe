"""Two-dimensional polytopal meshes.

A mesh is a set of star-shaped polygonal cells, each with a cell point
``x_K``.  Every (cell, face) pair is a *half-face*; the triangle spanned by
the face and ``x_K`` is the diamond ``D_{K,sigma}``.  Half-faces and diamonds
share one index, ordered cell by cell, counter-clockwise inside each cell.

Diamond local numbering: vertices ``(x_K, A, B)`` where ``A -> B`` is the face
traversed counter-clockwise, edge 0 is the face ``[A, B]``, edge 1 is
``[B, x_K]`` and edge 2 is ``[x_K, A]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "MeshError",
    "PolytopalMesh",
    "DiamondSubmesh",
    "MeshQuality",
    "build_cartesian",
    "build_triangulated",
    "load_mesh",
    "save_mesh",
    "regularity",
    "locate",
    "OUTSIDE",
]

OUTSIDE = -1


class MeshError(ValueError):
    """Raised for malformed mesh input or violated mesh invariants."""


@dataclass(frozen=True)
class DiamondSubmesh:
    """Read-only view of the diamond sub-mesh of a :class:`PolytopalMesh`."""

    triangles: np.ndarray  # (nhf, 3, 2) vertices (x_K, A, B)
    areas: np.ndarray  # (nhf,)
    cell: np.ndarray  # (nhf,) host cell
    face: np.ndarray  # (nhf,) mesh face (edge 0)
    edge_normals: np.ndarray  # (nhf, 3, 2) outward unit normals
    edge_offsets: np.ndarray  # (nhf, 3) n.x = offset on the edge line
    edge_lengths: np.ndarray  # (nhf, 3)
    neighbor: np.ndarray  # (nhf, 3) adjacent diamond across each edge, -1 on dOmega
    neighbor_edge: np.ndarray  # (nhf, 3) local edge index inside the neighbour

    def __len__(self) -> int:
        return len(self.areas)

    @property
    def centroids(self) -> np.ndarray:
        return self.triangles.mean(axis=1)


@dataclass(frozen=True)
class MeshQuality:
    rho: float
    h: float
    max_faces: int
    max_diamond_ratio: float


def _freeze(*arrays):
    for a in arrays:
        a.setflags(write=False)


def _polygon_area_centroid(pts: np.ndarray) -> tuple[float, np.ndarray]:
    x, y = pts[:, 0], pts[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    cross = x * yn - xn * y
    area = 0.5 * cross.sum()
    if area == 0.0:
        return 0.0, pts.mean(axis=0)
    cx = ((x + xn) * cross).sum() / (6.0 * area)
    cy = ((y + yn) * cross).sum() / (6.0 * area)
    return area, np.array([cx, cy])


class PolytopalMesh:
    """Polygonal mesh with cell points, faces, half-faces and diamonds.

    Parameters
    ----------
    vertices : (nv, 2) array
    cells : sequence of vertex-index loops (either orientation)
    cell_points : optional (nc, 2) array of cell points; defaults to centroids
    validate : run the full invariant checks (star-shapedness, topology,
        closure identity, dangling faces)
    """

    def __init__(self, vertices, cells, cell_points=None, validate: bool = True):
        vertices = np.array(vertices, dtype=float)
        if vertices.ndim != 2 or vertices.shape[1] != 2:
            raise MeshError("vertices must be an (n, 2) array")
        if len(cells) == 0:
            raise MeshError("mesh has no cells")
        nv = len(vertices)

        loops = []
        areas = np.empty(len(cells))
        centroids = np.empty((len(cells), 2))
        for k, loop in enumerate(cells):
            loop = [int(i) for i in loop]
            if len(loop) < 3:
                raise MeshError(f"cell {k} has fewer than 3 vertices")
            if min(loop) < 0 or max(loop) >= nv:
                raise MeshError(f"cell {k} references an unknown vertex")
            if len(set(loop)) != len(loop):
                raise MeshError(f"cell {k} repeats a vertex")
            a, c = _polygon_area_centroid(vertices[loop])
            if a == 0.0:
                raise MeshError(f"cell {k} has zero area")
            if a < 0:
                loop = loop[::-1]
                a = -a
            loops.append(loop)
            areas[k] = a
            centroids[k] = c

        nc = len(loops)
        counts = np.array([len(lp) for lp in loops])
        hf_ptr = np.concatenate([[0], np.cumsum(counts)])
        nhf = int(hf_ptr[-1])
        hf_cell = np.repeat(np.arange(nc), counts)
        hf_a = np.concatenate(loops)
        hf_b = np.concatenate([np.roll(lp, -1) for lp in loops])
        local = np.arange(nhf) - hf_ptr[hf_cell]
        hf_next = hf_ptr[hf_cell] + (local + 1) % counts[hf_cell]
        hf_prev = hf_ptr[hf_cell] + (local - 1) % counts[hf_cell]

        # faces from undirected edges
        key_lo = np.minimum(hf_a, hf_b)
        key_hi = np.maximum(hf_a, hf_b)
        keys = key_lo.astype(np.int64) * nv + key_hi
        uniq, first, inverse, mult = np.unique(
            keys, return_index=True, return_inverse=True, return_counts=True
        )
        if np.any(mult > 2):
            bad = int(np.flatnonzero(mult > 2)[0])
            lo, hi = divmod(int(uniq[bad]), nv)
            raise MeshError(
                f"topology error: face ({lo}, {hi}) is shared by {mult[bad]} cells"
            )
        # number faces in order of first appearance for determinism
        order = np.argsort(first, kind="stable")
        rank = np.empty_like(order)
        rank[order] = np.arange(len(order))
        hf_face = rank[inverse]
        nf = len(uniq)
        face_cells = -np.ones((nf, 2), dtype=np.int64)
        face_hf = -np.ones((nf, 2), dtype=np.int64)
        for j in range(nhf):
            f = hf_face[j]
            slot = 0 if face_hf[f, 0] < 0 else 1
            face_hf[f, slot] = j
            face_cells[f, slot] = hf_cell[j]
        for f in np.flatnonzero(face_hf[:, 1] >= 0):
            if hf_a[face_hf[f, 0]] == hf_a[face_hf[f, 1]]:
                raise MeshError(
                    f"topology error: cells {face_cells[f, 0]} and {face_cells[f, 1]} "
                    "overlap (inconsistent orientation across a face)"
                )
        face_verts = np.stack([hf_a[face_hf[:, 0]], hf_b[face_hf[:, 0]]], axis=1)
        hf_twin = np.where(
            face_hf[hf_face, 0] == np.arange(nhf), face_hf[hf_face, 1], face_hf[hf_face, 0]
        )

        if cell_points is None:
            xk = centroids.copy()
        else:
            xk = np.array(cell_points, dtype=float)
            if xk.shape != (nc, 2):
                raise MeshError("cell_points must have shape (ncells, 2)")

        pa = vertices[hf_a]
        pb = vertices[hf_b]
        edge = pb - pa
        flen = np.hypot(edge[:, 0], edge[:, 1])
        if np.any(flen == 0):
            raise MeshError("degenerate face of zero length")
        normal = np.stack([edge[:, 1], -edge[:, 0]], axis=1) / flen[:, None]
        xkh = xk[hf_cell]
        dist = np.einsum("ij,ij->i", normal, pa - xkh)

        self.vertices = vertices
        self.cell_ptr = hf_ptr
        self.cell_vertices = hf_a.copy()
        self.cell_points = xk
        self.cell_areas = areas
        self.cell_centroids = centroids
        self.cell_diameters = np.array(
            [_diameter(vertices[lp]) for lp in loops]
        )
        self.face_vertices = face_verts
        self.face_cells = face_cells
        self.face_halffaces = face_hf
        self.face_lengths = flen[face_hf[:, 0]]
        self.face_centers = 0.5 * (vertices[face_verts[:, 0]] + vertices[face_verts[:, 1]])
        self.boundary_faces = face_hf[:, 1] < 0
        self.hf_cell = hf_cell
        self.hf_face = hf_face
        self.hf_twin = hf_twin
        self.hf_next = hf_next
        self.hf_prev = hf_prev
        self.hf_normal = normal
        self.hf_length = flen
        self.hf_dist = dist
        self.hf_center = 0.5 * (pa + pb)
        self.hf_vertices = np.stack([hf_a, hf_b], axis=1)
        _freeze(
            self.vertices, self.cell_ptr, self.cell_vertices, self.cell_points,
            self.cell_areas, self.cell_centroids, self.cell_diameters,
            self.face_vertices, self.face_cells, self.face_halffaces,
            self.face_lengths, self.face_centers, self.boundary_faces,
            self.hf_cell, self.hf_face, self.hf_twin, self.hf_next, self.hf_prev,
            self.hf_normal, self.hf_length, self.hf_dist, self.hf_center,
            self.hf_vertices,
        )
        self._diamonds = None
        self._index = None
        if validate:
            self.validate()

    # -- sizes ---------------------------------------------------------------
    @property
    def n_cells(self) -> int:
        return len(self.cell_areas)

    @property
    def n_faces(self) -> int:
        return len(self.face_lengths)

    @property
    def n_halffaces(self) -> int:
        return len(self.hf_cell)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def area(self) -> float:
        return float(self.cell_areas.sum())

    @property
    def bounding_box(self) -> tuple[float, float, float, float]:
        lo = self.vertices.min(axis=0)
        hi = self.vertices.max(axis=0)
        return float(lo[0]), float(hi[0]), float(lo[1]), float(hi[1])

    @property
    def diameter(self) -> float:
        x0, x1, y0, y1 = self.bounding_box
        return float(np.hypot(x1 - x0, y1 - y0))

    def cell_loop(self, k: int) -> np.ndarray:
        return self.cell_vertices[self.cell_ptr[k]:self.cell_ptr[k + 1]]

    def cell_halffaces(self, k: int) -> range:
        return range(int(self.cell_ptr[k]), int(self.cell_ptr[k + 1]))

    @property
    def faces_per_cell(self) -> np.ndarray:
        return np.diff(self.cell_ptr)

    @property
    def is_triangular(self) -> bool:
        return bool(np.all(self.faces_per_cell == 3))

    # -- diamonds ------------------------------------------------------------
    @property
    def diamonds(self) -> DiamondSubmesh:
        if self._diamonds is None:
            self._diamonds = self._build_diamonds()
        return self._diamonds

    def _build_diamonds(self) -> DiamondSubmesh:
        nhf = self.n_halffaces
        xk = self.cell_points[self.hf_cell]
        pa = self.vertices[self.hf_vertices[:, 0]]
        pb = self.vertices[self.hf_vertices[:, 1]]
        tri = np.stack([xk, pa, pb], axis=1)
        # edges: 0 = A->B, 1 = B->xK, 2 = xK->A (counter-clockwise)
        starts = np.stack([pa, pb, xk], axis=1)
        ends = np.stack([pb, xk, pa], axis=1)
        vec = ends - starts
        lens = np.hypot(vec[..., 0], vec[..., 1])
        normals = np.stack([vec[..., 1], -vec[..., 0]], axis=-1) / lens[..., None]
        offsets = np.einsum("ijk,ijk->ij", normals, starts)
        nb = np.empty((nhf, 3), dtype=np.int64)
        nbe = np.empty((nhf, 3), dtype=np.int64)
        nb[:, 0] = self.hf_twin
        nbe[:, 0] = np.where(self.hf_twin >= 0, 0, -1)
        nb[:, 1] = self.hf_next
        nbe[:, 1] = 2
        nb[:, 2] = self.hf_prev
        nbe[:, 2] = 1
        areas = 0.5 * self.hf_length * self.hf_dist
        out = DiamondSubmesh(
            triangles=tri, areas=areas, cell=self.hf_cell, face=self.hf_face,
            edge_normals=normals, edge_offsets=offsets, edge_lengths=lens,
            neighbor=nb, neighbor_edge=nbe,
        )
        _freeze(tri, areas, normals, offsets, lens, nb, nbe)
        return out

    # -- validation ----------------------------------------------------------
    def validate(self) -> None:
        """Check every mesh invariant; raise :class:`MeshError` on failure."""
        bad = np.flatnonzero(self.hf_dist <= 0)
        if len(bad):
            k = int(self.hf_cell[bad[0]])
            raise MeshError(
                f"cell {k} is not star-shaped with respect to its cell point "
                f"(d_K,sigma = {self.hf_dist[bad[0]]:.3e} <= 0)"
            )
        closure = np.zeros((self.n_cells, 2))
        np.add.at(closure, self.hf_cell, self.hf_length[:, None] * self.hf_normal)
        perim = np.bincount(self.hf_cell, weights=self.hf_length)
        if np.any(np.hypot(closure[:, 0], closure[:, 1]) > 1e-12 * perim):
            raise MeshError("closed-polygon identity violated")
        dsum = np.bincount(self.hf_cell, weights=self.diamonds.areas)
        if np.any(np.abs(dsum - self.cell_areas) > 1e-12 * self.cell_areas):
            raise MeshError("diamonds do not tile their cells")
        # a boundary face must lie on the domain boundary: just outside it
        # there must be no cell
        bf = np.flatnonzero(self.boundary_faces)
        if len(bf):
            hf = self.face_halffaces[bf, 0]
            h = self.hf_length[hf]
            probe = self.hf_center[hf] + 1e-6 * h[:, None] * self.hf_normal[hf]
            inside = self.locate(probe) != OUTSIDE
            if np.any(inside):
                f = int(bf[np.flatnonzero(inside)[0]])
                raise MeshError(
                    f"dangling face {f}: boundary face with a cell on its outer side"
                )

    # -- point location ------------------------------------------------------
    def _build_index(self):
        d = self.diamonds
        x0, x1, y0, y1 = self.bounding_box
        n = max(1, int(np.sqrt(len(d))))
        wx = (x1 - x0) / n or 1.0
        wy = (y1 - y0) / n or 1.0
        pad = 1e-9 * self.diameter
        lo = d.triangles.min(axis=1) - pad
        hi = d.triangles.max(axis=1) + pad
        ix0 = np.clip(((lo[:, 0] - x0) / wx).astype(int), 0, n - 1)
        ix1 = np.clip(((hi[:, 0] - x0) / wx).astype(int), 0, n - 1)
        iy0 = np.clip(((lo[:, 1] - y0) / wy).astype(int), 0, n - 1)
        iy1 = np.clip(((hi[:, 1] - y0) / wy).astype(int), 0, n - 1)
        buckets, members = [], []
        for j in range(len(d)):
            for ix in range(ix0[j], ix1[j] + 1):
                for iy in range(iy0[j], iy1[j] + 1):
                    buckets.append(ix * n + iy)
                    members.append(j)
        buckets = np.asarray(buckets)
        members = np.asarray(members)
        order = np.lexsort((members, buckets))
        buckets, members = buckets[order], members[order]
        ptr = np.searchsorted(buckets, np.arange(n * n + 1))
        self._index = (x0, y0, wx, wy, n, ptr, members)

    def locate_diamond(self, points, tol: float | None = None) -> np.ndarray:
        """Diamond index containing each point, or ``OUTSIDE``.

        Points on shared edges go to the lowest cell id, then the lowest
        half-face index of that cell.
        """
        if self._index is None:
            self._build_index()
        x0, y0, wx, wy, n, ptr, members = self._index
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        npt = len(pts)
        if tol is None:
            tol = 1e-12 * self.diameter
        ix = np.floor((pts[:, 0] - x0) / wx).astype(int)
        iy = np.floor((pts[:, 1] - y0) / wy).astype(int)
        # points exactly on the top/right edge of the box
        ix = np.where((ix == n) & (pts[:, 0] <= x0 + n * wx + tol), n - 1, ix)
        iy = np.where((iy == n) & (pts[:, 1] <= y0 + n * wy + tol), n - 1, iy)
        ix = np.where((ix == -1) & (pts[:, 0] >= x0 - tol), 0, ix)
        iy = np.where((iy == -1) & (pts[:, 1] >= y0 - tol), 0, iy)
        valid = (ix >= 0) & (ix < n) & (iy >= 0) & (iy < n)
        result = np.full(npt, OUTSIDE, dtype=np.int64)
        if not np.any(valid):
            return result
        vidx = np.flatnonzero(valid)
        b = ix[vidx] * n + iy[vidx]
        start = ptr[b]
        cnt = ptr[b + 1] - start
        rep = np.repeat(np.arange(len(vidx)), cnt)
        offs = np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt)
        cand = members[start[rep] + offs]
        d = self.diamonds
        p = pts[vidx[rep]]
        sd = d.edge_offsets[cand] - np.einsum("ijk,ik->ij", d.edge_normals[cand], p)
        ok = np.all(sd >= -tol, axis=1)
        best = np.full(len(vidx), np.iinfo(np.int64).max, dtype=np.int64)
        np.minimum.at(best, rep[ok], cand[ok])
        found = best != np.iinfo(np.int64).max
        result[vidx[found]] = best[found]
        return result

    def locate(self, points, tol: float | None = None) -> np.ndarray:
        """Cell index containing each point, ``OUTSIDE`` (-1) if none."""
        hf = self.locate_diamond(points, tol)
        return np.where(hf >= 0, self.hf_cell[np.maximum(hf, 0)], OUTSIDE)

    # -- transforms ----------------------------------------------------------
    def transformed(self, matrix=None, shift=(0.0, 0.0)) -> "PolytopalMesh":
        """Image of the mesh under ``x -> matrix @ x + shift``."""
        m = np.eye(2) if matrix is None else np.asarray(matrix, dtype=float)
        s = np.asarray(shift, dtype=float)
        cells = [self.cell_loop(k) for k in range(self.n_cells)]
        return PolytopalMesh(
            self.vertices @ m.T + s, cells, self.cell_points @ m.T + s
        )

    def __repr__(self) -> str:
        return (
            f"PolytopalMesh(cells={self.n_cells}, faces={self.n_faces}, "
            f"vertices={self.n_vertices})"
        )


def _diameter(pts: np.ndarray) -> float:
    diff = pts[:, None, :] - pts[None, :, :]
    return float(np.sqrt((diff ** 2).sum(-1)).max())


def _check_domain(nx, ny, domain):
    if int(nx) < 1 or int(ny) < 1:
        raise MeshError("cell counts must be >= 1")
    x0, x1, y0, y1 = map(float, domain)
    if not (x1 > x0 and y1 > y0):
        raise MeshError(f"degenerate domain {domain}")
    return int(nx), int(ny), x0, x1, y0, y1


def build_cartesian(nx: int, ny: int, domain=(0.0, 1.0, 0.0, 1.0)) -> PolytopalMesh:
    """Uniform ``nx`` by ``ny`` rectangular mesh of ``[x0,x1] x [y0,y1]``.

    Cells are numbered row by row from the lower-left corner.
    """
    nx, ny, x0, x1, y0, y1 = _check_domain(nx, ny, domain)
    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    X, Y = np.meshgrid(xs, ys, indexing="xy")
    verts = np.stack([X.ravel(), Y.ravel()], axis=1)

    def vid(i, j):
        return j * (nx + 1) + i

    cells = [
        [vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)]
        for j in range(ny)
        for i in range(nx)
    ]
    return PolytopalMesh(verts, cells)


def build_triangulated(nx: int, ny: int, domain=(0.0, 1.0, 0.0, 1.0)) -> PolytopalMesh:
    """Cartesian grid with every rectangle cut along its rising diagonal."""
    nx, ny, x0, x1, y0, y1 = _check_domain(nx, ny, domain)
    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    X, Y = np.meshgrid(xs, ys, indexing="xy")
    verts = np.stack([X.ravel(), Y.ravel()], axis=1)

    def vid(i, j):
        return j * (nx + 1) + i

    cells = []
    for j in range(ny):
        for i in range(nx):
            a, b, c, d = vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)
            cells.append([a, b, c])
            cells.append([a, c, d])
    return PolytopalMesh(verts, cells)


def regularity(mesh: PolytopalMesh) -> MeshQuality:
    """Mesh regularity parameter and mesh size.

    ``rho = max_K Card(E_K) + max_{K,sigma} diam(D)/inrad(D)`` with the exact
    triangle inradius ``2|D|/perimeter(D)``.
    """
    d = mesh.diamonds
    perim = d.edge_lengths.sum(axis=1)
    inrad = 2.0 * d.areas / perim
    diam = d.edge_lengths.max(axis=1)
    ratio = float((diam / inrad).max())
    nmax = int(mesh.faces_per_cell.max())
    return MeshQuality(
        rho=nmax + ratio, h=float(mesh.cell_diameters.max()),
        max_faces=nmax, max_diamond_ratio=ratio,
    )


def locate(mesh: PolytopalMesh, point) -> int | np.ndarray:
    """Cell containing ``point`` (or each row of an array of points).

    Returns ``OUTSIDE`` for points outside the domain; points on a face go to
    the lowest incident cell id.
    """
    pts = np.asarray(point, dtype=float)
    out = mesh.locate(pts.reshape(-1, 2))
    return int(out[0]) if pts.ndim == 1 else out


# -- file format -------------------------------------------------------------

def load_mesh(path) -> PolytopalMesh:
    """Read a ``polymesh 2d`` text file.

    Lines: ``v x y`` for vertices (numbered from 0 in order of appearance),
    ``c v0 v1 ... [@ xK yK]`` for cells.  ``#`` starts a comment.
    """
    text = Path(path).read_text()
    lines = [ln.split("#", 1)[0].strip() for ln in text.splitlines()]
    lines = [ln for ln in lines if ln]
    if not lines or lines[0].split() != ["polymesh", "2d"]:
        raise MeshError(f"{path}: missing 'polymesh 2d' header")
    verts, cells, points = [], [], []
    for lineno, ln in enumerate(lines[1:], start=2):
        tok = ln.split()
        try:
            if tok[0] == "v":
                if len(tok) != 3:
                    raise ValueError("expected 'v x y'")
                verts.append((float(tok[1]), float(tok[2])))
            elif tok[0] == "c":
                if "@" in tok:
                    at = tok.index("@")
                    ids = [int(t) for t in tok[1:at]]
                    xy = tok[at + 1:]
                    if len(xy) != 2:
                        raise ValueError("expected '@ xK yK'")
                    points.append((float(xy[0]), float(xy[1])))
                else:
                    ids = [int(t) for t in tok[1:]]
                    points.append(None)
                cells.append(ids)
            else:
                raise ValueError(f"unknown record {tok[0]!r}")
        except ValueError as exc:
            raise MeshError(f"{path}: parse error on line {lineno}: {exc}") from exc
    if any(p is not None for p in points):
        probe = PolytopalMesh(verts, cells, validate=False)
        cp = np.array(
            [p if p is not None else probe.cell_centroids[k] for k, p in enumerate(points)]
        )
        return PolytopalMesh(verts, cells, cp)
    return PolytopalMesh(verts, cells)


def save_mesh(mesh: PolytopalMesh, path, write_points: bool = False) -> None:
    out = ["polymesh 2d"]
    out += [f"v {x:.17g} {y:.17g}" for x, y in mesh.vertices]
    for k in range(mesh.n_cells):
        ids = " ".join(str(int(i)) for i in mesh.cell_loop(k))
        if write_points:
            x, y = mesh.cell_points[k]
            out.append(f"c {ids} @ {x:.17g} {y:.17g}")
        else:
            out.append(f"c {ids}")
    Path(path).write_text("\n".join(out) + "\n")
