"""Numerical checks of the flow estimates.

Everything here is a diagnostic: each function returns measured quantities
(left/right-hand sides, constants, statistical tolerances) and never raises
on a violated inequality.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np
import shapely
from shapely.geometry import Polygon

from .flow import OK, Tracer
from .quadrature import diamond_quadrature, triangle_rule

__all__ = [
    "RoundTripStats",
    "round_trip",
    "semigroup_defect",
    "jacobian_checks",
    "SweptVolume",
    "swept_volume",
    "discrete_seminorm",
    "translation_constant",
    "weighted_mass_check",
    "flow_constant",
    "verify_lemmas",
    "adaptive_curves",
    "DualityResult",
    "duality_matrices",
    "duality_check",
]


@dataclass(frozen=True)
class RoundTripStats:
    n_points: int
    n_flagged: int
    n_within: int
    fraction_within: float
    max_error: float
    tol: float

    def as_dict(self):
        return asdict(self)


def round_trip(tracer: Tracer, points, s: float, rel_tol: float = 1e-8) -> RoundTripStats:
    """Trace forward by ``s`` then back.  Flagged trajectories are counted
    and never considered within tolerance."""
    pts = np.atleast_2d(points)
    fwd = tracer.trace(pts, s)
    bwd = tracer.trace(fwd.end, -s, hf=fwd.end_hf)
    err = np.linalg.norm(bwd.end - pts, axis=1)
    flagged = (fwd.status != OK) | (bwd.status != OK)
    good = ~flagged
    tol = rel_tol * tracer.mesh.diameter
    nwithin = int(np.count_nonzero(err[good] <= tol))
    ngood = int(good.sum())
    return RoundTripStats(
        n_points=len(pts), n_flagged=int(flagged.sum()), n_within=nwithin,
        fraction_within=nwithin / len(pts) if len(pts) else 1.0,
        max_error=float(err[good].max()) if ngood else 0.0, tol=tol,
    )


def semigroup_defect(tracer: Tracer, points, s: float, t: float) -> tuple[float, int]:
    """``max |F_{s+t}(x) - F_t(F_s(x))|`` over unflagged points, and the
    number of flagged points."""
    a = tracer.trace(points, s + t)
    b1 = tracer.trace(points, s)
    b2 = tracer.trace(b1.end, t, hf=b1.end_hf)
    good = (a.status == OK) & (b1.status == OK) & (b2.status == OK)
    err = np.linalg.norm(a.end - b2.end, axis=1)
    return (float(err[good].max()) if np.any(good) else 0.0), int((~good).sum())


def jacobian_checks(tracer: Tracer, points, s: float) -> dict:
    """Jacobian identity residual and the ``C_1`` bound."""
    res = tracer.trace(points, s)
    J = res.jacobian
    bound = tracer.c1(s)
    return {
        "identity_residual": float(res.jacobian_identity_residual().max()),
        "jacobian_min": float(J.min()),
        "jacobian_max": float(J.max()),
        "bound": float(bound),
        "bound_violations": int(np.count_nonzero(J > bound * (1 + 1e-10))),
    }


# -- swept volume ------------------------------------------------------------------

@dataclass(frozen=True)
class SweptVolume:
    face: int
    estimate: float
    std: float
    bound: float
    exact_flux: float

    @property
    def ok(self) -> bool:
        return self.estimate <= self.bound + 3.0 * self.std

    def as_dict(self):
        d = asdict(self)
        d["ok"] = self.ok
        return d


def swept_volume(tracer: Tracer, face: int, t: float, n_samples: int = 20_000,
                 rng=None) -> SweptVolume:
    """Monte-Carlo estimate of ``|F_[0,t](sigma)|`` against
    ``C_1(t)/phi_* |t| int_sigma |V . n|``.

    A point ``x`` is covered iff its trajectory over ``[0, -t]`` crosses
    ``sigma``.  Samples are drawn in the box around ``sigma`` enlarged by
    the maximal displacement ``|t| max|V| / phi_*`` (clipped to the domain
    bounding box).
    """
    rng = np.random.default_rng(0) if rng is None else rng
    mesh = tracer.mesh
    va, vb = mesh.vertices[mesh.face_vertices[face]]
    d = tracer.d
    vmax = float(np.max(np.linalg.norm(tracer.field.centroid_velocity(), axis=1)))
    # RT0 fields are affine per diamond: bound the speed from the vertices
    tri = d.triangles
    sp = np.linalg.norm(tracer.field.a[:, None, :] + tracer.field.b[:, None, None] * tri, axis=2)
    vmax = max(vmax, float(sp.max()))
    reach = abs(t) * vmax / tracer.phi_min * 1.05 + 1e-12
    lo = np.minimum(va, vb) - reach
    hi = np.maximum(va, vb) + reach
    x0, x1, y0, y1 = mesh.bounding_box
    lo = np.maximum(lo, [x0, y0])
    hi = np.minimum(hi, [x1, y1])
    box = float(np.prod(hi - lo))
    pts = lo + rng.random((n_samples, 2)) * (hi - lo)
    hf = mesh.locate_diamond(pts)
    inside = hf >= 0
    hit = np.zeros(n_samples, dtype=bool)
    if np.any(inside):
        res = tracer.trace(pts[inside], -t, hf=hf[inside], record=True)
        ev = res.events
        crossed = np.unique(ev["point"][ev["face"] == face])
        idx = np.flatnonzero(inside)
        hit[idx[crossed]] = True
    p = hit.mean()
    flux = abs(float(tracer.field.face_flux[mesh.face_halffaces[face, 0]]))
    bound = tracer.c1(t) / tracer.phi_min * abs(t) * flux
    return SweptVolume(
        face=int(face), estimate=box * p, std=box * np.sqrt(p * (1 - p) / n_samples),
        bound=float(bound), exact_flux=flux,
    )


# -- translation of piecewise constants -----------------------------------------------

def discrete_seminorm(mesh, f_cells) -> float:
    """``(sum_int |sigma| (f_K - f_L)^2 / d_sigma)^(1/2)``, ``d_sigma = d_K + d_L``."""
    f = np.asarray(f_cells, dtype=float)
    fh = mesh.face_halffaces
    inner = fh[:, 1] >= 0
    a, b = fh[inner, 0], fh[inner, 1]
    K, L = mesh.hf_cell[a], mesh.hf_cell[b]
    ds = mesh.hf_dist[a] + mesh.hf_dist[b]
    return float(np.sqrt(np.sum(mesh.face_lengths[inner] * (f[K] - f[L]) ** 2 / ds)))


def translation_constant(tracer: Tracer, f_cells, s: float, degree: int = 8) -> dict:
    """Measured ``R = |f(F_s) - f|_{L1} / (C_1/phi_* |s| |V|_{L2} |f|_T)``."""
    mesh = tracer.mesh
    f = np.asarray(f_cells, dtype=float)
    q = diamond_quadrature(mesh, degree)
    res = tracer.trace(q.points, s, hf=q.hf)
    end_cell = mesh.hf_cell[res.end_hf]
    diff = np.abs(f[end_cell] - f[mesh.hf_cell[q.hf]])
    l1 = float(q.weights @ diff)
    vnorm = tracer.field.l2_norm()
    snorm = discrete_seminorm(mesh, f)
    den = tracer.c1(s) / tracer.phi_min * abs(s) * vnorm * snorm
    return {"l1": l1, "rhs_without_R": den, "R": l1 / den if den > 0 else 0.0,
            "flagged": int(np.count_nonzero(res.status != OK))}


def weighted_mass_check(tracer: Tracer, w, s: float, degree: int = 8) -> dict:
    """``int phi w(F_s) <= (1 + Gamma C_1(T)/phi_* |s|) int phi w`` for ``w >= 0``.

    ``w(F_s)`` has kinks along traced cell boundaries, so the left side is
    only as accurate as the quadrature; ``quad_error`` compares it with the
    rule of half the degree and is added to the slack."""
    mesh = tracer.mesh

    def sides(deg):
        q = diamond_quadrature(mesh, deg)
        phi = tracer.phi[mesh.hf_cell[q.hf]]
        res = tracer.trace(q.points, s, hf=q.hf)
        return float(q.weights @ (phi * w(res.end))), float(q.weights @ (phi * w(q.points)))

    lhs, base = sides(degree)
    quad_error = abs(lhs - sides(max(1, degree // 2))[0])
    factor = 1.0 + tracer.gamma_div * tracer.c1(abs(s)) / tracer.phi_min * abs(s)
    rhs = factor * base
    return {"lhs": lhs, "rhs": rhs, "quad_error": quad_error,
            "ok": bool(lhs <= rhs + 2 * quad_error + 1e-12 * abs(rhs))}


def flow_constant(tracer: Tracer, gd, z, s: float, degree: int = 8) -> float:
    """Measured ``|Pi z(F_s) - Pi z|_{L1} / (|s| |V|_{L2} |grad z|_{L2})``."""
    mesh = tracer.mesh
    q = diamond_quadrature(mesh, degree)
    res = tracer.trace(q.points, s, hf=q.hf)
    P0, _, _ = gd.reconstruct(q.hf, q.points)
    P1, _, _ = gd.reconstruct(res.end_hf, res.end)
    l1 = float(q.weights @ np.abs(P1 @ z - P0 @ z))
    qg, _, Gx, Gy = gd.quadrature(gd.exact_degree)
    g = float(np.sqrt(qg.weights @ ((Gx @ z) ** 2 + (Gy @ z) ** 2)))
    den = abs(s) * tracer.field.l2_norm() * g
    return l1 / den if den > 0 else 0.0


def verify_lemmas(tracer: Tracer, t: float, n_faces: int = 20, n_samples: int = 20_000,
                  seed: int = 0, f_cells=None) -> dict:
    """Swept volumes on random internal faces, the translation constant of
    piecewise constants, the weighted-mass inequality and the Jacobian
    identity for one tracking field."""
    if n_samples < 1000:
        raise ValueError("at least 1000 Monte-Carlo samples are required")
    rng = np.random.default_rng(seed)
    mesh = tracer.mesh
    inner = np.flatnonzero(~mesh.boundary_faces)
    faces = rng.choice(inner, size=min(n_faces, len(inner)), replace=False)
    swept = [swept_volume(tracer, int(f), t, n_samples, rng) for f in faces]
    if f_cells is None:
        f_cells = rng.random(mesh.n_cells)
    trans = translation_constant(tracer, f_cells, t)
    x0, x1, y0, y1 = mesh.bounding_box
    cx, cy = 0.5 * (x0 + x1), 0.5 * (y0 + y1)
    mass = weighted_mass_check(
        tracer, lambda p: 1.0 + np.cos(np.pi * (p[:, 0] - cx)) * np.cos(np.pi * (p[:, 1] - cy)), -t)
    q = diamond_quadrature(mesh, 2)
    jac = jacobian_checks(tracer, q.points, t)
    return {
        "swept": swept,
        "swept_ok": all(sv.ok for sv in swept),
        "swept_max_ratio": max((sv.estimate / sv.bound for sv in swept if sv.bound > 0), default=0.0),
        "translation": trans,
        "weighted_mass": mass,
        "jacobian": jac,
        "c1": tracer.c1(t),
        "gamma_div": tracer.gamma_div,
    }


# -- duality of the transport operator ---------------------------------------------------

def adaptive_curves(fn, n_curves: int, tol: float, n_init: int = 4,
                    min_width: float = 1e-12, max_iter: int = 60,
                    max_intervals: int = 200_000):
    """Adaptive polyline sampling of ``n_curves`` parametrised curves.

    ``fn(ids, t)`` returns the points of curves ``ids`` at parameters
    ``t in [0, 1]``.  Intervals are bisected while the midpoint lies farther
    than ``tol`` from the chord.  Returns the list of polylines and the
    number of unresolved jumps (intervals narrower than ``min_width`` whose
    end points are still more than ``100 tol`` apart, plus every open
    interval once more than ``max_intervals`` are pending, as happens for
    the spiralling images near a discrete vortex centre).
    """
    t0 = np.linspace(0.0, 1.0, n_init + 1)
    ids = np.repeat(np.arange(n_curves), n_init + 1)
    ts = np.tile(t0, n_curves)
    pts = fn(ids, ts).reshape(n_curves, n_init + 1, 2)
    cid = np.repeat(np.arange(n_curves), n_init)
    ta = np.tile(t0[:-1], n_curves)
    tb = np.tile(t0[1:], n_curves)
    ya = pts[:, :-1].reshape(-1, 2)
    yb = pts[:, 1:].reshape(-1, 2)
    done = []
    jumps = 0
    for _ in range(max_iter):
        if len(cid) == 0:
            break
        if len(cid) > max_intervals:
            jumps += len(cid)
            break
        tm = 0.5 * (ta + tb)
        ym = fn(cid, tm)
        dev = np.linalg.norm(ym - 0.5 * (ya + yb), axis=1)
        narrow = (tb - ta) <= min_width
        split = (dev > tol) & ~narrow
        fin = ~split
        jumps += int(np.count_nonzero(narrow & (np.linalg.norm(yb - ya, axis=1) > 100 * tol)))
        done.append((cid[fin], ta[fin], ya[fin]))
        s = split
        cid = np.concatenate([cid[s], cid[s]])
        ta, tb, ya, yb = (np.concatenate([ta[s], tm[s]]), np.concatenate([tm[s], tb[s]]),
                          np.concatenate([ya[s], ym[s]]), np.concatenate([ym[s], yb[s]]))
    if len(cid):
        done.append((cid, ta, ya))
    c = np.concatenate([d[0] for d in done])
    t = np.concatenate([d[1] for d in done])
    y = np.concatenate([d[2] for d in done])
    order = np.lexsort((t, c))
    c, y = c[order], y[order]
    ends = pts[:, -1]
    cuts = np.searchsorted(c, np.arange(1, n_curves))
    lines = [np.vstack([seg, ends[k]]) for k, seg in enumerate(np.split(y, cuts))]
    return lines, jumps


def _segment_images(tracer: Tracer, P0, P1, s: float, tol: float):
    def fn(ids, t):
        x = P0[ids] + t[:, None] * (P1[ids] - P0[ids])
        return tracer.trace(x, s, strict=False).end
    return adaptive_curves(fn, len(P0), tol)


def _diamond_edges(mesh):
    """Unique diamond edges as start/end points and a boundary mask."""
    d = mesh.diamonds
    tri = d.triangles
    starts = tri[:, [1, 2, 0], :]
    ends = tri[:, [2, 0, 1], :]
    nb = d.neighbor
    keep = (nb < 0) | (np.arange(len(d))[:, None] < nb)
    return starts[keep], ends[keep], (nb < 0)[keep]


def _vertex_branches(tracer: Tracer, dt: float, tol: float):
    """Forward trajectories leaving every diamond vertex, one per diamond
    sector (duplicates removed)."""
    mesh = tracer.mesh
    d = mesh.diamonds
    tri = d.triangles
    eta = 1e-9 * mesh.diameter
    cen = d.centroids
    W = tri.reshape(-1, 2)
    hf = np.repeat(np.arange(len(d)), 3)
    dirn = cen[hf] - W
    dirn /= np.linalg.norm(dirn, axis=1)[:, None]
    start = W + eta * dirn
    probe = tracer.trace(start, dt, hf=hf, strict=False).end
    half = tracer.trace(start, 0.5 * dt, hf=hf, strict=False).end
    key = np.round(np.hstack([probe, half]) / (1e-7 * mesh.diameter)).astype(np.int64)
    _, first = np.unique(key, axis=0, return_index=True)
    start, hf = start[first], hf[first]

    def fn(ids, t):
        return tracer.trace(start[ids], t * dt, hf=hf[ids], strict=False).end

    return adaptive_curves(fn, len(start), tol)


def _poly(pts) -> Polygon:
    p = Polygon(pts)
    if not p.is_valid:
        p = shapely.make_valid(p)
    return p


def _cell_polygons(mesh):
    return [Polygon(mesh.vertices[mesh.cell_loop(k)]) for k in range(mesh.n_cells)]


def _tri_rule(coords, degree):
    bary, w = triangle_rule(degree)
    pts = np.einsum("qi,tij->tqj", bary, coords).reshape(-1, 2)
    e1 = coords[:, 1] - coords[:, 0]
    e2 = coords[:, 2] - coords[:, 0]
    area = 0.5 * np.abs(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
    return pts, (area[:, None] * w[None, :]).ravel(), area, len(w)


def _split4(coords):
    a, b, c = coords[:, 0], coords[:, 1], coords[:, 2]
    ab, bc, ca = 0.5 * (a + b), 0.5 * (b + c), 0.5 * (c + a)
    return np.stack([np.stack(t, 1) for t in
                     ((a, ab, ca), (ab, b, bc), (ca, bc, c), (ab, bc, ca))], axis=1)


def _adaptive_integral(func, coords, owner, n_owner, density, degree, max_level,
                       floor=1e-15):
    """Per-owner integrals of ``func(points, owner)`` over triangles; a
    triangle is accepted when its four children change the value by less
    than ``density`` times its area."""
    total = np.zeros(n_owner)
    pts, wq, area, nq = _tri_rule(coords, degree)
    vals = func(pts, np.repeat(owner, nq))
    vmax = float(np.max(np.abs(vals))) if len(vals) else 0.0
    parent = (wq * vals).reshape(-1, nq).sum(axis=1)
    for level in range(max_level + 1):
        if len(coords) == 0:
            break
        kids = _split4(coords).reshape(-1, 3, 2)
        kown = np.repeat(owner, 4)
        pts, wq, karea, nq = _tri_rule(kids, degree)
        vals = func(pts, np.repeat(kown, nq))
        vmax = max(vmax, float(np.max(np.abs(vals))))
        kint = (wq * vals).reshape(-1, nq).sum(axis=1)
        ksum = kint.reshape(-1, 4).sum(axis=1)
        ok = np.abs(ksum - parent) <= density * area + floor
        if level == max_level:
            ok[:] = True
        total += np.bincount(owner[ok], weights=ksum[ok], minlength=n_owner)
        bad = np.repeat(~ok, 4)
        coords, owner, parent, area = kids[bad], kown[bad], kint[bad], karea[bad]
    return total, vmax


@dataclass
class DualityResult:
    lhs: np.ndarray  # A[K, L] = |K cap F^{-1}(L)|
    ratio: np.ndarray  # (phi_L/phi_K) |Q_KL|
    remainder: np.ndarray  # int_{Q_KL} R
    r_max: float
    r_bound: float
    n_pieces: int
    jumps: int

    @property
    def rhs(self) -> np.ndarray:
        return self.ratio + self.remainder


def duality_matrices(tracer: Tracer, dt: float, tol: float = 1e-7,
                     degree: int = 5, quad_tol: float = 1e-8,
                     max_level: int = 5) -> DualityResult:
    """Matrices of both sides of the duality relation for cellwise constants.

    Left: ``A[K, L] = |K cap F_{-dt}(L)|`` from polygons bounded by the
    backward images of the faces.  Right: ``Q_KL = L cap F_dt(K)`` with
    ``T* g = phi T_{-V}(g/phi) + R T_{-V} g``, i.e. the integrand
    ``phi_L/phi_K + R`` with ``R(y) = |JF_{-dt}(y)| - phi(y)/phi(F_{-dt} y)``.
    The right side is integrated over the cells of the arrangement formed by
    the diamond edges, their forward images and the forward trajectories of
    the diamond vertices, on which the Jacobian is smooth.
    """
    mesh = tracer.mesh
    nc = mesh.n_cells
    phi = tracer.phi
    cells = np.array(_cell_polygons(mesh), dtype=object)
    # left-hand side
    fv = mesh.face_vertices
    lines, jl = _segment_images(tracer, mesh.vertices[fv[:, 0]], mesh.vertices[fv[:, 1]], -dt, tol)
    polys = []
    for L in range(nc):
        chain = []
        for h in mesh.cell_halffaces(L):
            f = mesh.hf_face[h]
            seg = lines[f] if mesh.hf_vertices[h][0] == fv[f, 0] else lines[f][::-1]
            chain.append(seg[:-1])
        polys.append(_poly(np.vstack(chain)))
    polys = np.array(polys, dtype=object)
    tree = shapely.STRtree(cells)
    Li, Ki = tree.query(polys)
    A = np.zeros((nc, nc))
    A[Ki, Li] = shapely.area(shapely.intersection(cells[Ki], polys[Li]))
    # right-hand side: arrangement in the image space
    P0, P1, bnd = _diamond_edges(mesh)
    img, jr = _segment_images(tracer, P0[~bnd], P1[~bnd], dt, tol)
    br, jb = _vertex_branches(tracer, dt, tol)
    geoms = [shapely.LineString(np.vstack([a, b])) for a, b in zip(P0, P1)]
    geoms += [shapely.LineString(c) for c in img + br if len(c) >= 2]
    pieces = np.array(list(shapely.polygonize(shapely.get_parts(shapely.unary_union(geoms))).geoms), dtype=object)
    reps = shapely.get_coordinates(shapely.point_on_surface(pieces))
    yhf = mesh.locate_diamond(reps)
    back = tracer.trace(reps, -dt, hf=yhf, strict=False)
    Lp = mesh.hf_cell[yhf]
    Kp = mesh.hf_cell[back.end_hf]
    # adaptive Gauss rules on a constrained triangulation of every piece
    tris, owner = shapely.get_parts(shapely.constrained_delaunay_triangles(pieces), return_index=True)
    coords = shapely.get_coordinates(shapely.get_exterior_ring(tris)).reshape(-1, 4, 2)[:, :3]
    ratio_p = phi[Lp] / phi[Kp]

    def R(points, own):
        J = np.concatenate([
            tracer.trace(points[i:i + 200_000], -dt, hf=yhf[own[i:i + 200_000]],
                         strict=False).jacobian
            for i in range(0, len(points), 200_000)
        ]) if len(points) else np.zeros(0)
        return J - ratio_p[own]

    rem_p, r_max = _adaptive_integral(R, coords, owner, len(pieces), quad_tol / mesh.area,
                                      degree, max_level)
    area_p = shapely.area(pieces)
    ratio = np.zeros((nc, nc))
    rem = np.zeros((nc, nc))
    np.add.at(ratio, (Kp, Lp), phi[Lp] / phi[Kp] * area_p)
    np.add.at(rem, (Kp, Lp), rem_p)
    r_bound = dt / tracer.phi_min * tracer.gamma_div * tracer.c1(dt)
    return DualityResult(lhs=A, ratio=ratio, remainder=rem,
                         r_max=r_max,
                         r_bound=float(r_bound), n_pieces=len(pieces), jumps=jl + jr + jb)


def duality_check(results, dts, n_pairs: int = 10, rng=None) -> dict:
    """Relative defect ``|<T f, g> - <f, T* g>| / |<T f, g>|`` for random
    piecewise-constant ``f, g`` uniform in [0, 1], ``n_pairs`` per step."""
    rng = np.random.default_rng(0) if rng is None else rng
    worst = 0.0
    rows = []
    for step, (res, dt) in enumerate(zip(results, dts)):
        nc = res.lhs.shape[0]
        for _ in range(n_pairs):
            f = rng.random(nc)
            g = rng.random(nc)
            lhs = dt * g @ res.lhs @ f
            rhs = dt * g @ res.rhs @ f
            rel = abs(lhs - rhs) / abs(lhs)
            worst = max(worst, rel)
            rows.append((step, lhs, rhs, rel))
    return {"max_relative": worst, "rows": rows,
            "r_max": max(r.r_max for r in results),
            "r_bound": max(r.r_bound for r in results)}
