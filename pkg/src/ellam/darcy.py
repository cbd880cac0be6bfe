"""Piecewise Raviart-Thomas Darcy velocities on the diamond sub-mesh.

On each diamond the velocity is ``u(x) = a + b x`` (``a`` a vector, ``b`` a
scalar), the lowest-order Raviart-Thomas form.  A field is determined by its
three outward edge fluxes per diamond; it is in ``H(div)`` when fluxes agree
on shared edges.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .quadrature import diamond_quadrature

__all__ = [
    "DarcyField",
    "DarcyDiagnostics",
    "ReconstructionError",
    "reconstruct",
    "validate",
    "rt0_from_edge_fluxes",
    "save_field",
    "load_field",
]


class ReconstructionError(ValueError):
    """Input fluxes do not allow an ``H(div)`` reconstruction."""


def rt0_from_edge_fluxes(triangles: np.ndarray, areas: np.ndarray, fluxes: np.ndarray):
    """RT0 coefficients from outward edge fluxes.

    Edge ``i`` of ``triangles[t]`` is opposite vertex ``i``; the flux-``i``
    basis function is ``(x - P_i) / (2 |T|)``.
    """
    den = 2.0 * areas
    b = fluxes.sum(axis=1) / den
    a = -np.einsum("ti,tij->tj", fluxes, triangles) / den[:, None]
    return a, b


@dataclass(frozen=True)
class DarcyDiagnostics:
    normal_jump: float  # relative to the flux scale
    boundary_trace: float  # relative to the flux scale
    div_max: float
    div_consistency: float  # max |div u - cell flux sum / |K||
    div_bound: float  # M_q+ + M_q- if supplied, else nan
    div_bound_ok: bool
    l2_norm: float
    flux_scale: float
    energy_ratio: float  # measured R of the local energy bound

    def as_dict(self) -> dict:
        return asdict(self)

    @property
    def ok(self) -> bool:
        return (
            self.normal_jump <= 1e-11
            and self.boundary_trace <= 1e-11
            and self.div_consistency <= 1e-12 * max(1.0, self.div_max)
            and self.div_bound_ok
        )


class DarcyField:
    """Velocity ``u = a_j + b_j x`` on every diamond ``j``.

    Attributes
    ----------
    face_flux : (nhf,) ``F_{K,sigma} = int_sigma u . n_{K,sigma}``
    edge_flux : (nhf, 3) outward fluxes through the three diamond edges
    cell_div : (ncells,) ``|K|^{-1} sum_sigma F_{K,sigma}``
    provenance : ``"reconstructed"`` or ``"rt0"`` (or ``"analytic"``)
    """

    def __init__(self, mesh, a, b, provenance: str = "reconstructed"):
        self.mesh = mesh
        self.a = np.asarray(a, dtype=float).reshape(mesh.n_halffaces, 2)
        self.b = np.asarray(b, dtype=float).reshape(mesh.n_halffaces)
        self.provenance = provenance
        d = mesh.diamonds
        mids = 0.5 * (
            d.triangles[:, [1, 2, 0], :] + d.triangles[:, [2, 0, 1], :]
        )
        un = np.einsum(
            "tij,tij->ti", self.a[:, None, :] + self.b[:, None, None] * mids, d.edge_normals
        )
        self.edge_flux = un * d.edge_lengths
        self.face_flux = self.edge_flux[:, 0].copy()
        self.cell_div = (
            np.bincount(mesh.hf_cell, weights=self.face_flux, minlength=mesh.n_cells)
            / mesh.cell_areas
        )

    # -- construction helpers ---------------------------------------------------
    @classmethod
    def zero(cls, mesh, provenance="reconstructed"):
        return cls(mesh, np.zeros((mesh.n_halffaces, 2)), np.zeros(mesh.n_halffaces), provenance)

    @classmethod
    def from_edge_fluxes(cls, mesh, edge_flux, provenance="reconstructed"):
        d = mesh.diamonds
        a, b = rt0_from_edge_fluxes(d.triangles, d.areas, np.asarray(edge_flux, dtype=float))
        return cls(mesh, a, b, provenance)

    @classmethod
    def interpolate(cls, mesh, u, degree: int = 4, provenance="analytic"):
        """Diamond-wise RT0 interpolant of a vector field (edge-flux moments)."""
        from .quadrature import gauss_legendre_01

        d = mesh.diamonds
        s, w = gauss_legendre_01(max(1, (degree + 2) // 2))
        P = d.triangles
        starts = P[:, [1, 2, 0], :]
        ends = P[:, [2, 0, 1], :]
        flux = np.zeros((len(d), 3))
        for sk, wk in zip(s, w):
            x = starts + sk * (ends - starts)
            uv = np.asarray(u(x.reshape(-1, 2)), dtype=float).reshape(len(d), 3, 2)
            flux += wk * np.einsum("tij,tij->ti", uv, d.edge_normals)
        flux *= d.edge_lengths
        # make shared edges exactly consistent
        nb, ne = d.neighbor, d.neighbor_edge
        for e in range(3):
            has = nb[:, e] >= 0
            j = np.flatnonzero(has)
            other = -flux[nb[j, e], ne[j, e]]
            flux[j, e] = np.where(j < nb[j, e], flux[j, e], other)
        return cls.from_edge_fluxes(mesh, flux, provenance)

    # -- evaluation --------------------------------------------------------------
    def velocity_in(self, hf, points) -> np.ndarray:
        hf = np.asarray(hf)
        return self.a[hf] + self.b[hf][:, None] * np.asarray(points)

    def velocity(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        hf = self.mesh.locate_diamond(pts)
        out = np.full((len(pts), 2), np.nan)
        ok = hf >= 0
        out[ok] = self.velocity_in(hf[ok], pts[ok])
        return out

    @property
    def divergence(self) -> np.ndarray:
        """Constant divergence ``2 b`` on every diamond."""
        return 2.0 * self.b

    def centroid_velocity(self) -> np.ndarray:
        return self.velocity_in(np.arange(self.mesh.n_halffaces), self.mesh.diamonds.centroids)

    def l2_norm(self) -> float:
        q = diamond_quadrature(self.mesh, 2)
        u = self.velocity_in(q.hf, q.points)
        return float(np.sqrt(q.weights @ (u ** 2).sum(axis=1)))

    def diamond_energy(self) -> np.ndarray:
        q = diamond_quadrature(self.mesh, 2)
        u = self.velocity_in(q.hf, q.points)
        return np.bincount(q.hf, weights=q.weights * (u ** 2).sum(axis=1),
                           minlength=self.mesh.n_halffaces)

    @property
    def flux_scale(self) -> float:
        return float(np.max(np.abs(self.edge_flux))) if self.edge_flux.size else 0.0

    def __add__(self, other):
        return DarcyField(self.mesh, self.a + other.a, self.b + other.b, self.provenance)

    def __mul__(self, s):
        return DarcyField(self.mesh, s * self.a, s * self.b, self.provenance)

    __rmul__ = __mul__

    def negated(self) -> "DarcyField":
        return DarcyField(self.mesh, -self.a, -self.b, self.provenance)


def reconstruct(mesh, fluxes, no_flow: bool = True, tol: float = 1e-10) -> DarcyField:
    """``H(div)`` velocity from conservative face fluxes.

    In each cell the divergence is the constant ``|K|^{-1} sum F_{K,sigma}``;
    the fluxes across the internal diamond edges solve the resulting
    ``n x n`` system of rank ``n - 1`` and the minimal Euclidean norm solution
    is selected.  ``fluxes`` is a FluxSet or an ``(nhf,)`` array.
    """
    F = np.asarray(getattr(fluxes, "values", fluxes), dtype=float)
    if F.shape != (mesh.n_halffaces,):
        raise ReconstructionError("one flux per half-face required")
    scale = max(float(np.max(np.abs(F))) if F.size else 0.0, 1e-300)
    fh = mesh.face_halffaces
    inner = fh[:, 1] >= 0
    cons = np.abs(F[fh[inner, 0]] + F[fh[inner, 1]])
    if cons.size and cons.max() > tol * scale:
        f = int(np.flatnonzero(inner)[np.argmax(cons)])
        raise ReconstructionError(
            f"fluxes are not conservative on face {f} (residual {cons.max():.3e})"
        )
    if no_flow:
        bnd = np.abs(F[fh[~inner, 0]])
        if bnd.size and bnd.max() > tol * scale:
            raise ReconstructionError(
                f"non-zero boundary flux {bnd.max():.3e} with no-flow boundary"
            )
    d = mesh.diamonds
    edge = np.zeros((mesh.n_halffaces, 3))
    counts = mesh.faces_per_cell
    for n in np.unique(counts):
        cells = np.flatnonzero(counts == n)
        hf = mesh.cell_ptr[cells][:, None] + np.arange(n)[None, :]
        Fk = F[hf]
        delta = Fk.sum(axis=1) / mesh.cell_areas[cells]
        r = delta[:, None] * d.areas[hf] - Fk
        g = np.cumsum(r, axis=1)
        g -= g.mean(axis=1, keepdims=True)
        edge[hf, 0] = Fk
        edge[hf, 1] = g
        edge[hf, 2] = -np.roll(g, 1, axis=1)
    return DarcyField.from_edge_fluxes(mesh, edge, "reconstructed")


def validate(field: DarcyField, div_bound: float | None = None,
             grad_norm: float | None = None, slack: float = 1e-9) -> DarcyDiagnostics:
    """Normal continuity, boundary trace, divergence bound and energy checks."""
    mesh = field.mesh
    d = mesh.diamonds
    scale = field.flux_scale
    sref = max(scale, 1e-300)
    verts = d.triangles
    starts = verts[:, [1, 2, 0], :]
    ends = verts[:, [2, 0, 1], :]
    jump = 0.0
    trace = 0.0
    for e in range(3):
        for pts in (starts[:, e], ends[:, e], 0.5 * (starts[:, e] + ends[:, e])):
            un = np.einsum(
                "ti,ti->t", field.a + field.b[:, None] * pts, d.edge_normals[:, e]
            ) * d.edge_lengths[:, e]
            nb = d.neighbor[:, e]
            has = nb >= 0
            if np.any(has):
                j = np.flatnonzero(has)
                k = nb[j]
                un_nb = np.einsum(
                    "ti,ti->t",
                    field.a[k] + field.b[k][:, None] * pts[j],
                    d.edge_normals[k, d.neighbor_edge[j, e]],
                ) * d.edge_lengths[j, e]
                jump = max(jump, float(np.max(np.abs(un[j] + un_nb))))
            if np.any(~has):
                trace = max(trace, float(np.max(np.abs(un[~has]))))
    div = field.divergence
    div_max = float(np.max(np.abs(div))) if div.size else 0.0
    cons = float(np.max(np.abs(div - field.cell_div[mesh.hf_cell]))) if div.size else 0.0
    if div_bound is None:
        bound, bound_ok = np.nan, True
    else:
        bound = float(div_bound)
        bound_ok = div_max <= bound + slack
    # local energy estimate |u|^2_{D} <= R diam(K)^2/|K| sum_sigma F^2
    energy = field.diamond_energy()
    fsq = np.bincount(mesh.hf_cell, weights=field.face_flux ** 2, minlength=mesh.n_cells)
    den = (mesh.cell_diameters ** 2 / mesh.cell_areas * fsq)[mesh.hf_cell]
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(den > 0, energy / den, 0.0)
    return DarcyDiagnostics(
        normal_jump=jump / sref if scale > 0 else jump,
        boundary_trace=trace / sref if scale > 0 else trace,
        div_max=div_max,
        div_consistency=cons,
        div_bound=bound,
        div_bound_ok=bool(bound_ok),
        l2_norm=field.l2_norm(),
        flux_scale=scale,
        energy_ratio=float(np.max(ratio)) if ratio.size else 0.0,
    )


def save_field(field: DarcyField, path) -> None:
    """Write ``rt0field <n>`` followed by one ``a_x a_y b`` line per diamond."""
    out = [f"rt0field {field.mesh.n_halffaces}"]
    out += [f"{ax:.17g} {ay:.17g} {b:.17g}" for (ax, ay), b in zip(field.a, field.b)]
    Path(path).write_text("\n".join(out) + "\n")


def load_field(mesh, path) -> DarcyField:
    """Read a file written by :func:`save_field` for the same mesh."""
    lines = [ln.split("#", 1)[0].strip() for ln in Path(path).read_text().splitlines()]
    lines = [ln for ln in lines if ln]
    head = lines[0].split() if lines else []
    if len(head) != 2 or head[0] != "rt0field":
        raise ValueError(f"{path}: missing 'rt0field <n>' header")
    n = int(head[1])
    if n != mesh.n_halffaces or len(lines) - 1 != n:
        raise ValueError(f"{path}: expected {mesh.n_halffaces} diamonds, file declares {n}"
                         f" and has {len(lines) - 1} rows")
    vals = np.array([[float(t) for t in ln.split()] for ln in lines[1:]])
    if vals.shape != (n, 3):
        raise ValueError(f"{path}: every row needs three numbers")
    return DarcyField(mesh, vals[:, :2], vals[:, 2], "file")
