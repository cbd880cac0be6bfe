"""Characteristic flow of ``u / phi`` for diamond-wise RT0 velocities.

Inside a diamond ``u = a + b x`` and ``phi`` is constant, so with
``alpha = a/phi`` and ``beta = b/phi`` the trajectory is
``x(t) = x0 + t E(beta t) (alpha + beta x0)`` where ``E(z) = (e^z - 1)/z``.
The exit time through an edge ``{n . x = c}`` solves
``(n . v0) (e^{beta t} - 1)/beta = c - n . x0`` in closed form
(``v0 = alpha + beta x0``).  Since ``n . v(t) = e^{beta t} n . v0`` the
sign of the normal velocity never changes inside a diamond, so at most one
root exists per edge.

All traces are vectorised over batches of points.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .darcy import DarcyField

__all__ = [
    "FlowConfig",
    "FlowError",
    "FlowTrace",
    "TraceBatch",
    "Tracer",
    "trace",
    "jacobian",
    "jf_bound",
    "transport_apply",
    "OK",
    "CRITICAL",
    "CLAMPED",
]

OK = 0
CRITICAL = 1
CLAMPED = 2

_STATUS_NAMES = {OK: "ok", CRITICAL: "hit-critical-set", CLAMPED: "left-domain-clamped"}


class FlowError(RuntimeError):
    """Trace could not be completed (event budget exhausted)."""


@dataclass(frozen=True)
class FlowConfig:
    """Tracing tolerances.

    ``eps`` is relative to the domain diameter; ``root_tol`` is relative to
    the traced time span and only guards the zero-progress detection (exit
    times are computed in closed form).
    """

    root_tol: float = 1e-13
    eps: float = 1e-12
    max_events: int = 100_000
    stall_limit: int = 6
    max_nudges: int = 3

    def __post_init__(self):
        if self.root_tol <= 0 or self.eps <= 0 or self.max_events < 1 or self.max_nudges < 0:
            raise ValueError("flow tolerances must be positive")


def _expm1_over(z: np.ndarray) -> np.ndarray:
    """``(e^z - 1)/z`` with the removable singularity at 0."""
    out = np.ones_like(z)
    big = np.abs(z) > 1e-8
    out[big] = np.expm1(z[big]) / z[big]
    small = ~big
    out[small] = 1.0 + 0.5 * z[small] + z[small] ** 2 / 6.0
    return out


def _log1p_over(z: np.ndarray) -> np.ndarray:
    """``log(1+z)/z`` with the removable singularity at 0."""
    out = np.ones_like(z)
    big = np.abs(z) > 1e-8
    out[big] = np.log1p(z[big]) / z[big]
    small = ~big
    out[small] = 1.0 - 0.5 * z[small] + z[small] ** 2 / 3.0
    return out


@dataclass
class TraceBatch:
    """Result of tracing many points over the same time span."""

    start: np.ndarray
    end: np.ndarray
    end_hf: np.ndarray
    log_jacobian: np.ndarray
    jac_integral: np.ndarray  # int_0^s |JF_t| div V(F_t) dt, piecewise exact
    phi_start: np.ndarray
    phi_end: np.ndarray
    status: np.ndarray
    n_events: np.ndarray
    s: float
    events: dict | None = None

    @property
    def jacobian(self) -> np.ndarray:
        return np.exp(self.log_jacobian)

    @property
    def flagged(self) -> np.ndarray:
        return self.status != OK

    def jacobian_identity_residual(self) -> np.ndarray:
        """``|phi(F_s) |JF_s| - phi(x) - int_0^s |JF_t| div V(F_t) dt|``."""
        lhs = self.phi_end * self.jacobian - self.phi_start
        return np.abs(lhs - self.jac_integral)


@dataclass
class FlowTrace:
    """Single trajectory with its crossing events."""

    x: np.ndarray
    t0: float
    t1: float
    endpoint: np.ndarray
    jacobian: float
    status: str
    events: list = dc_field(default_factory=list)

    @property
    def event_times(self) -> np.ndarray:
        return np.array([e["time"] for e in self.events])


class Tracer:
    """Flow of ``field / phi`` with ``phi`` constant per cell."""

    def __init__(self, field: DarcyField, phi, config: FlowConfig = FlowConfig()):
        mesh = field.mesh
        phi = np.asarray(phi, dtype=float)
        if phi.ndim == 0:
            phi = np.full(mesh.n_cells, float(phi))
        if phi.shape != (mesh.n_cells,):
            raise ValueError("phi must be a scalar or one value per cell")
        if np.any(phi <= 0):
            raise ValueError("porosity must be positive")
        self.field = field
        self.mesh = mesh
        self.phi = phi
        self.config = config
        d = mesh.diamonds
        self.d = d
        ph = phi[mesh.hf_cell]
        self.alpha = field.a / ph[:, None]
        self.beta = field.b / ph
        scale = max(field.flux_scale, 1e-300)
        bnd = d.neighbor < 0
        # boundary edges carrying no flux are walls: never exit through them
        self.wall = bnd & (np.abs(field.edge_flux) <= 1e-12 * scale)
        self.outflow = bnd & ~self.wall
        self.eps = config.eps * mesh.diameter
        self.starts = d.triangles[:, [1, 2, 0], :]
        self.ends = d.triangles[:, [2, 0, 1], :]

    # -- constants of the bounds -------------------------------------------------
    @property
    def phi_min(self) -> float:
        return float(self.phi.min())

    @property
    def phi_max(self) -> float:
        return float(self.phi.max())

    @property
    def gamma_div(self) -> float:
        return float(np.max(np.abs(self.field.divergence))) if len(self.field.b) else 0.0

    def c1(self, s: float) -> float:
        """``C_1(s) = (phi^*/phi_*) exp(Gamma_div |s| / phi_*)``."""
        return self.phi_max / self.phi_min * np.exp(self.gamma_div * abs(s) / self.phi_min)

    # -- tracing -------------------------------------------------------------------
    def locate(self, points) -> np.ndarray:
        return self.mesh.locate_diamond(points)

    def trace(self, points, s: float, hf=None, record: bool = False,
              strict: bool = True) -> TraceBatch:
        """Trace every point over a time span ``s`` (negative: backwards)."""
        mesh = self.mesh
        d = self.d
        X = np.array(np.atleast_2d(points), dtype=float)
        npt = len(X)
        cur = self.locate(X) if hf is None else np.array(hf, dtype=np.int64)
        if np.any(cur < 0):
            bad = np.flatnonzero(cur < 0)
            if strict:
                raise ValueError(f"{len(bad)} start points lie outside the domain")
        s_arr = np.broadcast_to(np.asarray(s, dtype=float), (npt,))
        if np.any(s_arr > 0) and np.any(s_arr < 0):
            raise ValueError("all time spans of a batch must have the same sign")
        sign = -1.0 if np.any(s_arr < 0) else 1.0
        trem = np.abs(s_arr).copy()
        T = float(trem.max()) if npt else 0.0
        logJ = np.zeros(npt)
        integ = np.zeros(npt)
        status = np.zeros(npt, dtype=np.int64)
        nev = np.zeros(npt, dtype=np.int64)
        stall = np.zeros(npt, dtype=np.int64)
        nudges = np.zeros(npt, dtype=np.int64)
        # checkpoints for closed-orbit detection (Brent: reset at powers of two)
        ck_hf = np.full(npt, -1, dtype=np.int64)
        ck_edge = np.zeros(npt, dtype=np.int64)
        ck_x = np.zeros((npt, 2))
        ck_trem = np.zeros(npt)
        ck_logJ = np.zeros(npt)
        ck_integ = np.zeros(npt)
        cell0 = np.where(cur >= 0, mesh.hf_cell[np.maximum(cur, 0)], -1)
        phi0 = np.where(cell0 >= 0, self.phi[np.maximum(cell0, 0)], np.nan)
        active = cur >= 0
        status[~active] = CLAMPED
        ev = {"point": [], "time": [], "hf": [], "edge": [], "face": [], "x": []} if record else None
        tiny = self.config.root_tol * max(T, 1e-300)

        while np.any(active):
            idx = np.flatnonzero(active)
            j = cur[idx]
            x = X[idx]
            al = sign * self.alpha[j]
            be = sign * self.beta[j]
            v0 = al + be[:, None] * x
            nrm = d.edge_normals[j]
            vn = np.einsum("pej,pj->pe", nrm, v0)
            d0 = np.maximum(d.edge_offsets[j] - np.einsum("pej,pj->pe", nrm, x), 0.0)
            with np.errstate(divide="ignore", invalid="ignore"):
                r = np.where(vn > 0, d0 / vn, np.inf)
                z = be[:, None] * r
                ok = (vn > 0) & (z > -1.0) & np.isfinite(r)
                zz = np.where(ok, z, 0.0)
                tau = np.where(ok, r * _log1p_over(zz), np.inf)
            tau[self.wall[j]] = np.inf
            e_star = np.argmin(tau, axis=1)
            t_star = tau[np.arange(len(idx)), e_star]
            finish = t_star >= trem[idx]
            dt = np.where(finish, trem[idx], t_star)
            # advance inside the diamond
            x_new = x + (dt * _expm1_over(be * dt))[:, None] * v0
            cell = mesh.hf_cell[j]
            ph = self.phi[cell]
            J0 = np.exp(logJ[idx])
            integ[idx] += ph * J0 * np.expm1(2.0 * be * dt)
            logJ[idx] += 2.0 * be * dt
            trem[idx] -= dt
            moved = np.linalg.norm(x_new - x, axis=1)
            X[idx] = x_new

            done_idx = idx[finish]
            active[done_idx] = False

            cross = ~finish
            if not np.any(cross):
                continue
            ci = idx[cross]
            cj = j[cross]
            ce = e_star[cross]
            # snap onto the exit edge
            P0 = self.starts[cj, ce]
            P1 = self.ends[cj, ce]
            seg = P1 - P0
            lam = np.einsum("pj,pj->p", X[ci] - P0, seg) / np.einsum("pj,pj->p", seg, seg)
            X[ci] = P0 + np.clip(lam, 0.0, 1.0)[:, None] * seg
            nb = d.neighbor[cj, ce]
            # outflow through the domain boundary: stop and flag
            out = nb < 0
            if np.any(out):
                oi = ci[out]
                status[oi] |= CLAMPED
                active[oi] = False
            go = ~out
            gi, gj, ge, gn = ci[go], cj[go], ce[go], nb[go]
            c_old = mesh.hf_cell[gj]
            c_new = mesh.hf_cell[gn]
            jump = c_old != c_new
            if np.any(jump):
                logJ[gi[jump]] += np.log(self.phi[c_old[jump]] / self.phi[c_new[jump]])
            cur[gi] = gn
            nev[gi] += 1
            if record:
                ev["point"].append(gi)
                ev["time"].append(sign * (np.abs(s_arr[gi]) - trem[gi]))
                ev["hf"].append(gj)
                ev["edge"].append(ge)
                ev["face"].append(np.where(ge == 0, mesh.hf_face[gj], -1))
                ev["x"].append(X[gi].copy())
            self._skip_periods(gi, gn, ge, nev, X, trem, logJ, integ,
                               ck_hf, ck_edge, ck_x, ck_trem, ck_logJ, ck_integ)
            # zero-progress detection (vertex / tangential contact); a
            # point that keeps stalling after nudges circulates around a
            # vertex and is stopped there
            stalled = (dt[cross][go] <= tiny) | (moved[cross][go] <= self.eps)
            stall[gi[~stalled]] = 0
            stall[gi[stalled]] += 1
            stuck = gi[stall[gi] >= self.config.stall_limit]
            if len(stuck):
                trapped = stuck[nudges[stuck] >= self.config.max_nudges]
                status[trapped] |= CRITICAL
                active[trapped] = False
                free = stuck[nudges[stuck] < self.config.max_nudges]
                self._nudge(free, X, cur, status, sign, active)
                nudges[free] += 1
                stall[stuck] = 0
            if np.any(nev[gi] > self.config.max_events):
                raise FlowError(
                    f"more than {self.config.max_events} crossing events; "
                    "check the tracing tolerances"
                )

        cell_end = np.where(cur >= 0, mesh.hf_cell[np.maximum(cur, 0)], -1)
        phi_end = np.where(cell_end >= 0, self.phi[np.maximum(cell_end, 0)], np.nan)
        if record:
            ev = {
                k: (np.concatenate(v) if v else np.zeros((0, 2) if k == "x" else 0))
                for k, v in ev.items()
            }
        return TraceBatch(
            start=np.array(np.atleast_2d(points), dtype=float), end=X, end_hf=cur,
            log_jacobian=logJ, jac_integral=integ, phi_start=phi0,
            phi_end=phi_end, status=status, n_events=nev, s=s, events=ev,
        )

    def _skip_periods(self, gi, gn, ge, nev, X, trem, logJ, integ,
                      ck_hf, ck_edge, ck_x, ck_trem, ck_logJ, ck_integ):
        """Skip whole periods of closed orbits.

        A point that re-enters the checkpointed diamond through the same edge
        within ``eps`` of the checkpoint, with an unchanged Jacobian, is on a
        closed orbit; small orbits around a centre would otherwise need
        millions of crossings.
        """
        same = (ck_hf[gi] == gn) & (ck_edge[gi] == ge)
        if np.any(same):
            p = gi[same]
            period = ck_trem[p] - trem[p]
            hit = (np.linalg.norm(X[p] - ck_x[p], axis=1) <= self.eps) & (period > 0) \
                & (np.abs(logJ[p] - ck_logJ[p]) <= 1e-12)
            p, period = p[hit], period[hit]
            k = np.floor(trem[p] / period)
            trem[p] -= k * period
            integ[p] += k * (integ[p] - ck_integ[p])
            ck_hf[p] = -1
        # power-of-two event counts move the checkpoint
        pow2 = (nev[gi] & (nev[gi] - 1)) == 0
        reset = gi[pow2]
        ck_hf[reset] = gn[pow2]
        ck_edge[reset] = ge[pow2]
        ck_x[reset] = X[reset]
        ck_trem[reset] = trem[reset]
        ck_logJ[reset] = logJ[reset]
        ck_integ[reset] = integ[reset]

    def _nudge(self, pts, X, cur, status, sign, active):
        """Push points stuck on the critical set by ``eps`` along the flow."""
        j = cur[pts]
        v = sign * (self.alpha[j] + self.beta[j][:, None] * X[pts])
        nv = np.linalg.norm(v, axis=1)
        dirn = np.where(nv[:, None] > 0, v / np.where(nv > 0, nv, 1.0)[:, None], 0.0)
        Xn = X[pts] + self.eps * dirn
        hf = self.locate(Xn)
        inside = hf >= 0
        X[pts[inside]] = Xn[inside]
        cur[pts[inside]] = hf[inside]
        status[pts] |= CRITICAL
        # a nudge leaving the domain means a stagnant corner: stop there
        stop = pts[~inside]
        status[stop] |= CLAMPED
        active[stop] = False


def trace(field: DarcyField, phi, x, t0: float, t1: float,
          config: FlowConfig = FlowConfig()) -> FlowTrace:
    """Single trajectory from ``x`` at ``t0`` to ``t1`` with its event list."""
    tr = Tracer(field, phi, config)
    res = tr.trace(np.asarray(x, dtype=float)[None, :], t1 - t0, record=True)
    ev = res.events
    events = [
        {
            "time": float(t0 + ev["time"][i]),
            "hf": int(ev["hf"][i]),
            "edge": int(ev["edge"][i]),
            "face": int(ev["face"][i]),
            "x": ev["x"][i].copy(),
        }
        for i in range(len(ev["time"]))
    ]
    st = int(res.status[0])
    name = _STATUS_NAMES[CRITICAL] if st & CRITICAL else (
        _STATUS_NAMES[CLAMPED] if st & CLAMPED else _STATUS_NAMES[OK])
    return FlowTrace(
        x=np.asarray(x, dtype=float), t0=t0, t1=t1, endpoint=res.end[0],
        jacobian=float(res.jacobian[0]), status=name, events=events,
    )


def jacobian(result: FlowTrace | TraceBatch):
    """``|JF|`` of a trace (closed-form product over the visited pieces)."""
    return result.jacobian


def jf_bound(tracer: Tracer, s: float) -> float:
    return tracer.c1(s)


def transport_apply(kind: str, tracers, times, psi, points, t: float) -> np.ndarray:
    """Values of the transport operators at ``(points, t)``.

    ``kind="T"``: ``psi(F^{(n+1)}_{t^{n+1} - t^n}(x), t)``;
    ``kind="That"``: ``psi(F^{(n+1)}_{t^{n+1} - t}(x), t)``, for
    ``t in (t^n, t^{n+1}]``.  ``tracers[n]`` is the flow on that interval and
    ``psi(points, t)`` a space-time function.
    """
    times = np.asarray(times, dtype=float)
    if not (times[0] < t <= times[-1]):
        raise ValueError("t must lie in (t^0, t^N]")
    n = int(np.searchsorted(times, t, side="left") - 1)
    if kind == "T":
        s = times[n + 1] - times[n]
    elif kind == "That":
        s = times[n + 1] - t
    else:
        raise ValueError("kind must be 'T' or 'That'")
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if s == 0.0:
        return np.asarray(psi(pts, t), dtype=float)
    res = tracers[n].trace(pts, s)
    return np.asarray(psi(res.end, t), dtype=float)
