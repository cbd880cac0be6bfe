"""The coupled pressure / concentration time loop.

Each step solves the pressure equation with the viscosity of the previous
concentration, builds an ``H(div)`` tracking velocity, and advances the
concentration with a characteristic (ELLAM) mass term: the previous mass
``phi Pi c^(n)`` is carried forward along the flow by tracing quadrature
nodes, and diffusion-dispersion is implicit.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .darcy import DarcyField, reconstruct, validate
from .fe import P1Gd, Rt0MixedGd
from .flow import CLAMPED, CRITICAL, FlowConfig, Tracer
from .gdm import GradientDiscretisation
from .hmm import FluxSet, HmmGd, check_fv_relations
from .linalg import SolverConfig, SolverError, solve_spd, solve_zero_mean
from .quadrature import diamond_quadrature, gauss_legendre_01

__all__ = [
    "ConfigError",
    "StepError",
    "Well",
    "WellSource",
    "FunctionSource",
    "ModelData",
    "SchemeConfig",
    "SimulationState",
    "Simulation",
    "viscosity",
    "dispersion_tensor",
    "source_average",
    "run",
]


class ConfigError(ValueError):
    """Invalid model or scheme parameters."""


class StepError(RuntimeError):
    """A time step could not be completed."""


# -- coefficients ---------------------------------------------------------------

def viscosity(c, mu0: float, M: float):
    """``mu(c) = mu0 ((1 - c) + M^{1/4} c)^{-4}`` with ``c`` clamped to [0, 1]."""
    if mu0 <= 0 or M <= 0:
        raise ConfigError("mu0 and the mobility ratio must be positive")
    cc = np.clip(np.asarray(c, dtype=float), 0.0, 1.0)
    out = mu0 * ((1.0 - cc) + M ** 0.25 * cc) ** -4
    return float(out) if np.ndim(out) == 0 else out


def dispersion_tensor(u, phi, d_m: float, d_l: float, d_t: float) -> np.ndarray:
    """``phi (d_m I + d_l |u| E(u) + d_t |u| (I - E(u)))``, ``E(u) = u u^T / |u|^2``.

    ``u`` is ``(2,)`` or ``(n, 2)``; ``phi`` broadcasts against the points.
    """
    u = np.asarray(u, dtype=float)
    single = u.ndim == 1
    u = np.atleast_2d(u)
    phi = np.broadcast_to(np.asarray(phi, dtype=float), (len(u),))
    nu = np.linalg.norm(u, axis=1)
    safe = np.where(nu > 0, nu, 1.0)
    # |u| E(u) = u u^T / |u|
    uuT = np.einsum("pi,pj->pij", u, u) / safe[:, None, None]
    eye = np.eye(2)[None]
    D = d_m * eye + d_l * uuT + d_t * (nu[:, None, None] * eye - uuT)
    D = phi[:, None, None] * D
    return D[0] if single else D


# -- sources ----------------------------------------------------------------------

def _bump(r2: np.ndarray) -> np.ndarray:
    out = np.zeros_like(r2)
    ins = r2 < 1.0
    out[ins] = np.exp(-1.0 / (1.0 - r2[ins]))
    return out


@dataclass(frozen=True)
class Well:
    """Mollified point source: smooth bump of given radius and total rate."""

    center: tuple[float, float]
    radius: float
    rate: float

    def __post_init__(self):
        if self.radius <= 0:
            raise ConfigError("well radius must be positive")
        if self.rate < 0:
            raise ConfigError("well rate must be non-negative")

    def shape(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        r2 = ((p - np.asarray(self.center)) ** 2).sum(axis=1) / self.radius ** 2
        return _bump(r2)


class WellSource:
    """Sum of wells, each scaled so that its quadrature integral is exactly
    its rate on the mesh at hand (time-constant unless ``time_factor`` is
    given)."""

    def __init__(self, wells: Sequence[Well] = (), time_factor: Callable | None = None,
                 degree: int = 5):
        self.wells = tuple(wells)
        self.time_factor = time_factor
        self.degree = degree
        self._cache = {}

    def _setup(self, mesh):
        key = id(mesh)
        if key not in self._cache:
            q = diamond_quadrature(mesh, self.degree)
            cell = mesh.hf_cell[q.hf]
            avg = np.zeros(mesh.n_cells)
            peak = 0.0
            for w in self.wells:
                s = w.shape(q.points)
                tot = float(q.weights @ s)
                if tot <= 0:
                    raise ConfigError(f"well at {w.center} is not resolved by the mesh")
                scale = w.rate / tot
                avg += np.bincount(cell, weights=q.weights * s, minlength=mesh.n_cells) * scale
                peak += scale * np.exp(-1.0)
            self._cache[key] = (mesh, avg / mesh.cell_areas, peak)
        return self._cache[key]

    def factor(self, t: float) -> float:
        return 1.0 if self.time_factor is None else float(self.time_factor(t))

    def cell_values(self, mesh, t: float) -> np.ndarray:
        return self._setup(mesh)[1] * self.factor(t)

    def bound(self, mesh, times=None) -> float:
        """Pointwise bound ``M_q`` of the (normalised) source."""
        peak = self._setup(mesh)[2]
        if self.time_factor is None or times is None:
            return peak
        return peak * max(abs(self.factor(t)) for t in times)

    def total_rate(self) -> float:
        return float(sum(w.rate for w in self.wells))


class FunctionSource:
    """Source given by a function ``f(points, t)`` with a supplied bound."""

    def __init__(self, f: Callable, bound: float | None = None, degree: int = 5):
        self.f = f
        self._bound = bound
        self.degree = degree

    def cell_values(self, mesh, t: float) -> np.ndarray:
        q = diamond_quadrature(mesh, self.degree)
        vals = np.asarray(self.f(q.points, t), dtype=float) * np.ones(len(q))
        return np.bincount(mesh.hf_cell[q.hf], weights=q.weights * vals,
                           minlength=mesh.n_cells) / mesh.cell_areas

    def bound(self, mesh, times=None) -> float:
        if self._bound is not None:
            return float(self._bound)
        q = diamond_quadrature(mesh, self.degree)
        ts = [0.0] if times is None else list(times)
        return float(max(np.max(np.abs(self.f(q.points, t))) for t in ts))


ZERO_SOURCE = WellSource(())


def source_average(q, n: int, times, mode: str = "average", mesh=None) -> np.ndarray:
    """Per-cell source values for interval ``n``.

    ``mode="average"``: time average over ``[t^n, t^{n+1}]`` by a 4-point
    Gauss rule; ``mode="left"``: value at ``t^n``.  ``n = N`` reuses
    interval ``N-1``.  ``q`` is a WellSource / FunctionSource (``mesh``
    required) or a function of time returning per-cell values.
    """
    times = np.asarray(times, dtype=float)
    N = len(times) - 1
    if not (0 <= n <= N):
        raise ValueError(f"interval index {n} outside [0, {N}]")
    if n == N:
        n = N - 1
    t0, t1 = times[n], times[n + 1]

    def val(t):
        if hasattr(q, "cell_values"):
            return np.asarray(q.cell_values(mesh, t), dtype=float)
        return np.asarray(q(t), dtype=float)

    if mode == "left":
        return val(t0)
    if mode != "average":
        raise ConfigError(f"unknown source mode {mode!r}")
    s, w = gauss_legendre_01(4)
    return sum(wk * val(t0 + sk * (t1 - t0)) for sk, wk in zip(s, w))


# -- model and configuration ----------------------------------------------------------

def _per_cell_scalar(spec, mesh) -> np.ndarray:
    if callable(spec):
        return np.asarray(spec(mesh.cell_points), dtype=float) * np.ones(mesh.n_cells)
    a = np.asarray(spec, dtype=float)
    if a.ndim == 0:
        return np.full(mesh.n_cells, float(a))
    if a.shape == (mesh.n_cells,):
        return a
    raise ConfigError(f"cannot interpret scalar field of shape {a.shape}")


def _per_cell_tensor(spec, mesh) -> np.ndarray:
    if callable(spec):
        A = np.asarray(spec(mesh.cell_points), dtype=float)
    else:
        A = np.asarray(spec, dtype=float)
    n = mesh.n_cells
    if A.ndim == 0:
        return np.broadcast_to(A * np.eye(2), (n, 2, 2)).copy()
    if A.shape == (2, 2):
        return np.broadcast_to(A, (n, 2, 2)).copy()
    if A.shape == (n,):
        return A[:, None, None] * np.eye(2)
    if A.shape == (n, 2, 2):
        return A
    raise ConfigError(f"cannot interpret permeability of shape {A.shape}")


@dataclass
class ModelData:
    """Coefficients of the miscible displacement model."""

    permeability: object = 1.0
    mu0: float = 1.0
    mobility_ratio: float = 1.0
    porosity: object = 1.0
    d_m: float = 0.01
    d_l: float = 0.0
    d_t: float = 0.0
    q_plus: object = ZERO_SOURCE
    q_minus: object = ZERO_SOURCE
    c_ini: Callable = staticmethod(lambda x: np.zeros(len(x)))
    T: float = 1.0

    def __post_init__(self):
        if self.mu0 <= 0 or self.mobility_ratio <= 0:
            raise ConfigError("mu0 and the mobility ratio must be positive")
        if self.d_m <= 0 or self.d_l < 0 or self.d_t < 0:
            raise ConfigError("dispersion coefficients must satisfy d_m > 0, d_l, d_t >= 0")
        if self.T <= 0:
            raise ConfigError("final time must be positive")

    def on_mesh(self, mesh) -> dict:
        K = _per_cell_tensor(self.permeability, mesh)
        if np.any(np.abs(K - K.transpose(0, 2, 1)) > 1e-14 * np.abs(K).max()):
            raise ConfigError("permeability must be symmetric")
        ev = np.linalg.eigvalsh(K)
        if np.any(ev <= 0):
            raise ConfigError("permeability must be positive definite")
        phi = _per_cell_scalar(self.porosity, mesh)
        if np.any(phi <= 0):
            raise ConfigError("porosity must be positive")
        mus = [self.mu0, self.mu0 / self.mobility_ratio]
        return {
            "K": K,
            "phi": phi,
            "phi_min": float(phi.min()),
            "phi_max": float(phi.max()),
            "alpha_A": float(ev.min() / max(mus)),
            "Lambda_A": float(ev.max() / min(mus)),
            "alpha_D": float(phi.min() * self.d_m),
        }


@dataclass
class SchemeConfig:
    w: float = 0.5
    n_steps: int = 8
    times: np.ndarray | None = None
    pressure_gd: str = "hmm"
    concentration_gd: str = "hmm"
    source_mode: str = "average"
    ellam_degree: int = 2
    solver: SolverConfig = field(default_factory=lambda: SolverConfig(tol=1e-10))
    flow: FlowConfig = field(default_factory=FlowConfig)
    max_trace_failure: float = 1e-3
    keep_history: bool = True  # False keeps only the latest p, u, U and c (plus c at t = 0)

    def __post_init__(self):
        if not (0.0 <= self.w <= 1.0):
            raise ConfigError("trapezoid weight w must lie in [0, 1]")
        if self.pressure_gd not in ("hmm", "rt0"):
            raise ConfigError(f"unknown pressure GD {self.pressure_gd!r}")
        if self.concentration_gd not in ("hmm", "p1"):
            raise ConfigError(f"unknown concentration GD {self.concentration_gd!r}")
        if self.source_mode not in ("average", "left"):
            raise ConfigError(f"unknown source mode {self.source_mode!r}")
        if self.times is not None:
            t = np.asarray(self.times, dtype=float)
            if len(t) < 2 or np.any(np.diff(t) <= 0):
                raise ConfigError("time steps must be strictly increasing")
        elif self.n_steps < 1:
            raise ConfigError("need at least one time step")

    def time_grid(self, T: float) -> np.ndarray:
        if self.times is not None:
            return np.asarray(self.times, dtype=float)
        return np.linspace(0.0, T, self.n_steps + 1)


@dataclass
class SimulationState:
    """Per-step unknowns and diagnostics (append-only)."""

    times: list = field(default_factory=list)
    p: list = field(default_factory=list)
    c: list = field(default_factory=list)
    U: list = field(default_factory=list)  # dispersion argument per diamond
    u: list = field(default_factory=list)  # tracking DarcyField
    diagnostics: list = field(default_factory=list)

    @property
    def n_steps(self) -> int:
        return len(self.c) - 1

    def monitors(self) -> dict:
        """Energy monitors of the pressure and concentration estimates."""
        d = self.diagnostics
        if not d:
            return {"grad_p_linf_l2": 0.0, "conc_energy": 0.0}
        gp = max(r["grad_p_l2"] for r in d)
        cmax = max([r["pi_c_l2"] for r in d] + [self.initial_pi_c_l2])
        dis = np.sqrt(sum(r["dt"] * r["weighted_grad_c_l2"] ** 2 for r in d))
        return {"grad_p_linf_l2": gp, "conc_energy": cmax + dis,
                "pi_c_linf_l2": cmax, "weighted_grad_c_l2l2": dis}

    initial_pi_c_l2: float = 0.0


class Simulation:
    """Coupled scheme on one mesh."""

    def __init__(self, mesh, model: ModelData, config: SchemeConfig = SchemeConfig(),
                 velocity: DarcyField | None = None):
        self.mesh = mesh
        self.velocity = velocity
        self.model = model
        self.config = config
        self.coef = model.on_mesh(mesh)
        self.phi = self.coef["phi"]
        self.K = self.coef["K"]
        self.times = config.time_grid(model.T)
        if config.pressure_gd == "rt0" or config.concentration_gd == "p1":
            if not mesh.is_triangular:
                raise ConfigError("RT0 / P1 discretisations need a triangulation")
        self.gd_p = HmmGd(mesh) if config.pressure_gd == "hmm" else None
        if config.concentration_gd == "hmm":
            self.gd_c: GradientDiscretisation = (
                self.gd_p if self.gd_p is not None else HmmGd(mesh))
        else:
            self.gd_c = P1Gd(mesh)
        self.quad_c = self.gd_c.exact_degree
        self.ellam_quad = diamond_quadrature(mesh, config.ellam_degree)
        P, _, _ = self.gd_c.reconstruct(self.ellam_quad.hf, self.ellam_quad.points)
        self._P_src = P.tocsr()
        times = self.times
        self.M_plus = model.q_plus.bound(mesh, times)
        self.M_minus = model.q_minus.bound(mesh, times)

    # -- helpers -----------------------------------------------------------------------
    def sources(self, n: int):
        mode = self.config.source_mode
        qp = source_average(self.model.q_plus, n, self.times, mode, self.mesh)
        qm = source_average(self.model.q_minus, n, self.times, mode, self.mesh)
        if np.any(qm < 0):
            raise ConfigError("q- must be non-negative (production wells)")
        return qp, qm

    def cell_concentration(self, c) -> np.ndarray:
        """``Pi_C c`` at the cell points (cell value for HMM)."""
        if isinstance(self.gd_c, HmmGd):
            return np.asarray(c[: self.mesh.n_cells])
        return self.gd_c.evaluate_pi(c, self.mesh.cell_points)

    def diffusion_per_cell(self, c) -> np.ndarray:
        mu = viscosity(self.cell_concentration(c), self.model.mu0, self.model.mobility_ratio)
        return self.K / np.asarray(mu)[:, None, None]

    def initial_concentration(self) -> np.ndarray:
        return self.gd_c.interpolate_initial(self.model.c_ini)

    # -- pressure --------------------------------------------------------------------
    def pressure_step(self, c, qp, qm):
        """Solve the pressure equation; return p, tracking field, U_P and a report."""
        mesh = self.mesh
        A_cell = self.diffusion_per_cell(c)
        src = qp - qm
        cell_int = src * mesh.cell_areas
        info = {}
        if self.config.pressure_gd == "hmm":
            gd = self.gd_p
            A_hf = A_cell[mesh.hf_cell]
            S = gd.stiffness(A_hf)
            rhs = np.zeros(gd.n_dofs)
            rhs[: mesh.n_cells] = cell_int
            m = gd.mean_functional()
            p, sinfo = solve_zero_mean(S, rhs, m, self.config.solver,
                                       return_info=True, ritz=True)
            raw = gd.fluxes(p, A_hf)
            fluxes = raw.symmetrized()
            u = reconstruct(mesh, fluxes)
            grad = gd.diamond_gradient(p)
            U = np.einsum("kij,kj->ki", A_hf, grad)
            fv = check_fv_relations(fluxes, cell_int)
            fv_raw = check_fv_relations(raw, cell_int)
            info.update(
                fv_balance=fv.balance, fv_conservativity=fv.conservativity,
                fv_boundary=fv.boundary, fv_scale=fv.scale,
                fv_raw_conservativity=fv_raw.conservativity,
                fv_raw_boundary=fv_raw.boundary,
            )
            energy = float(p @ (S @ p))
            grad_l2 = float(np.sqrt(mesh.diamonds.areas @ (grad ** 2).sum(axis=1)))
            mean = float(m @ p)
            info["raw_fluxes"] = raw
            info["fluxes"] = fluxes
        else:
            gd = Rt0MixedGd(mesh, A_cell)
            rhs = cell_int.copy()
            p, sinfo = gd.solve_pressure(rhs, self.config.solver, return_info=True)
            u = gd.darcy(p)
            U = -u.centroid_velocity()
            # grad_P p = -A^{-1} u ; energy = int A grad p . grad p = int A^{-1} u . u
            q = diamond_quadrature(mesh, 2)
            uq = u.velocity_in(q.hf, q.points)
            Ainv = np.linalg.inv(A_cell)[mesh.hf_cell[q.hf]]
            gq = -np.einsum("pij,pj->pi", Ainv, uq)
            energy = float(q.weights @ np.einsum("pi,pi->p", uq, -gq))
            grad_l2 = float(np.sqrt(q.weights @ (gq ** 2).sum(axis=1)))
            mean = float(gd.mean_functional() @ p)
            info["fluxes"] = FluxSet(mesh, u.face_flux)
        info.update(
            p_iterations=sinfo.iterations, p_residual=sinfo.residual,
            p_ritz_min=sinfo.ritz_min, p_deflected=sinfo.deflected,
            p_mean=mean, p_energy=energy, p_work=float(rhs @ p), grad_p_l2=grad_l2,
        )
        return p, u, U, info

    def _prescribed_step(self):
        """Pure transport: the tracking field is given, the pressure is unused."""
        n = self.gd_p.n_dofs if self.gd_p is not None else self.mesh.n_cells
        u = self.velocity
        info = {"grad_p_l2": 0.0, "p_iterations": 0, "p_residual": 0.0, "p_mean": 0.0}
        return np.zeros(n), u, u.centroid_velocity(), info

    # -- concentration --------------------------------------------------------------
    def ellam_rhs(self, c, u: DarcyField, dt: float, qp_n=None, qm_n=None, w: float | None = None):
        """Traced right-hand side ``sum_q w_q g(x_q) Pi_C e_i(F_dt(x_q))`` with
        ``g = phi Pi c - w dt q- Pi c + w dt q+`` at the source nodes."""
        mesh = self.mesh
        q = self.ellam_quad
        cell = mesh.hf_cell[q.hf]
        pic = self._P_src @ c
        g = self.phi[cell] * pic
        w = self.config.w if w is None else w
        if qm_n is not None and w != 0.0:
            g = g - w * dt * qm_n[cell] * pic
        if qp_n is not None and w != 0.0:
            g = g + w * dt * qp_n[cell]
        tracer = Tracer(u, self.phi, self.config.flow)
        res = tracer.trace(q.points, dt, hf=q.hf)
        fail = float(np.mean((res.status & CLAMPED) != 0))
        crit = int(np.count_nonzero(res.status & CRITICAL))
        if fail > self.config.max_trace_failure:
            raise StepError(f"{100 * fail:.3f}% of ELLAM nodes left the domain")
        P, _, _ = self.gd_c.reconstruct(res.end_hf, res.end)
        b = P.T @ (q.weights * g)
        return b, {"trace_fail": fail, "trace_critical": crit,
                   "trace_events": int(res.n_events.sum()), "tracer": tracer}

    def concentration_step(self, c, u, U, dt, qp_n, qm_n, qp_np1, qm_np1):
        mesh = self.mesh
        gd = self.gd_c
        w = self.config.w
        D = dispersion_tensor(U, self.phi[mesh.hf_cell], self.model.d_m,
                              self.model.d_l, self.model.d_t)
        Mphi = gd.mass(self.phi)
        KD = gd.stiffness(D)
        lhs = Mphi + dt * KD
        if w < 1.0 and np.any(qm_np1):
            lhs = lhs + (1.0 - w) * dt * gd.mass(qm_np1)
        b, tinfo = self.ellam_rhs(c, u, dt, qp_n, qm_n)
        if w < 1.0 and np.any(qp_np1):
            b = b + (1.0 - w) * dt * gd.load(qp_np1)
        try:
            c_new, sinfo = solve_spd(lhs.tocsr(), b, self.config.solver,
                                     return_info=True, ritz=True)
        except SolverError as exc:
            raise StepError(f"concentration solve failed: {exc}") from exc
        tinfo.update(c_iterations=sinfo.iterations, c_residual=sinfo.residual,
                     c_ritz_min=sinfo.ritz_min)
        return c_new, D, tinfo

    # -- loop ----------------------------------------------------------------------------
    def run(self, callback=None) -> SimulationState:
        mesh = self.mesh
        st = SimulationState()
        c = self.initial_concentration()
        st.times.append(float(self.times[0]))
        st.c.append(c)
        st.initial_pi_c_l2 = self.pi_norm(c)
        N = len(self.times) - 1
        for n in range(N):
            t0, t1 = self.times[n], self.times[n + 1]
            dt = t1 - t0
            qp_n, qm_n = self.sources(n)
            qp_1, qm_1 = self.sources(n + 1)
            if self.velocity is None:
                p, u, U, pinfo = self.pressure_step(c, qp_n, qm_n)
            else:
                p, u, U, pinfo = self._prescribed_step()
            c_new, D, cinfo = self.concentration_step(c, u, U, dt, qp_n, qm_n, qp_1, qm_1)
            dv = validate(u, div_bound=self.M_plus + self.M_minus)
            tracer = cinfo.pop("tracer")
            diag = {
                "step": n + 1, "time": float(t1), "dt": float(dt),
                "mass": self.mass(c_new),
                "pi_c_l2": self.pi_norm(c_new),
                "weighted_grad_c_l2": self.weighted_grad_norm(c_new, U),
                "div_max": dv.div_max, "div_bound": dv.div_bound,
                "normal_jump": dv.normal_jump, "boundary_trace": dv.boundary_trace,
                "div_consistency": dv.div_consistency,
                "c1_T": tracer.c1(self.model.T),
            }
            diag.update({k: v for k, v in pinfo.items() if k not in ("raw_fluxes", "fluxes")})
            diag.update(cinfo)
            st.diagnostics.append(diag)
            if self.config.keep_history:
                st.p.append(p)
                st.u.append(u)
                st.U.append(U)
                st.c.append(c_new)
            else:
                st.p, st.u, st.U, st.c = [p], [u], [U], [st.c[0], c_new]
            st.times.append(float(t1))
            if callback is not None:
                callback(n, p, c_new, u, pinfo, diag)
            c = c_new
        return st

    # -- diagnostics ---------------------------------------------------------------------
    def mass(self, c) -> float:
        """``int phi Pi_C c``."""
        q, P, _, _ = self.gd_c.quadrature(max(1, 2 * self.gd_c.pi_degree))
        return float((q.weights * self.phi[self.mesh.hf_cell[q.hf]]) @ (P @ c))

    def pi_norm(self, c) -> float:
        q, P, _, _ = self.gd_c.quadrature(self.quad_c)
        v = P @ c
        return float(np.sqrt(q.weights @ v ** 2))

    def weighted_grad_norm(self, c, U) -> float:
        """``|(1 + |U_P|)^{1/2} grad_C c|_{L^2}`` (U per diamond)."""
        q, _, Gx, Gy = self.gd_c.quadrature(self.quad_c)
        g2 = (Gx @ c) ** 2 + (Gy @ c) ** 2
        wgt = 1.0 + np.linalg.norm(U, axis=1)[q.hf]
        return float(np.sqrt(q.weights @ (wgt * g2)))


def run(model: ModelData, mesh, config: SchemeConfig = SchemeConfig()) -> SimulationState:
    return Simulation(mesh, model, config).run()
