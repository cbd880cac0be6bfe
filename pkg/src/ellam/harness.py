"""Convergence studies, invariant suites and report export.

A :class:`StudySpec` names a scenario, a refinement family and the
discretisation pair; :func:`run_convergence` and :func:`run_invariants`
return a :class:`Report` with a per-level table, observed orders, a ledger
of checks and measured constants.
"""

from __future__ import annotations

import csv
import io
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .darcy import DarcyField, validate
from .fe import P1Gd
from .flow import FlowConfig, Tracer
from .flow_checks import (
    duality_check, duality_matrices, flow_constant, jacobian_checks, round_trip,
    translation_constant, verify_lemmas,
)
from .gdm import coercivity_constant, conformity_defect, consistency_defect, gd_norm
from .hmm import HmmGd, check_fv_relations
from .linalg import SolverConfig, solve_zero_mean, symmetry_defect
from .mesh import build_cartesian, build_triangulated, regularity
from .quadrature import diamond_quadrature
from .scheme import ModelData, SchemeConfig, Simulation, Well, WellSource

__all__ = [
    "SCENARIOS",
    "Check",
    "Report",
    "StudySpec",
    "coupled_wells_model",
    "zero_source_model",
    "pure_transport_model",
    "vortex",
    "observed_orders",
    "solve_elliptic",
    "elliptic_errors",
    "l2_projection",
    "cauchy_differences",
    "gd_quality",
    "gd_quality_study",
    "run_convergence",
    "run_invariants",
    "export",
    "export_csv",
    "export_vtk",
    "output_dir",
]

SCENARIOS = ("elliptic-manufactured", "pure-transport", "coupled-wells", "zero-source")
GD_PAIRS = ("hmm", "fe")
OUTPUT_ENV = "ELLAM_OUTPUT_DIR"


def output_dir(default: str | os.PathLike | None = None) -> Path:
    """Output directory: ``$ELLAM_OUTPUT_DIR`` if set, else ``default``."""
    env = os.environ.get(OUTPUT_ENV)
    return Path(env if env else (default if default is not None else "ellam-output"))


# -- scenarios ------------------------------------------------------------------------

def coupled_wells_model(T: float = 0.1, mobility_ratio: float = 4.0, rate: float = 1.0,
                        radius: float = 0.1, layered: bool = True) -> ModelData:
    """Injection at (0.15, 0.15), production at (0.85, 0.85) on the unit
    square; two porosity layers split at ``y = 0.5``."""
    phi = (lambda x: np.where(x[:, 1] < 0.5, 0.2, 0.25)) if layered else 0.2
    return ModelData(
        permeability=1.0, mu0=1.0, mobility_ratio=mobility_ratio, porosity=phi,
        d_m=0.01, d_l=0.05, d_t=0.005,
        q_plus=WellSource([Well((0.15, 0.15), radius, rate)]),
        q_minus=WellSource([Well((0.85, 0.85), radius, rate)]),
        c_ini=lambda x: np.zeros(len(x)), T=T,
    )


def _bump_ic(x):
    r2 = ((x - 0.5) ** 2).sum(axis=1) / 0.3 ** 2
    out = np.zeros(len(x))
    ins = r2 < 1
    out[ins] = np.exp(1.0 - 1.0 / (1.0 - r2[ins]))
    return out


def zero_source_model(T: float = 0.1, c_ini=None) -> ModelData:
    """No wells: the velocity vanishes and ``c`` only diffuses."""
    return ModelData(permeability=1.0, mu0=1.0, mobility_ratio=4.0,
                     porosity=lambda x: np.where(x[:, 1] < 0.5, 0.2, 0.25),
                     d_m=0.01, d_l=0.05, d_t=0.005,
                     c_ini=_bump_ic if c_ini is None else c_ini, T=T)


def vortex(x):
    """Divergence-free cellular flow with zero normal trace on the unit square."""
    x = np.atleast_2d(x)
    return np.column_stack([
        np.pi * np.sin(np.pi * x[:, 0]) * np.cos(np.pi * x[:, 1]),
        -np.pi * np.cos(np.pi * x[:, 0]) * np.sin(np.pi * x[:, 1]),
    ])


def _gauss_ic(x):
    return np.exp(-((x[:, 0] - 0.35) ** 2 + (x[:, 1] - 0.5) ** 2) / 0.01)


def pure_transport_model(T: float = 0.1) -> ModelData:
    """Advection of a Gaussian by :func:`vortex` (negligible diffusion)."""
    return ModelData(porosity=1.0, d_m=1e-9, c_ini=_gauss_ic, T=T)


def _exact_transport(points, T):
    """``c_ini(F_{-T} x)`` for the analytic vortex, by a high-accuracy ODE solve."""
    from scipy.integrate import solve_ivp

    n = len(points)

    def rhs(_, y):
        return -vortex(y.reshape(n, 2)).ravel()

    sol = solve_ivp(rhs, (0.0, T), np.asarray(points, dtype=float).ravel(),
                    method="DOP853", rtol=1e-11, atol=1e-12)
    return _gauss_ic(sol.y[:, -1].reshape(n, 2))


def _mesh(n: int, gd: str):
    return build_cartesian(n, n) if gd == "hmm" else build_triangulated(n, n)


def _scheme_config(spec: "StudySpec", n: int) -> SchemeConfig:
    o = dict(spec.overrides)
    steps = int(o.pop("steps_per_level", 1) * n) if "n_steps" not in o else int(o.pop("n_steps"))
    o.pop("T", None)
    pgd, cgd = ("hmm", "hmm") if spec.gd == "hmm" else ("rt0", "p1")
    extra = {}
    if "w" in o:
        extra["w"] = float(o["w"])
    if "max_trace_failure" in o:
        extra["max_trace_failure"] = float(o["max_trace_failure"])
    # forward node tracing needs many nodes per cell once diffusion is negligible
    default_degree = 8 if spec.scenario == "pure-transport" else 2
    extra["ellam_degree"] = int(o.get("ellam_degree", default_degree))
    return SchemeConfig(n_steps=steps, pressure_gd=pgd, concentration_gd=cgd,
                        solver=SolverConfig(tol=float(o.get("solver_tol", 1e-10))), **extra)


def _model(spec: "StudySpec") -> ModelData:
    T = float(spec.overrides.get("T", 0.1))
    if spec.scenario == "coupled-wells":
        return coupled_wells_model(T=T)
    if spec.scenario == "zero-source":
        return zero_source_model(T=T, c_ini=lambda x: np.zeros(len(x)))
    if spec.scenario == "pure-transport":
        return pure_transport_model(T=T)
    raise ValueError(f"scenario {spec.scenario!r} has no time-dependent model")


# -- reports --------------------------------------------------------------------------

@dataclass
class Check:
    name: str
    passed: bool
    value: float
    threshold: float
    detail: str = ""

    def line(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        return f"{flag} {self.name}: {self.value:.3e} (threshold {self.threshold:.3e}) {self.detail}".rstrip()


@dataclass
class Report:
    """Per-level table, observed orders, check ledger and measured constants."""

    title: str
    rows: list = field(default_factory=list)
    orders: dict = field(default_factory=dict)
    checks: list = field(default_factory=list)
    constants: dict = field(default_factory=dict)
    runtime: float = 0.0

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def exit_code(self) -> int:
        return 0 if self.passed else 1

    def check(self, name: str, value: float, threshold: float, passed: bool | None = None,
              detail: str = "") -> Check:
        """Record ``value <= threshold`` (or an explicit verdict)."""
        value = float(value)
        ok = (value <= threshold) if passed is None else bool(passed)
        c = Check(name, bool(ok and np.isfinite(value)), value, float(threshold), detail)
        self.checks.append(c)
        return c

    @property
    def columns(self) -> list:
        cols = []
        for r in self.rows:
            for k in r:
                if k not in cols:
                    cols.append(k)
        return cols

    def table_csv(self) -> str:
        return _csv_text(self.columns, self.rows)

    def ledger(self) -> str:
        return "\n".join(c.line() for c in self.checks)

    def summary(self) -> str:
        out = [f"# {self.title}"]
        if self.rows:
            out.append(self.table_csv().rstrip())
        for k, v in self.orders.items():
            out.append(f"order {k}: " + ", ".join(f"{x:.3f}" for x in v))
        for k, v in self.constants.items():
            out.append(f"{k} = {_fmt(v)}")
        if self.checks:
            out.append(self.ledger())
        out.append(f"runtime {self.runtime:.2f} s, {'all checks pass' if self.passed else 'FAILURES'}")
        return "\n".join(out)

    def write(self, directory) -> list[Path]:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        slug = self.title.lower().replace(" ", "-").replace("/", "-")
        files = [d / f"{slug}.csv", d / f"{slug}-ledger.txt"]
        files[0].write_text(self.table_csv())
        files[1].write_text(self.ledger() + "\n")
        return files


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return "%.17g" % v
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def _csv_text(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c, "")) for c in columns])
    return buf.getvalue()


def observed_orders(h, errors) -> list[float]:
    """``log(e_i / e_{i+1}) / log(h_i / h_{i+1})`` for consecutive levels."""
    h = np.asarray(h, dtype=float)
    e = np.asarray(errors, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        return [float(np.log(e[i] / e[i + 1]) / np.log(h[i] / h[i + 1]))
                for i in range(len(e) - 1)]


def _strictly_decreasing(v) -> bool:
    v = np.asarray(v, dtype=float)
    return bool(np.all(np.diff(v) < 0))


# -- specification --------------------------------------------------------------------

@dataclass
class StudySpec:
    """A refinement family, a scenario and a discretisation pair.

    ``gd`` is ``"hmm"`` (HMM pressure and concentration on Cartesian grids)
    or ``"fe"`` (RT0 pressure and P1 concentration on triangulations; P1
    for the elliptic scenario).
    """

    scenario: str = "coupled-wells"
    levels: tuple = (8, 16, 32)
    gd: str = "hmm"
    overrides: dict = field(default_factory=dict)
    output_dir: str | None = None
    seed: int = 0
    min_order_pi: float = 1.5
    min_order_grad: float = 0.9

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}; expected one of {SCENARIOS}")
        if self.gd not in GD_PAIRS:
            raise ValueError(f"unknown GD pair {self.gd!r}; expected one of {GD_PAIRS}")
        self.levels = tuple(int(n) for n in self.levels)
        if not self.levels or any(n < 1 for n in self.levels):
            raise ValueError("levels must be positive cell counts per direction")
        if list(self.levels) != sorted(set(self.levels)):
            raise ValueError("levels must be strictly increasing")


# -- elliptic manufactured problem ----------------------------------------------------

def _pbar(x):
    return np.cos(np.pi * x[:, 0]) * np.cos(np.pi * x[:, 1])


def _grad_pbar(x):
    return np.column_stack([
        -np.pi * np.sin(np.pi * x[:, 0]) * np.cos(np.pi * x[:, 1]),
        -np.pi * np.cos(np.pi * x[:, 0]) * np.sin(np.pi * x[:, 1]),
    ])


def _f_pbar(x):
    return 2 * np.pi ** 2 * _pbar(x)


def solve_elliptic(gd, f, A=None, config: SolverConfig = SolverConfig(tol=1e-12)):
    """Zero-mean solution of ``(A grad p, grad v) = (f, Pi v)`` for all ``v``."""
    S = gd.stiffness(A)
    rhs = gd.load(f, degree=6)
    return solve_zero_mean(S, rhs, gd.mean_functional(), config)


def l2_projection(gd, f, degree: int = 6) -> np.ndarray:
    """Dofs whose reconstruction is the L2 projection of ``f`` onto the range
    of ``Pi`` (dofs not seen by ``Pi`` are set to zero)."""
    from .linalg import solve_spd

    M = gd.mass(degree=degree).tocsr()
    active = np.flatnonzero(M.diagonal() > 0)
    b = gd.load(f, degree=degree)
    out = np.zeros(gd.n_dofs)
    out[active] = solve_spd(M[active][:, active], b[active], SolverConfig(tol=1e-13))
    return out


def elliptic_errors(gd) -> dict:
    """Errors of the manufactured problem ``p = cos(pi x) cos(pi y)``.

    ``pi_error`` is the distance of ``Pi p`` to the L2 projection of ``p``
    onto the range of ``Pi``, ``l2_error`` the distance to ``p`` itself and
    ``grad_error`` the gradient error.
    """
    p = solve_elliptic(gd, _f_pbar)
    e = p - l2_projection(gd, _pbar)
    q, P, Gx, Gy = gd.quadrature(6)
    ex = _pbar(q.points)
    gx = _grad_pbar(q.points)
    return {
        "pi_error": float(np.sqrt(q.weights @ (P @ e) ** 2)),
        "l2_error": float(np.sqrt(q.weights @ (P @ p - ex) ** 2)),
        "grad_error": float(np.sqrt(q.weights @ ((Gx @ p - gx[:, 0]) ** 2 + (Gy @ p - gx[:, 1]) ** 2))),
    }


def _elliptic_gd(n: int, gd: str):
    return HmmGd(build_cartesian(n, n)) if gd == "hmm" else P1Gd(build_triangulated(n, n))


# -- coupled studies ------------------------------------------------------------------

def cauchy_differences(coarse, fine, which: str = "c") -> float:
    """``|Pi X_coarse - Pi X_fine|_{L2(Q)}`` for nested meshes and nested
    uniform time grids (``X`` is ``c`` or ``p``; both piecewise constant in
    time with the value at the right end of each interval)."""
    (sc, stc), (sf, stf) = coarse, fine
    if stf.n_steps % stc.n_steps:
        raise ValueError("time grids are not nested")
    r = stf.n_steps // stc.n_steps
    q = diamond_quadrature(sf.mesh, 2)
    gdc = sc.gd_c if which == "c" else sc.gd_p
    gdf = sf.gd_c if which == "c" else sf.gd_p
    if which == "p" and (gdc is None or gdf is None):
        raise ValueError("pressure differences need the HMM pressure space")
    hfc = sc.mesh.locate_diamond(q.points)
    Pc = gdc.reconstruct(hfc, q.points)[0]
    Pf = gdf.reconstruct(q.hf, q.points)[0]
    vc, vf = (stc.c[1:], stf.c[1:]) if which == "c" else (stc.p, stf.p)
    tot = 0.0
    for j in range(stf.n_steps):
        dt = stf.times[j + 1] - stf.times[j]
        d = Pf @ vf[j] - Pc @ vc[j // r]
        tot += dt * float(q.weights @ d ** 2)
    return float(np.sqrt(tot))


def _transport_error(sim, st) -> float:
    q = diamond_quadrature(sim.mesh, 4)
    P = sim.gd_c.reconstruct(q.hf, q.points)[0]
    ex = _exact_transport(q.points, sim.model.T)
    return float(np.sqrt(q.weights @ (P @ st.c[-1] - ex) ** 2))


def run_convergence(spec: StudySpec) -> Report:
    """Errors (manufactured, transport) or inter-level differences (coupled)
    along the refinement family."""
    if len(spec.levels) < 2:
        raise ValueError("a convergence study needs at least two refinement levels")
    t0 = time.perf_counter()
    rep = Report(f"convergence {spec.scenario} {spec.gd}")
    h = [1.0 / n for n in spec.levels]
    if spec.scenario == "elliptic-manufactured":
        errs = []
        for n in spec.levels:
            gd = _elliptic_gd(n, spec.gd)
            e = elliptic_errors(gd)
            errs.append(e)
            rep.rows.append({"level": n, "h": 1.0 / n, **e})
        for k in ("pi_error", "l2_error", "grad_error"):
            v = [e[k] for e in errs]
            rep.orders[k] = observed_orders(h, v)
            rep.check(f"{k} strictly decreasing", 0.0, 0.0, passed=_strictly_decreasing(v),
                      detail=" ".join(f"{x:.3e}" for x in v))
        for k, floor in (("pi_error", spec.min_order_pi), ("grad_error", spec.min_order_grad)):
            o = min(rep.orders[k])
            rep.check(f"{k} observed order", o, floor, passed=o >= floor, detail="(floor)")
    else:
        model = _model(spec)
        runs = []
        for n in spec.levels:
            mesh = _mesh(n, spec.gd)
            velocity = DarcyField.interpolate(mesh, vortex) if spec.scenario == "pure-transport" else None
            sim = Simulation(mesh, model, _scheme_config(spec, n), velocity=velocity)
            st = sim.run()
            runs.append((sim, st))
            row = {"level": n, "h": 1.0 / n, "n_steps": st.n_steps}
            row.update(st.monitors())
            d = st.diagnostics
            row["mass_change"] = abs(d[-1]["mass"] - sim.mass(st.c[0]))
            row["div_max"] = max(r["div_max"] for r in d)
            row["trace_fail"] = max(r["trace_fail"] for r in d)
            if spec.scenario == "zero-source":
                row["max_abs_c"] = float(max(np.abs(c).max() for c in st.c))
                row["max_abs_p"] = float(max(np.abs(p).max() for p in st.p))
            if spec.scenario == "pure-transport":
                row["error"] = _transport_error(sim, st)
            rep.rows.append(row)
        if spec.scenario == "zero-source":
            worst = max(max(r["max_abs_c"], r["max_abs_p"]) for r in rep.rows)
            rep.check("zero-source solution identically zero", worst, 0.0)
        elif spec.scenario == "pure-transport":
            v = [r["error"] for r in rep.rows]
            rep.orders["error"] = observed_orders(h, v)
            rep.check("transport error strictly decreasing", 0.0, 0.0, passed=_strictly_decreasing(v))
        else:
            dc = [cauchy_differences(runs[i], runs[i + 1], "c") for i in range(len(runs) - 1)]
            for i, v in enumerate(dc):
                rep.rows[i + 1]["cauchy_c"] = v
            rep.check("Cauchy differences of Pi c decrease", 0.0, 0.0, passed=_strictly_decreasing(dc),
                      detail=" ".join(f"{x:.4e}" for x in dc))
            if spec.gd == "hmm":
                dp = [cauchy_differences(runs[i], runs[i + 1], "p") for i in range(len(runs) - 1)]
                for i, v in enumerate(dp):
                    rep.rows[i + 1]["cauchy_p"] = v
                rep.check("Cauchy differences of Pi p decrease", 0.0, 0.0,
                          passed=_strictly_decreasing(dp), detail=" ".join(f"{x:.4e}" for x in dp))
            for key in ("grad_p_linf_l2", "conc_energy"):
                v = np.array([r[key] for r in rep.rows])
                ratio = float(v.max() / v.min()) if v.min() > 0 else np.inf
                rep.check(f"{key} variation across levels", ratio, 2.0,
                          passed=ratio < 2.0)
            rep.constants["M_div"] = max(r["div_max"] for r in rep.rows)
            rep.constants["C1_T"] = max(r["c1_T"] for _, st in runs for r in st.diagnostics)
    rep.runtime = time.perf_counter() - t0
    if spec.output_dir:
        rep.write(output_dir(spec.output_dir))
    return rep


# -- GD quality -----------------------------------------------------------------------

def _phi1(x):
    return np.cos(np.pi * x[:, 0]) * np.cos(np.pi * x[:, 1])


def _gphi1(x):
    return np.column_stack([-np.pi * np.sin(np.pi * x[:, 0]) * np.cos(np.pi * x[:, 1]),
                            -np.pi * np.cos(np.pi * x[:, 0]) * np.sin(np.pi * x[:, 1])])


def _phi2(x):
    return np.exp(x[:, 0]) * np.sin(np.pi * x[:, 1])


def _gphi2(x):
    return np.column_stack([np.exp(x[:, 0]) * np.sin(np.pi * x[:, 1]),
                            np.pi * np.exp(x[:, 0]) * np.cos(np.pi * x[:, 1])])


def _psi_grad(x):
    return _gphi1(x)


def _div_psi_grad(x):
    return -2 * np.pi ** 2 * _phi1(x)


def _div_zero(x):
    return np.zeros(len(x))


#: Fixed test battery: smooth functions for S_D, zero-normal-trace fields for W_D.
CONSISTENCY_BATTERY = ((_phi1, _gphi1), (_phi2, _gphi2))
CONFORMITY_BATTERY = ((vortex, _div_zero), (_psi_grad, _div_psi_grad))


def gd_quality(gd) -> dict:
    """``C_D`` and the largest ``S_D`` / ``W_D`` over the fixed battery."""
    return {
        "C_D": coercivity_constant(gd),
        "S_D": max(consistency_defect(gd, f, g) for f, g in CONSISTENCY_BATTERY),
        "W_D": max(conformity_defect(gd, f, g) for f, g in CONFORMITY_BATTERY),
    }


def gd_quality_study(family: str, levels=(4, 8, 16, 32)) -> Report:
    """GD quality along a refinement family (``"hmm"`` or ``"p1"``)."""
    t0 = time.perf_counter()
    rep = Report(f"gd quality {family}")
    for n in levels:
        gd = HmmGd(build_cartesian(n, n)) if family == "hmm" else P1Gd(build_triangulated(n, n))
        rep.rows.append({"level": n, "h": 1.0 / n, **gd_quality(gd)})
    cd = np.array([r["C_D"] for r in rep.rows])
    rep.check("C_D variation", float(cd.max() / cd.min() - 1.0), 0.2)
    for k in ("S_D", "W_D"):
        v = [r[k] for r in rep.rows]
        rep.check(f"{k} strictly decreasing", 0.0, 0.0, passed=_strictly_decreasing(v),
                  detail=" ".join(f"{x:.3e}" for x in v))
    rep.constants["C_D"] = float(cd.max())
    rep.runtime = time.perf_counter() - t0
    return rep


# -- invariant suites -----------------------------------------------------------------

def _rotation(x):
    x = np.atleast_2d(x)
    return np.column_stack([-(x[:, 1] - 0.5), x[:, 0] - 0.5])


def run_invariants(spec: StudySpec, mutation: str | None = None,
                   n_points: int = 10_000, duality_max_cells: int = 16) -> Report:
    """Invariant suites of every module on each mesh of the family.

    ``mutation="flux-sign"`` flips the sign of one internal flux before the
    finite-volume checks (the conservativity ledger entry must then fail).
    """
    t0 = time.perf_counter()
    rep = Report(f"invariants {spec.gd}")
    rng = np.random.default_rng(spec.seed)
    tol = float(spec.overrides.get("solver_tol", 1e-10))
    for n in spec.levels:
        mesh = _mesh(n, spec.gd)
        tag = f"[{n}x{n}]"
        # mesh
        nrm = np.bincount(mesh.hf_cell, weights=mesh.hf_length * mesh.hf_normal[:, 0], minlength=mesh.n_cells)
        nrm2 = np.bincount(mesh.hf_cell, weights=mesh.hf_length * mesh.hf_normal[:, 1], minlength=mesh.n_cells)
        rep.check(f"{tag} mesh closure", float(np.max(np.hypot(nrm, nrm2))), 1e-12 * mesh.diameter)
        dsum = np.bincount(mesh.hf_cell, weights=mesh.diamonds.areas, minlength=mesh.n_cells)
        rep.check(f"{tag} diamonds tile cells", float(np.max(np.abs(dsum - mesh.cell_areas))), 1e-14)
        rep.constants[f"rho {tag}"] = regularity(mesh).rho
        # pressure GD and finite-volume relations
        model = coupled_wells_model(radius=max(0.1, 0.5 / n))
        sim = Simulation(mesh, model, _scheme_config(spec, max(n, 2)))
        c0 = sim.initial_concentration()
        qp, qm = sim.sources(0)
        p, u, U, info = sim.pressure_step(c0, qp, qm)
        if spec.gd == "hmm":
            gd = sim.gd_p
            S = gd.stiffness(sim.K[mesh.hf_cell])
            rep.check(f"{tag} stiffness symmetry", symmetry_defect(S), 1e-12)
            rep.check(f"{tag} pressure Ritz min > 0", float(info["p_ritz_min"]), 0.0,
                      passed=info["p_ritz_min"] > 0)
            rep.check(f"{tag} gd norm of constants", abs(gd_norm(gd, np.ones(gd.n_dofs)) - mesh.area), 1e-12)
            fl = info["fluxes"]
            if mutation == "flux-sign":
                vals = fl.values.copy()
                j = int(np.flatnonzero(mesh.face_halffaces[:, 1] >= 0)[0])
                vals[mesh.face_halffaces[j, 0]] *= -1.0
                fl = type(fl)(mesh, vals)
            fv = check_fv_relations(fl, (qp - qm) * mesh.cell_areas)
            rep.check(f"{tag} FV conservativity", fv.conservativity, 1e-12 * max(fv.scale, 1e-300))
            rep.check(f"{tag} FV balance", fv.balance, 10 * tol * max(fv.scale, 1e-300))
            rep.check(f"{tag} FV boundary fluxes", fv.boundary, 1e-12)
        else:
            rep.check(f"{tag} pressure Ritz min > 0", float(info["p_ritz_min"]), 0.0,
                      passed=info["p_ritz_min"] > 0)
        rep.check(f"{tag} zero-mean pressure", abs(info["p_mean"]), 10 * tol)
        # Darcy field
        dv = validate(u, div_bound=sim.M_plus + sim.M_minus)
        rep.check(f"{tag} Darcy normal jump", dv.normal_jump, 1e-11)
        rep.check(f"{tag} Darcy boundary trace", dv.boundary_trace, 1e-11)
        rep.check(f"{tag} Darcy div = cell flux sum", dv.div_consistency, 1e-12 * max(1.0, dv.div_max))
        rep.check(f"{tag} Darcy div bound", dv.div_max, dv.div_bound + 1e-9)
        # flow
        rot = Tracer(DarcyField.interpolate(mesh, _rotation), np.ones(mesh.n_cells))
        r = 0.4 * np.sqrt(rng.random(n_points))
        a = 2 * np.pi * rng.random(n_points)
        pts = 0.5 + np.column_stack([r * np.cos(a), r * np.sin(a)])
        rt = round_trip(rot, pts, 0.5)
        rep.check(f"{tag} round trip (rotation)", 1.0 - rt.fraction_within, 1e-3,
                  detail=f"max err {rt.max_error:.2e}, flagged {rt.n_flagged}")
        tr = Tracer(u, sim.phi, FlowConfig())
        dt = model.T / max(n, 2)
        rt2 = round_trip(tr, pts, dt)
        rep.check(f"{tag} round trip (reconstructed)", 1.0 - rt2.fraction_within, 1e-3,
                  detail=f"max err {rt2.max_error:.2e}, flagged {rt2.n_flagged}")
        jc = jacobian_checks(tr, pts, dt)
        rep.check(f"{tag} Jacobian identity", jc["identity_residual"], 1e-8)
        rep.check(f"{tag} Jacobian bound violations", jc["bound_violations"], 0)
        rep.constants[f"C1 {tag}"] = jc["bound"]
        rep.constants[f"M_F {tag}"] = flow_constant(tr, sim.gd_c, sim.gd_c.interpolate_smooth(
            lambda y: np.sin(np.pi * y[:, 0]) * np.cos(np.pi * y[:, 1])), dt)
        rep.constants[f"R {tag}"] = translation_constant(tr, rng.random(mesh.n_cells), dt)["R"]
        if mesh.n_cells <= duality_max_cells:
            res = duality_matrices(tr, dt)
            dc = duality_check([res], [dt], rng=rng)
            rep.check(f"{tag} transport duality", dc["max_relative"], 1e-6)
            rep.check(f"{tag} duality remainder bound", dc["r_max"], dc["r_bound"])
        # scheme: zero-source mass conservation and trivial solution
        zs = Simulation(mesh, zero_source_model(T=0.02), _scheme_config(spec, 4))
        st = zs.run()
        m0 = zs.mass(st.c[0])
        drift = max(abs(r["mass"] - m0) for r in st.diagnostics)
        rep.check(f"{tag} mass conservation (q = 0)", drift, st.n_steps * 10 * tol * max(abs(m0), 1e-300))
        z0 = Simulation(mesh, zero_source_model(T=0.02, c_ini=lambda y: np.zeros(len(y))),
                        _scheme_config(spec, 2)).run()
        rep.check(f"{tag} zero data gives zero solution", max(np.abs(c).max() for c in z0.c), 0.0)
        rep.check(f"{tag} concentration Ritz min > 0", min(r["c_ritz_min"] for r in st.diagnostics), 0.0,
                  passed=min(r["c_ritz_min"] for r in st.diagnostics) > 0)
    rep.runtime = time.perf_counter() - t0
    if spec.output_dir:
        rep.write(output_dir(spec.output_dir))
    return rep


# -- export ---------------------------------------------------------------------------

DIAGNOSTIC_COLUMNS = (
    "step", "time", "dt", "mass", "pi_c_l2", "weighted_grad_c_l2", "grad_p_l2",
    "div_max", "div_bound", "normal_jump", "boundary_trace", "p_iterations", "p_residual",
    "c_iterations", "c_residual", "trace_fail", "trace_critical", "c1_T",
)


def export_csv(state, path) -> Path:
    """Per-step diagnostics with a fixed column order and 17 significant digits."""
    rows = list(state.diagnostics) if state is not None else []
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(_csv_text(list(DIAGNOSTIC_COLUMNS), rows))
    return p


def _vtk_text(mesh, cell_data: dict, title: str) -> str:
    out = ["# vtk DataFile Version 3.0", title, "ASCII", "DATASET UNSTRUCTURED_GRID"]
    out.append(f"POINTS {mesh.n_vertices} double")
    out += [f"{x:.17g} {y:.17g} 0" for x, y in mesh.vertices]
    loops = [mesh.cell_loop(k) for k in range(mesh.n_cells)]
    size = sum(len(l) + 1 for l in loops)
    out.append(f"CELLS {mesh.n_cells} {size}")
    out += [" ".join(str(int(v)) for v in [len(l), *l]) for l in loops]
    out.append(f"CELL_TYPES {mesh.n_cells}")
    out += ["7"] * mesh.n_cells  # VTK_POLYGON
    out.append(f"CELL_DATA {mesh.n_cells}")
    for name, vals in cell_data.items():
        vals = np.asarray(vals, dtype=float)
        if vals.ndim == 1:
            out += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
            out += ["%.17g" % v for v in vals]
        else:
            out.append(f"VECTORS {name} double")
            out += [f"{a:.17g} {b:.17g} 0" for a, b in vals]
    return "\n".join(out) + "\n"


def export_vtk(sim, state, directory, fields=("p", "c", "u")) -> list[Path]:
    """One legacy ASCII snapshot per stored step and requested field, with
    cell values of ``Pi_P p``, ``Pi_C c`` and the cell-averaged ``u_P``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    mesh = sim.mesh
    files = []
    q = diamond_quadrature(mesh, 2)
    cell = mesh.hf_cell[q.hf]

    def cell_avg(vals):
        return np.bincount(cell, weights=q.weights * vals, minlength=mesh.n_cells) / mesh.cell_areas

    for k in range(len(state.p)):
        step = k + 1 if len(state.p) == state.n_steps else state.n_steps
        for f in fields:
            if f == "p":
                gd = sim.gd_p
                vals = (cell_avg(gd.reconstruct(q.hf, q.points)[0] @ state.p[k]) if gd is not None
                        else np.asarray(state.p[k]))
                data = {"pressure": vals}
            elif f == "c":
                c = state.c[k + 1] if len(state.c) == len(state.p) + 1 else state.c[-1]
                data = {"concentration": cell_avg(sim.gd_c.reconstruct(q.hf, q.points)[0] @ c)}
            elif f == "u":
                uq = state.u[k].velocity_in(q.hf, q.points)
                data = {"velocity": np.column_stack([cell_avg(uq[:, 0]), cell_avg(uq[:, 1])])}
            else:
                raise ValueError(f"unknown field {f!r}")
            path = d / f"{f}_{step:04d}.vtk"
            path.write_text(_vtk_text(mesh, data, f"{f} step {step}"))
            files.append(path)
    return files


def export(state, fmt: str, path, sim=None, fields=("p", "c", "u")):
    """``fmt="csv"``: diagnostics table at ``path``; ``fmt="vtk"``: snapshots
    in the directory ``path`` (needs the simulation for the mesh)."""
    if fmt == "csv":
        return [export_csv(state, path)]
    if fmt == "vtk":
        if sim is None:
            raise ValueError("VTK export needs the simulation (mesh and spaces)")
        return export_vtk(sim, state, path, fields)
    raise ValueError(f"unknown export format {fmt!r}")
