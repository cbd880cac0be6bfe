"""INI run and study files.

Run file sections::

    [mesh]      kind = cartesian | triangulated | file ; n = 16 (or nx, ny) ; path = ...
    [model]     permeability, mu0, mobility_ratio, porosity (one value, or two
                values split at porosity_split_y), d_m, d_l, d_t,
                c_ini = zero | bump | gauss
    [well.NAME] kind = injection | production ; center = x, y ; radius ; rate
    [time]      T ; n_steps
    [gd]        pressure = hmm | rt0 ; concentration = hmm | p1
    [scheme]    w ; source_mode ; ellam_degree ; max_trace_failure
    [solver]    tol ; max_iter ; preconditioner
    [flow]      eps ; root_tol ; max_events
    [output]    dir ; csv = yes ; vtk = no ; fields = p, c, u
    [run]       seed

Study files have a ``[study]`` section (scenario, levels, gd, seed,
min_order_pi, min_order_grad, output_dir) and an optional ``[overrides]``
section of numeric values.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .flow import FlowConfig
from .harness import StudySpec
from .linalg import SolverConfig
from .mesh import build_cartesian, build_triangulated, load_mesh
from .scheme import ConfigError, ModelData, SchemeConfig, Well, WellSource

__all__ = ["RunConfig", "load_run_config", "load_study_spec", "parse_run_config"]

_KNOWN = {"mesh", "model", "time", "gd", "scheme", "solver", "flow", "output", "run"}


def _floats(text: str) -> list[float]:
    return [float(t) for t in text.replace(",", " ").split()]


def _initial(name: str):
    from .harness import _bump_ic, _gauss_ic

    table = {"zero": lambda x: np.zeros(len(x)), "bump": _bump_ic, "gauss": _gauss_ic}
    if name not in table:
        raise ConfigError(f"unknown c_ini {name!r}; expected one of {sorted(table)}")
    return table[name]


@dataclass
class RunConfig:
    mesh: object
    model: ModelData
    scheme: SchemeConfig
    output_dir: Path
    write_csv: bool = True
    write_vtk: bool = False
    fields: tuple = ("p", "c", "u")
    seed: int = 0
    source: dict = field(default_factory=dict)


def parse_run_config(cp: configparser.ConfigParser, base: Path = Path(".")) -> RunConfig:
    unknown = [s for s in cp.sections() if s not in _KNOWN and not s.startswith("well.")]
    if unknown:
        raise ConfigError(f"unknown sections: {', '.join(unknown)}")
    ms = cp["mesh"] if cp.has_section("mesh") else {}
    kind = ms.get("kind", "cartesian")
    if kind == "file":
        if "path" not in ms:
            raise ConfigError("[mesh] kind = file needs path")
        p = Path(ms["path"])
        mesh = load_mesh(p if p.is_absolute() else base / p)
    elif kind in ("cartesian", "triangulated"):
        n = int(ms.get("n", 8))
        nx, ny = int(ms.get("nx", n)), int(ms.get("ny", n))
        build = build_cartesian if kind == "cartesian" else build_triangulated
        mesh = build(nx, ny)
    else:
        raise ConfigError(f"unknown mesh kind {kind!r}")

    md = cp["model"] if cp.has_section("model") else {}
    phi_vals = _floats(md.get("porosity", "1.0"))
    if len(phi_vals) == 1:
        porosity = phi_vals[0]
    elif len(phi_vals) == 2:
        y0 = float(md.get("porosity_split_y", 0.5))
        lo, hi = phi_vals
        porosity = lambda x: np.where(x[:, 1] < y0, lo, hi)  # noqa: E731
    else:
        raise ConfigError("porosity takes one value or two values (below, above the split)")
    inj, prod = [], []
    for sec in cp.sections():
        if not sec.startswith("well."):
            continue
        w = cp[sec]
        c = _floats(w.get("center", ""))
        if len(c) != 2:
            raise ConfigError(f"[{sec}] center needs two coordinates")
        well = Well((c[0], c[1]), float(w.get("radius", 0.1)), float(w.get("rate", 1.0)))
        k = w.get("kind", "injection")
        if k not in ("injection", "production"):
            raise ConfigError(f"[{sec}] kind must be injection or production")
        (inj if k == "injection" else prod).append(well)
    tm = cp["time"] if cp.has_section("time") else {}
    model = ModelData(
        permeability=float(md.get("permeability", 1.0)),
        mu0=float(md.get("mu0", 1.0)),
        mobility_ratio=float(md.get("mobility_ratio", 1.0)),
        porosity=porosity,
        d_m=float(md.get("d_m", 0.01)),
        d_l=float(md.get("d_l", 0.0)),
        d_t=float(md.get("d_t", 0.0)),
        q_plus=WellSource(inj),
        q_minus=WellSource(prod),
        c_ini=_initial(md.get("c_ini", "zero")),
        T=float(tm.get("T", 1.0)),
    )
    sv = cp["solver"] if cp.has_section("solver") else {}
    solver = SolverConfig(tol=float(sv.get("tol", 1e-10)), max_iter=int(sv.get("max_iter", 10_000)),
                          preconditioner=sv.get("preconditioner", "diagonal"))
    fl = cp["flow"] if cp.has_section("flow") else {}
    flow = FlowConfig(eps=float(fl.get("eps", 1e-12)), root_tol=float(fl.get("root_tol", 1e-13)),
                      max_events=int(fl.get("max_events", 100_000)))
    gd = cp["gd"] if cp.has_section("gd") else {}
    sc = cp["scheme"] if cp.has_section("scheme") else {}
    scheme = SchemeConfig(
        w=float(sc.get("w", 0.5)), n_steps=int(tm.get("n_steps", 8)),
        pressure_gd=gd.get("pressure", "hmm"), concentration_gd=gd.get("concentration", "hmm"),
        source_mode=sc.get("source_mode", "average"),
        ellam_degree=int(sc.get("ellam_degree", 2)),
        max_trace_failure=float(sc.get("max_trace_failure", 1e-3)),
        solver=solver, flow=flow,
    )
    out = cp["output"] if cp.has_section("output") else {}
    bool_of = configparser.ConfigParser.BOOLEAN_STATES

    def flag(key, default):
        v = str(out.get(key, default)).lower()
        if v not in bool_of:
            raise ConfigError(f"[output] {key} must be a boolean")
        return bool_of[v]

    fields = tuple(t.strip() for t in out.get("fields", "p, c, u").split(",") if t.strip())
    bad = [f for f in fields if f not in ("p", "c", "u")]
    if bad:
        raise ConfigError(f"[output] unknown fields {bad}")
    run = cp["run"] if cp.has_section("run") else {}
    return RunConfig(mesh=mesh, model=model, scheme=scheme,
                     output_dir=Path(out.get("dir", "ellam-output")),
                     write_csv=flag("csv", "yes"), write_vtk=flag("vtk", "no"),
                     fields=fields, seed=int(run.get("seed", 0)))


def _read(path) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file {p} not found")
    cp.read(p)
    return cp


def load_run_config(path) -> RunConfig:
    return parse_run_config(_read(path), Path(path).parent)


def load_study_spec(path) -> StudySpec:
    cp = _read(path)
    if not cp.has_section("study"):
        raise ConfigError(f"{path}: missing [study] section")
    s = cp["study"]
    overrides = {}
    if cp.has_section("overrides"):
        for k, v in cp["overrides"].items():
            try:
                overrides[k] = float(v)
            except ValueError as exc:
                raise ConfigError(f"[overrides] {k} must be numeric") from exc
    return StudySpec(
        scenario=s.get("scenario", "coupled-wells"),
        levels=tuple(int(x) for x in _floats(s.get("levels", "8 16 32"))),
        gd=s.get("gd", "hmm"),
        overrides=overrides,
        output_dir=s.get("output_dir", None),
        seed=int(s.get("seed", 0)),
        min_order_pi=float(s.get("min_order_pi", 1.5)),
        min_order_grad=float(s.get("min_order_grad", 0.9)),
    )
