"""Command line interface (``ellam``).

Subcommands: ``run``, ``study``, ``invariants``, ``gd-quality``,
``mesh-info`` and ``trace``.  ``ELLAM_OUTPUT_DIR`` overrides the output
directory of ``run``, ``study`` and ``invariants``.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import __version__
from .config import load_run_config, load_study_spec
from .darcy import DarcyField, load_field
from .fe import P1Gd, Rt0MixedGd
from .flow import FlowConfig, trace
from .harness import (
    StudySpec, _csv_text, _rotation, export_csv, export_vtk, gd_quality, output_dir,
    run_convergence, run_invariants, vortex,
)
from .hmm import HmmGd
from .mesh import build_cartesian, build_triangulated, load_mesh, regularity
from .scheme import Simulation

__all__ = ["main", "build_parser", "mesh_from_arg"]


def mesh_from_arg(text: str):
    """``cartesian:N``, ``triangulated:N`` (or ``:NxM``) or a mesh file path."""
    for kind, build in (("cartesian", build_cartesian), ("triangulated", build_triangulated)):
        if text.startswith(kind + ":"):
            dims = text.split(":", 1)[1].lower().split("x")
            nx = int(dims[0])
            ny = int(dims[1]) if len(dims) > 1 else nx
            return build(nx, ny)
    return load_mesh(text)


def _field_from_arg(mesh, text: str) -> DarcyField:
    if text == "rotation":
        return DarcyField.interpolate(mesh, _rotation)
    if text == "vortex":
        return DarcyField.interpolate(mesh, vortex)
    if text.startswith("constant:"):
        ux, uy = (float(t) for t in text.split(":", 1)[1].split(","))
        return DarcyField.interpolate(mesh, lambda x: np.tile([ux, uy], (len(x), 1)))
    return load_field(mesh, text)


def _cmd_run(args) -> int:
    cfg = load_run_config(args.config)
    sim = Simulation(cfg.mesh, cfg.model, cfg.scheme)
    st = sim.run()
    out = output_dir(args.output or cfg.output_dir)
    files = []
    if cfg.write_csv:
        files.append(export_csv(st, out / "diagnostics.csv"))
    if cfg.write_vtk:
        files += export_vtk(sim, st, out / "vtk", cfg.fields)
    last = st.diagnostics[-1] if st.diagnostics else {}
    print(f"{st.n_steps} steps on {cfg.mesh.n_cells} cells; final mass "
          f"{last.get('mass', sim.mass(st.c[0])):.10g}")
    for f in files[:1]:
        print(f"wrote {f}" + (f" and {len(files) - 1} snapshots" if len(files) > 1 else ""))
    return 0


def _spec_from_args(args) -> StudySpec:
    spec = load_study_spec(args.spec) if args.spec else StudySpec(levels=(2,))
    if getattr(args, "output", None):
        spec.output_dir = args.output
    elif spec.output_dir is None and os.environ.get("ELLAM_OUTPUT_DIR"):
        spec.output_dir = str(output_dir())
    return spec


def _cmd_study(args) -> int:
    rep = run_convergence(_spec_from_args(args))
    print(rep.summary())
    return rep.exit_code


def _cmd_invariants(args) -> int:
    rep = run_invariants(_spec_from_args(args), mutation=args.mutation)
    print(rep.summary())
    return rep.exit_code


def _cmd_gd_quality(args) -> int:
    mesh = mesh_from_arg(args.mesh)
    cls = {"hmm": HmmGd, "p1": P1Gd, "rt0": Rt0MixedGd}[args.gd]
    q = gd_quality(cls(mesh))
    sys.stdout.write(_csv_text(["gd", "n_cells", "C_D", "S_D", "W_D"],
                               [{"gd": args.gd, "n_cells": mesh.n_cells, **q}]))
    return 0


def _cmd_mesh_info(args) -> int:
    mesh = mesh_from_arg(args.mesh)
    q = regularity(mesh)
    print(f"cells {mesh.n_cells}")
    print(f"faces {mesh.n_faces} ({int(mesh.boundary_faces.sum())} on the boundary)")
    print(f"vertices {mesh.n_vertices}")
    print(f"regularity {q.rho:.6g}")
    print(f"h {q.h:.6g}")
    print(f"max faces per cell {q.max_faces}")
    return 0


def _cmd_trace(args) -> int:
    mesh = mesh_from_arg(args.mesh)
    field = _field_from_arg(mesh, args.field)
    phi = np.full(mesh.n_cells, args.porosity)
    ft = trace(field, phi, np.array([args.x, args.y]), 0.0, args.time,
               FlowConfig(eps=args.eps))
    print("time,diamond,edge,face,x,y")
    for e in ft.events:
        print("%.17g,%d,%d,%d,%.17g,%.17g" % (e["time"], e["hf"], e["edge"], e["face"], *e["x"]))
    print(f"# end {ft.endpoint[0]:.17g} {ft.endpoint[1]:.17g} jacobian {ft.jacobian:.17g} "
          f"status {ft.status}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ellam", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a simulation from an INI file")
    r.add_argument("config")
    r.add_argument("-o", "--output", help="output directory")
    r.set_defaults(func=_cmd_run)

    s = sub.add_parser("study", help="convergence study from a study file")
    s.add_argument("spec")
    s.add_argument("-o", "--output", help="directory for the report files")
    s.set_defaults(func=_cmd_study)

    i = sub.add_parser("invariants", help="invariant suites (default: 2x2 Cartesian HMM)")
    i.add_argument("spec", nargs="?")
    i.add_argument("-o", "--output", help="directory for the report files")
    i.add_argument("--mutation", choices=["flux-sign"], help="inject a known defect")
    i.set_defaults(func=_cmd_invariants)

    g = sub.add_parser("gd-quality", help="C_D, S_D and W_D as CSV")
    g.add_argument("mesh", help="mesh file, cartesian:N or triangulated:N")
    g.add_argument("gd", choices=["hmm", "p1", "rt0"])
    g.set_defaults(func=_cmd_gd_quality)

    m = sub.add_parser("mesh-info", help="counts and regularity of a mesh")
    m.add_argument("mesh")
    m.set_defaults(func=_cmd_mesh_info)

    t = sub.add_parser("trace", help="print the crossing events of one trajectory")
    t.add_argument("mesh")
    t.add_argument("field", help="rt0field file, rotation, vortex or constant:ux,uy")
    t.add_argument("x", type=float)
    t.add_argument("y", type=float)
    t.add_argument("time", type=float)
    t.add_argument("--porosity", type=float, default=1.0)
    t.add_argument("--eps", type=float, default=1e-12)
    t.set_defaults(func=_cmd_trace)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return int(args.func(args))
    except (ValueError, FileNotFoundError, RuntimeError) as exc:
        print(f"ellam: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
