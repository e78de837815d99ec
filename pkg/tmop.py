"""
tmop.py -- Command line for target-matrix optimization of high-order meshes.

Commands:
    optimize     optimize a mesh under a run config, write mesh / report / VTK
    quality      min/mean/max metric values and min det A of a mesh
    trigger      admissible-Jacobian remesh check (exit 3 when it fires)
    demo         write a built-in scenario (mesh, config, fields) to a directory
    refine       uniform refinement of a mesh file
    perturb      seeded interior-node perturbation of a mesh file
    export-vtk   legacy ASCII VTK with linear sub-cells
    study        refinement-invariance table for a scenario

Usage:
    python tmop.py demo perturbed-square --out-dir data/runs/ps
    python tmop.py optimize --mesh data/runs/ps/mesh.homesh --config data/runs/ps/run.cfg \\
        --out data/runs/ps/optimized.homesh --report data/runs/ps/report.json
    python tmop.py trigger --mesh data/runs/ds/seq_16.homesh --config data/runs/ds/run.cfg
    python tmop.py study perturbed-square --levels 0,1,2

Exit codes: 0 ok, 1 usage, 2 runtime/parse/config error, 3 trigger fired.
"""

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from mesh_core import InfeasibleMeshError, jacobians, perturb_interior, uniform_refine
from mesh_io import (
    RunConfig,
    RunReport,
    export_vtk,
    read_config,
    read_field,
    read_mesh,
    write_config,
    write_field,
    write_mesh,
    write_report,
)
from metrics import eval_metric_batch
from objective import XiKind
from scenarios import SCENARIOS, ScenarioSpec, build_scenario, refinement_study
from solver import optimize
from targets_fields import make_targets_builder
from tmop_config import get_output_dir, setup_logging
from trigger import check_trigger

logger = logging.getLogger("tmop")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_TRIGGER = 3


def _banner(title: str):
    print(f"\n{'=' * 60}")
    print(f"  {title}")
    print(f"{'=' * 60}")


def _summary(**values):
    print("SUMMARY " + " ".join(f"{k}={v}" for k, v in values.items()))


def _load_problem(args):
    mesh = read_mesh(args.mesh)
    cfg = read_config(args.config)
    fields = [read_field(f, mesh) for f in (getattr(args, "field", None) or [])]
    config = cfg.objective_config(mesh)
    quadrature = config.quadrature(mesh)
    builder = make_targets_builder(cfg.target, mesh, quadrature, fields[0] if fields else None, cfg.alpha)
    return mesh, cfg, fields, config, quadrature, builder


def _trigger_dict(result) -> dict:
    return {
        "fires": result.fires,
        "worst_ratio": result.worst_ratio,
        "worst_location": list(result.worst_location),
        "infeasible_points": result.infeasible_points,
        "infeasible_bounds": result.infeasible_bounds,
    }


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------
def cmd_optimize(args) -> int:
    start = time.time()
    mesh, cfg, fields, config, quadrature, builder = _load_problem(args)
    params = cfg.solver_params()
    logger.info(f"Loaded {args.mesh}: {mesh.n_elements} elements, degree {mesh.degree}, {mesh.n_nodes} nodes")

    optimized, report = optimize(mesh, builder, config, params)
    write_mesh(optimized, args.out)

    trigger = None
    spec = cfg.admissible()
    if spec is not None:
        trigger = _trigger_dict(check_trigger(optimized, builder(optimized), spec, quadrature))

    elapsed = time.time() - start
    echo = {**cfg.as_dict(), "mesh": str(args.mesh), "fields": [str(f) for f in (args.field or [])]}
    run_report = RunReport(config=echo, solver=report.as_dict(), initial=report.initial.as_dict(),
                           final=report.final.as_dict(), trigger=trigger, wall_time_s=elapsed)
    if args.report:
        write_report(run_report, args.report)
    if args.vtk:
        named = {Path(f).stem: fld for f, fld in zip(args.field or [], fields)}
        export_vtk(optimized, named, args.vtk)

    _banner("OPTIMIZE SUMMARY")
    print(f"  Elements:         {mesh.n_elements}")
    print(f"  Iterations:       {report.iterations}")
    print(f"  Termination:      {report.termination.value}")
    print(f"  F initial:        {report.initial.total:.8f}  (metric {report.initial.metric_total:.8f})")
    print(f"  F final:          {report.final.total:.8f}")
    print(f"    metric part:    {report.final.metric_total:.8f}")
    print(f"    limiting part:  {report.final.limiting_part:.8f}")
    print(f"  Max displacement: {report.max_displacement:.6e}")
    print(f"  Min det A:        {report.final.min_det_a:.6e}")
    print(f"  Output:           {args.out}")
    print(f"  Time:             {elapsed:.1f}s")
    _summary(iterations=report.iterations, termination=report.termination.value,
             F=f"{report.final.total:.8e}", displacement=f"{report.max_displacement:.6e}")
    return EXIT_OK


def cmd_quality(args) -> int:
    mesh, cfg, _, config, quadrature, builder = _load_problem(args)
    targets = builder(mesh)
    A = jacobians(mesh, quadrature)
    T = A @ targets.W_inv
    _banner("MESH QUALITY")
    print(f"  Elements:   {mesh.n_elements}   degree {mesh.degree}   quadrature {quadrature.points_per_dim}^{mesh.dim}")
    print(f"  Min det A:  {float(np.linalg.det(A).min()):.6e}")
    print(f"  {'metric':<8} {'min':>14} {'mean':>14} {'max':>14}")
    summary = {}
    for term in config.metric_terms:
        mu = eval_metric_batch(term.metric, T)
        print(f"  {term.metric.value:<8} {mu.min():>14.6e} {mu.mean():>14.6e} {mu.max():>14.6e}")
        summary[f"{term.metric.value}_max"] = f"{mu.max():.6e}"
    _summary(min_det_a=f"{float(np.linalg.det(A).min()):.6e}", **summary)
    return EXIT_OK


def cmd_trigger(args) -> int:
    mesh, cfg, _, _, quadrature, builder = _load_problem(args)
    spec = cfg.admissible()
    if spec is None:
        raise ValueError("config has no trigger.S entry")
    result = check_trigger(mesh, builder(mesh), spec, quadrature)
    _banner("REMESH TRIGGER")
    print(f"  Metric:        {spec.metric.value}")
    print(f"  S diagonal:    {', '.join(f'{v:g}' for v in np.diag(spec.S))}")
    print(f"  Worst ratio:   {result.worst_ratio:.6f}")
    print(f"  Worst point:   element {result.worst_location[0]}, point {result.worst_location[1]}")
    print(f"  Fires:         {'YES' if result.fires else 'no'}")
    _summary(fires=int(result.fires), worst_ratio=f"{result.worst_ratio:.6e}")
    return EXIT_TRIGGER if result.fires else EXIT_OK


def _scenario_run_config(scenario, out_dir: Path) -> RunConfig:
    config = scenario.config
    cfg = RunConfig(metrics=[t.metric for t in config.metric_terms], xi=config.xi_kind,
                    target=scenario.target, alpha=scenario.alpha, quad_points=config.quad_points)
    if "delta" in scenario.fields:
        cfg.delta = out_dir / "delta.hofield"
    elif config.xi_kind is not XiKind.NONE:
        cfg.delta = config.delta
    if scenario.admissible is not None:
        cfg.trigger_S = [float(v) for v in np.diag(scenario.admissible.S)]
        cfg.trigger_metric = scenario.admissible.metric
    return cfg


def cmd_demo(args) -> int:
    out_dir = Path(args.out_dir) if args.out_dir else get_output_dir() / args.name
    scenario = build_scenario(ScenarioSpec(args.name, refinements=args.refinements, seed=args.seed))
    out_dir.mkdir(parents=True, exist_ok=True)
    written = [write_mesh(scenario.mesh0, out_dir / "mesh.homesh")]
    for name, fld in scenario.fields.items():
        written.append(write_field(fld, out_dir / f"{name}.hofield"))
    for index, mesh in enumerate(scenario.sequence):
        written.append(write_mesh(mesh, out_dir / f"seq_{index:02d}.homesh"))
    written.append(write_config(_scenario_run_config(scenario, out_dir), out_dir / "run.cfg"))

    _banner(f"DEMO: {args.name}")
    print(f"  Elements:   {scenario.mesh0.n_elements}   degree {scenario.mesh0.degree}")
    print(f"  Directory:  {out_dir}")
    for path in written:
        print(f"    {path.name}")
    field_arg = " --field " + str(out_dir / "indicator.hofield") if "indicator" in scenario.fields else ""
    print(f"\n  Next: python tmop.py optimize --mesh {out_dir / 'mesh.homesh'} --config {out_dir / 'run.cfg'}"
          f"{field_arg} --out {out_dir / 'optimized.homesh'} --report {out_dir / 'report.json'}")
    _summary(scenario=args.name, elements=scenario.mesh0.n_elements, files=len(written))
    return EXIT_OK


def cmd_refine(args) -> int:
    mesh = read_mesh(args.mesh)
    refined = uniform_refine(mesh)
    write_mesh(refined, args.out)
    print(f"Refined {mesh.n_elements} -> {refined.n_elements} elements, wrote {args.out}")
    _summary(elements=refined.n_elements, nodes=refined.n_nodes)
    return EXIT_OK


def cmd_perturb(args) -> int:
    mesh = read_mesh(args.mesh)
    moved = perturb_interior(mesh, args.amplitude, args.seed)
    write_mesh(moved, args.out)
    shift = float(np.max(np.abs(moved.node_coords - mesh.node_coords)))
    print(f"Perturbed {int((~mesh.boundary_mask).sum())} interior nodes (max shift {shift:.3e}), wrote {args.out}")
    _summary(max_shift=f"{shift:.6e}")
    return EXIT_OK


def cmd_export_vtk(args) -> int:
    mesh = read_mesh(args.mesh)
    fields = {Path(f).stem: read_field(f, mesh) for f in (args.field or [])}
    export_vtk(mesh, fields, args.out)
    print(f"Wrote {args.out} ({mesh.n_elements * mesh.degree ** mesh.dim} cells, {len(fields)} field(s))")
    return EXIT_OK


def cmd_study(args) -> int:
    try:
        levels = [int(v) for v in args.levels.split(",") if v.strip()]
    except ValueError:
        raise ValueError(f"--levels must be a comma list of integers, got {args.levels!r}") from None
    start = time.time()
    rows = refinement_study(args.name, levels, seed=args.seed)
    out_dir = Path(args.out_dir) if args.out_dir else get_output_dir()
    out_dir.mkdir(parents=True, exist_ok=True)
    out = out_dir / f"study_{args.name}.json"
    out.write_text(json.dumps([vars(r) for r in rows], indent=1), encoding="utf-8")

    _banner(f"REFINEMENT STUDY: {args.name}")
    print(f"  {'ref':>3} {'elements':>8} {'F':>12} {'metric':>12} {'limiting':>12} {'max |x-x0|':>12}")
    for r in rows:
        print(f"  {r.refinements:>3} {r.elements:>8} {r.final_F:>12.6f} {r.metric_part:>12.6f} "
              f"{r.limiting_part:>12.6f} {r.max_displacement:>12.6f}")
    print(f"\n  Written to {out}  ({time.time() - start:.1f}s)")
    _summary(levels=len(rows), out=out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tmop", description="Target-matrix optimization of high-order meshes")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("optimize", help="Optimize a mesh")
    p.add_argument("--mesh", required=True, help="Input mesh (.homesh)")
    p.add_argument("--config", required=True, help="Run config (key = value)")
    p.add_argument("--field", action="append", help="Field file; the first one is the adaptivity indicator")
    p.add_argument("--out", required=True, help="Output mesh path")
    p.add_argument("--report", help="JSON run report path")
    p.add_argument("--vtk", help="VTK output path")
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("quality", help="Report metric statistics")
    p.add_argument("--mesh", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--field", action="append")
    p.set_defaults(func=cmd_quality)

    p = sub.add_parser("trigger", help="Check the remesh trigger (exit 3 when it fires)")
    p.add_argument("--mesh", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--field", action="append")
    p.set_defaults(func=cmd_trigger)

    p = sub.add_parser("demo", help="Write a built-in scenario")
    p.add_argument("name", choices=SCENARIOS)
    p.add_argument("--out-dir", help="Output directory (default: $TMOP_OUTPUT_DIR/<name>)")
    p.add_argument("--refinements", type=int, default=0)
    p.add_argument("--seed", type=int, default=42)
    p.set_defaults(func=cmd_demo)

    p = sub.add_parser("refine", help="Uniformly refine a mesh")
    p.add_argument("--mesh", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("perturb", help="Perturb interior nodes")
    p.add_argument("--mesh", required=True)
    p.add_argument("--amplitude", type=float, required=True, help="Fraction of the local edge length")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_perturb)

    p = sub.add_parser("export-vtk", help="Export to legacy ASCII VTK")
    p.add_argument("--mesh", required=True)
    p.add_argument("--field", action="append")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_vtk)

    p = sub.add_parser("study", help="Refinement-invariance study")
    p.add_argument("name", choices=SCENARIOS)
    p.add_argument("--levels", default="0,1,2")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_study)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE

    setup_logging("tmop")
    try:
        return args.func(args)
    except (ValueError, OSError, InfeasibleMeshError) as exc:
        logger.error(f"{args.command} failed: {exc}")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
