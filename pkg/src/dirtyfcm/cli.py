"""Command line interface.

Machine-readable outputs land next to each other in --out: delimited CSV
tables, JSON summaries, VTK fields, and rendered PNG figures for the study
commands.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np

from . import __version__
from .flaws import FlawScript, apply_script
from .mesh_io import index_mesh, load_stl, topology_report, write_stl
from .pmc import POLICIES, PmcEngine, ambiguity_stats, write_labels_csv
from .problems import ENERGY_CSV_HEADER, energy_csv_rows, load_problem, run_bracket, run_solve
from .solver import export_vtk
from .spacetree import auto_depth, build_geo_tree, flood_fill, write_tree_vtk
from .mesh_io import bounding_box
from .studies import StudyConfig, cube_gap_study, plate_study


def _fail(message: str, code: int = 1):
    click.echo(json.dumps({"error": message}), err=True)
    sys.exit(code)


@click.group()
@click.version_option(__version__)
def main():
    """Embedded-domain finite cell analysis on flawed triangle models."""


@main.command()
@click.argument("stl", type=click.Path(exists=True))
@click.option("--weld-tol", type=float, default=None, help="vertex weld tolerance")
@click.option("--out", type=click.Path(), default=None, help="write the report here")
@click.option("--skip-intersections", is_flag=True, help="skip the pairwise intersection scan")
def inspect(stl, weld_tol, out, skip_intersections):
    """Diagnose an STL file: free edges, duplicates, orientation, intersections."""
    try:
        soup = load_stl(stl)
        mesh = index_mesh(soup, weld_tol)
        report = topology_report(mesh, check_self_intersections=not skip_intersections)
    except Exception as exc:
        _fail(str(exc))
    text = report.to_json()
    if out:
        Path(out).write_text(text)
    click.echo(text)


@main.command()
@click.argument("stl", type=click.Path(exists=True))
@click.argument("script", type=click.Path(exists=True))
@click.option("--out", type=click.Path(), default="dirty.stl", help="output STL path")
@click.option("--ledger", type=click.Path(), default=None, help="ledger JSON path")
@click.option("--fmt", type=click.Choice(["binary", "ascii"]), default="binary")
def inject(stl, script, out, ledger, fmt):
    """Apply a defect script to a model and write the dirty STL."""
    try:
        soup = load_stl(stl)
        mesh = index_mesh(soup)
        flaw_script = FlawScript.from_json(Path(script).read_text())
        dirty, led = apply_script(mesh, flaw_script)
    except Exception as exc:
        _fail(str(exc))
    write_stl(dirty, out, fmt)
    ledger_path = ledger or (str(Path(out).with_suffix("")) + "_ledger.json")
    Path(ledger_path).write_text(led.to_json())
    click.echo(json.dumps({"stl": str(out), "ledger": ledger_path,
                           "eps_gap": led.eps_gap}))


def _read_points_csv(path) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            try:
                rows.append([float(parts[0]), float(parts[1]), float(parts[2])])
            except ValueError:
                continue  # header or comment line
    return np.asarray(rows)


@main.command()
@click.argument("stl", type=click.Path(exists=True))
@click.argument("points_csv", type=click.Path(exists=True))
@click.option("--policy", type=click.Choice(sorted(POLICIES)), default="majority")
@click.option("--out", type=click.Path(), default="labels.csv")
@click.option("--depth-cap", type=int, default=6, help="auto depth search cap")
@click.option("--n-max", type=int, default=None, help="fixed tree depth instead of auto")
@click.option("--padding", type=float, default=0.3, help="embedding box padding fraction")
@click.option("--tree-vtk", type=click.Path(), default=None, help="dump the filled tree")
@click.option("--tree-json", type=click.Path(), default=None, help="tree summary JSON")
@click.option("--stats", "stats_path", type=click.Path(), default=None, help="ambiguity stats JSON")
def pmc(stl, points_csv, policy, out, depth_cap, n_max, padding, tree_vtk, tree_json, stats_path):
    """Classify points from a CSV (x,y,z per row) against a model."""
    try:
        soup = load_stl(stl)
        points = _read_points_csv(points_csv)
        if points.size == 0:
            _fail("no points parsed from the CSV")
        domain = bounding_box(soup, padding)
        if n_max is not None:
            filled = flood_fill(build_geo_tree(soup, domain, n_max))
        else:
            _, filled = auto_depth(soup, domain, depth_cap)
        engine = PmcEngine(filled, soup)
        batch = engine.classify_batch(points)
    except Exception as exc:
        _fail(str(exc))
    write_labels_csv(out, batch, POLICIES[policy])
    if tree_vtk:
        write_tree_vtk(filled, tree_vtk)
    if tree_json:
        Path(tree_json).write_text(filled.summary_json())
    stats = ambiguity_stats(batch)
    if stats_path:
        Path(stats_path).write_text(json.dumps(stats, indent=2))
    click.echo(json.dumps({"labels": str(out), **stats}))


@main.command()
@click.argument("problem", type=click.Path(exists=True))
@click.option("--out", type=click.Path(), default=".", help="output directory")
@click.option("--run-id", default="run", help="identifier for the CSV rows")
@click.option("--policy", type=click.Choice(sorted(POLICIES)), default=None,
              help="override the problem's vote policy")
def solve(problem, out, run_id, policy):
    """Assemble and solve a problem JSON; writes energy CSV and a VTK field."""
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        built = load_problem(problem)
        if policy is not None:
            built.policy = POLICIES[policy]
        result, ctx = run_solve(built)
    except Exception as exc:
        _fail(str(exc))
    csv_path = out_dir / "energy.csv"
    with open(csv_path, "w") as fh:
        fh.write(ENERGY_CSV_HEADER)
        fh.write(energy_csv_rows(run_id, built.policy.mode, built.grid.p,
                                 built.k, built.q, result))
    vtk_path = out_dir / "fields.vtk"
    export_vtk(built.grid, result.u, built.engine, vtk_path,
               material=built.material, q=built.q, policy=built.policy)
    summary = {
        "U": result.energy, "iterations": result.iterations,
        "residual": result.residual, "wall_time": result.wall_time,
        "tree": built.tree_info, "gauss_points": ctx.gauss_point_count(),
        **ambiguity_stats(ctx.batch),
    }
    (out_dir / "solve.json").write_text(json.dumps(summary, indent=2))
    click.echo(json.dumps(summary))


@main.command()
@click.argument("problem", type=click.Path(exists=True))
@click.option("--out", type=click.Path(), default=".", help="output directory")
@click.option("--run-id", default="run", help="identifier for the CSV rows")
def bracket(problem, out, run_id):
    """Bound the defect-induced error: solve under all three vote policies."""
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        built = load_problem(problem)
        br = run_bracket(built)
    except Exception as exc:
        _fail(str(exc))
    csv_path = out_dir / "bracket.csv"
    with open(csv_path, "w") as fh:
        fh.write(ENERGY_CSV_HEADER)
        for policy, result in (("bracket-out", br.results["low"]),
                               ("majority", br.results["majority"]),
                               ("bracket-in", br.results["high"])):
            fh.write(energy_csv_rows(run_id, policy, built.grid.p,
                                     built.k, built.q, result))
    summary = {
        "U_low": br.U_low, "U_majority": br.U_majority, "U_high": br.U_high,
        "rel_width": br.rel_width, "ordering_violated": br.ordering_violated,
        "stats": br.stats,
    }
    (out_dir / "bracket.json").write_text(json.dumps(summary, indent=2))
    click.echo(json.dumps(summary))


def _study_config(out, reduced, config) -> StudyConfig:
    overrides = {}
    if config:
        overrides = json.loads(Path(config).read_text())
    return StudyConfig(out_dir=out, reduced=reduced, **overrides)


@main.command("study-cube")
@click.option("--out", type=click.Path(), default="cube_study")
@click.option("--reduced/--full", default=True)
@click.option("--config", type=click.Path(exists=True), default=None,
              help="JSON with StudyConfig overrides")
def study_cube(out, reduced, config):
    """Gap-size sweep on the self-weight cube; CSV + figure."""
    try:
        rows = cube_gap_study(_study_config(out, reduced, config))
    except Exception as exc:
        _fail(str(exc))
    worst = max(r["rel_dev"] for r in rows)
    click.echo(json.dumps({"rows": len(rows), "max_rel_dev": worst,
                           "csv": str(Path(out) / "cube_gap.csv"),
                           "figure": str(Path(out) / "cube_gap.png")}))


@main.command("study-plate")
@click.option("--out", type=click.Path(), default="plate_study")
@click.option("--reduced/--full", default=True)
@click.option("--config", type=click.Path(exists=True), default=None,
              help="JSON with StudyConfig overrides")
def study_plate(out, reduced, config):
    """p-convergence and bracketing on the plate fixture; CSV + figure."""
    try:
        result = plate_study(_study_config(out, reduced, config))
    except Exception as exc:
        _fail(str(exc))
    click.echo(json.dumps({
        "rows": len(result["rows"]),
        "bracket_rel_width": result["bracket"].get("rel_width"),
        "csv": str(Path(out) / "plate_convergence.csv"),
        "figure": str(Path(out) / "plate_convergence.png"),
    }))


if __name__ == "__main__":
    main()
