"""Problem definitions: a JSON file describing one embedded simulation.

Schema (all lengths in model units):

    {
      "stl": "model.stl",
      "physics": "elasticity" | "diffusion",
      "material": {"E": 1e4, "nu": 0.3} | {"kappa": 1.0}, optional "body_load",
      "grid": {"box": {"min": [...], "max": [...]}, "nx": 5, "ny": 5, "nz": 5, "p": 2},
      "tree": {"n_max": 4} or {"depth_cap": 6},          # fixed or auto depth
      "tree_domain": {"min": [...], "max": [...]},       # optional override
      "k": 1, "q": 8.0, "policy": "majority",
      "boundary": {"dirichlet": [...], "neumann": [...]},
      "solver": {"method": "cg", "tol": 1e-10}
    }

Dirichlet entries carry either {"plane": {"axis": 2, "value": 0.0}} for
strong enforcement on a grid plane or {"surface": {"axis":..,"value":..}} /
explicit triangles for penalty.  Neumann entries carry a surface selector
plus "traction" or "pressure".
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .fcm import (AssemblyContext, BoundarySpec, DirichletSpec, FcmGrid,
                  Material, NeumannSpec, apply_dirichlet, assemble_from_context,
                  apply_neumann, build_grid, clean_surface_for_integration)
from .mesh_io import Aabb, TriangleSoup, bounding_box, load_stl
from .pmc import POLICIES, PmcEngine, VotePolicy
from .solver import BracketResult, SolveResult, bracket_run, solve
from .spacetree import auto_depth, build_geo_tree, flood_fill


@dataclass
class BuiltProblem:
    soup: TriangleSoup
    grid: FcmGrid
    engine: PmcEngine
    material: Material
    boundary: BoundarySpec
    policy: VotePolicy
    k: int
    q: float
    solver_opts: dict
    tree_info: dict


def _parse_box(data) -> Aabb:
    return Aabb(np.asarray(data["min"], dtype=float), np.asarray(data["max"], dtype=float))


def _parse_boundary(data) -> BoundarySpec:
    bnd = BoundarySpec()
    for d in data.get("dirichlet", []):
        spec = DirichletSpec(
            components=d.get("components"),
            value=float(d.get("value", 0.0)),
            enforcement=d.get("enforcement", "strong"),
            plane=(int(d["plane"]["axis"]), float(d["plane"]["value"])) if "plane" in d else None,
            surface=d.get("surface"),
            beta=d.get("beta"),
        )
        bnd.dirichlet.append(spec)
    for n in data.get("neumann", []):
        bnd.neumann.append(NeumannSpec(
            surface=n.get("surface"),
            traction=np.asarray(n["traction"], dtype=float) if "traction" in n else None,
            pressure=float(n["pressure"]) if "pressure" in n else None,
        ))
    return bnd


def build_problem(config: dict, base_dir=".") -> BuiltProblem:
    base = Path(base_dir)
    soup = load_stl(base / config["stl"])

    physics = config["physics"]
    mat_cfg = dict(config.get("material", {}))
    material = Material(physics, E=mat_cfg.get("E"), nu=mat_cfg.get("nu"),
                        kappa=mat_cfg.get("kappa"),
                        body_load=mat_cfg.get("body_load"))

    g = config["grid"]
    grid = build_grid(_parse_box(g["box"]), int(g["nx"]), int(g["ny"]), int(g["nz"]),
                      int(g["p"]), physics)

    if "tree_domain" in config:
        tree_dom = _parse_box(config["tree_domain"])
    else:
        pad = bounding_box(soup, 0.15)
        tree_dom = pad.union(grid.box)
        margin = 0.02 * tree_dom.extents
        tree_dom = Aabb(tree_dom.min - margin, tree_dom.max + margin)

    tree_cfg = config.get("tree", {"depth_cap": 5})
    if "n_max" in tree_cfg:
        filled = flood_fill(build_geo_tree(soup, tree_dom, int(tree_cfg["n_max"])))
        tree_info = {"mode": "fixed", "n_max": int(tree_cfg["n_max"])}
    else:
        result, filled = auto_depth(soup, tree_dom, int(tree_cfg.get("depth_cap", 5)))
        tree_info = {"mode": "auto", "n_max": result.chosen,
                     "first_flooded": result.first_flooded,
                     "interior_counts": result.interior_counts}
    engine = PmcEngine(filled, soup)

    return BuiltProblem(
        soup=soup,
        grid=grid,
        engine=engine,
        material=material,
        boundary=_parse_boundary(config.get("boundary", {})),
        policy=POLICIES[config.get("policy", "majority")],
        k=int(config.get("k", 1)),
        q=float(config.get("q", 8.0)),
        solver_opts=dict(config.get("solver", {})),
        tree_info=tree_info,
    )


def load_problem(path) -> BuiltProblem:
    path = Path(path)
    with open(path) as fh:
        config = json.load(fh)
    return build_problem(config, base_dir=path.parent)


def run_solve(problem: BuiltProblem, gauss_n: int = None):
    """Assemble and solve the problem under its configured policy.

    Returns ``(SolveResult, AssemblyContext)``.
    """
    ctx = AssemblyContext(problem.grid, problem.engine, problem.k,
                          q=problem.q, gauss_n=gauss_n)
    K, f = assemble_from_context(ctx, problem.material, problem.policy)
    for spec in problem.boundary.neumann:
        tris = spec.resolve_triangles(problem.soup)
        patches = clean_surface_for_integration(tris, problem.grid)
        f = f + apply_neumann(problem.grid, patches,
                              traction=spec.traction, pressure=spec.pressure)
    constrained = apply_dirichlet(problem.grid, K, f, problem.boundary,
                                  material=problem.material, soup=problem.soup)
    opts = problem.solver_opts
    res = solve(K, f, method=opts.get("method", "cg"),
                tol=float(opts.get("tol", 1e-10)),
                maxit=opts.get("maxit"), constrained=constrained)
    return res, ctx


def run_bracket(problem: BuiltProblem, gauss_n: int = None) -> BracketResult:
    ctx = AssemblyContext(problem.grid, problem.engine, problem.k,
                          q=problem.q, gauss_n=gauss_n)
    opts = problem.solver_opts
    return bracket_run(ctx, problem.material, problem.boundary,
                       soup=problem.soup, method=opts.get("method", "cg"),
                       tol=float(opts.get("tol", 1e-10)))


def energy_csv_rows(run_id: str, policy: str, p: int, k: int, q: float,
                    result: SolveResult) -> str:
    return (f"{run_id},{policy},{p},{k},{q!r},{result.energy!r},"
            f"{result.iterations}\n")


ENERGY_CSV_HEADER = "run_id,policy,p,k,q,U,iterations\n"
