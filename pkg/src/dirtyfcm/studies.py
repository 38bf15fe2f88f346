"""Reproducible parameter studies: cube gap sweep and plate convergence.

Each study writes a CSV (deterministic byte-for-byte for a fixed config)
and a matplotlib figure next to it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from . import fixtures
from .fcm import (AssemblyContext, BoundarySpec, DirichletSpec, ELASTICITY,
                  Material, NeumannSpec, apply_dirichlet, apply_neumann,
                  assemble_from_context, build_grid,
                  clean_surface_for_integration)
from .flaws import FlawScript, FlawStep, apply_script
from .mesh_io import Aabb, index_mesh
from .pmc import MAJORITY_POLICY, PmcEngine, ambiguity_stats
from .solver import bracket_run, solve
from .spacetree import LeafState, build_geo_tree, flood_fill


@dataclass
class StudyConfig:
    out_dir: str = "."
    reduced: bool = True
    seed: int = 0
    # cube study knobs
    gap_fractions: list = field(default_factory=lambda: [0.2, 0.1, 0.05, 0.025])
    betas: list = field(default_factory=lambda: [0, 1, 2, 3])
    cube_cells: int = None
    cube_p: int = None
    # plate study knobs
    plate_p_cap: int = None
    plate_arc: int = None
    k: int = None
    q: float = 8.0
    solver_tol: float = 1e-9
    solver_method: str = "direct"

    def __post_init__(self):
        if self.cube_cells is None:
            self.cube_cells = 5 if self.reduced else 9
        if self.cube_p is None:
            self.cube_p = 2 if self.reduced else 3
        if self.plate_p_cap is None:
            self.plate_p_cap = 3 if self.reduced else 4
        if self.plate_arc is None:
            self.plate_arc = 16 if self.reduced else 32
        if self.k is None:
            self.k = 1 if self.reduced else 2


def _fmt(x) -> str:
    return repr(float(x))


# ---------------------------------------------------------------------------
# Cube under self-weight with a growing gap
# ---------------------------------------------------------------------------

def _cube_tree_domain(beta: int) -> Aabb:
    # 1.6^3 reconstruction box stepped along the space diagonal; equivalent
    # to shifting the unit cube against a fixed box in 0.05 increments.
    lo = -0.3 + 0.05 * beta
    return Aabb((lo, lo, lo), (lo + 1.6, lo + 1.6, lo + 1.6))


def _cube_run(soup, tree_domain: Aabb, n_max: int, cfg: StudyConfig):
    """Solve the clamped self-weight cube; returns (U, n_used, iterations).

    The cell block conforms to the cube (defect flaps poking outside the
    block are seen only through the membership tests), so the conditioning
    stays sane while the reconstruction tree shifts underneath.
    """
    n_used = n_max
    filled = None
    while n_used >= 2:
        filled = flood_fill(build_geo_tree(soup, tree_domain, n_used))
        if filled.state_counts()[LeafState.INSIDE] > 0:
            break
        n_used -= 1
    if filled is None or filled.state_counts()[LeafState.INSIDE] == 0:
        raise RuntimeError("no interior leaves at any usable depth")
    engine = PmcEngine(filled, soup)
    n = cfg.cube_cells
    grid = build_grid(Aabb((0.0, 0.0, 0.0), (1.0, 1.0, 1.0)), n, n, n,
                      cfg.cube_p, ELASTICITY)
    material = Material(ELASTICITY, E=10000.0, nu=0.3, body_load=(0.0, 0.0, -1000.0))
    boundary = BoundarySpec(dirichlet=[DirichletSpec(
        components=[0, 1, 2], plane=(2, 0.0), enforcement="strong")])
    ctx = AssemblyContext(grid, engine, cfg.k, q=cfg.q)
    K, f = assemble_from_context(ctx, material, MAJORITY_POLICY)
    constrained = apply_dirichlet(grid, K, f, boundary, material=material, soup=soup)
    res = solve(K, f, method=cfg.solver_method, tol=cfg.solver_tol, constrained=constrained)
    return res.energy, n_used, res.iterations


def cube_gap_study(cfg: StudyConfig) -> list:
    """Energy deviation of the torn cube versus gap size and box position.

    For every embedding shift the flawless reference is solved at the
    deepest tree of the sweep, then each gap size runs at the depth the gap
    admits; rows carry the relative energy deviation.
    """
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    deepest = max(int(round(np.log2(1.6 / g))) for g in cfg.gap_fractions)
    rows = []
    for beta in cfg.betas:
        domain = _cube_tree_domain(beta)
        ref_soup = fixtures.cube()
        U_ref, _, _ = _cube_run(ref_soup, domain, deepest, cfg)
        for gap in cfg.gap_fractions:
            n_max = int(round(np.log2(1.6 / gap)))
            soup, ledger = fixtures.gap_cube(gap)
            U, n_used, iters = _cube_run(soup, domain, n_max, cfg)
            rows.append({
                "eps_gap": gap, "beta": beta, "n_max": n_used,
                "U": U, "U_ref": U_ref,
                "rel_dev": abs(U - U_ref) / U_ref,
                "measured_opening": ledger.eps_gap,
            })

    csv_path = out / "cube_gap.csv"
    with open(csv_path, "w") as fh:
        fh.write("eps_gap,beta,n_max,U,U_ref,rel_dev,measured_opening\n")
        for r in rows:
            fh.write(f"{_fmt(r['eps_gap'])},{r['beta']},{r['n_max']},"
                     f"{_fmt(r['U'])},{_fmt(r['U_ref'])},{_fmt(r['rel_dev'])},"
                     f"{_fmt(r['measured_opening'])}\n")
    _cube_figure(rows, cfg, out / "cube_gap.png")
    return rows


def _cube_figure(rows, cfg: StudyConfig, path):
    fig, ax = plt.subplots(figsize=(7, 4))
    markers = ["D", "s", "x", "^"]
    for m, beta in enumerate(cfg.betas):
        sel = sorted((r for r in rows if r["beta"] == beta), key=lambda r: r["eps_gap"])
        x = [100 * r["eps_gap"] for r in sel]
        y = [100 * r["rel_dev"] for r in sel]
        ax.plot(x, y, marker=markers[m % len(markers)], label=f"shift {beta}")
    ax.set_xscale("log")
    ax.set_xlabel("gap size / cube edge [%]")
    ax.set_ylabel("|U - U_ref| / U_ref [%]")
    ax.grid(True, which="both", linestyle="--", alpha=0.4)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


# ---------------------------------------------------------------------------
# Quarter plate with hole: p-convergence and bracketing
# ---------------------------------------------------------------------------

def flawed_plate_script() -> FlawScript:
    """Defects on the plate: an offset copy of a top facet, an exact double
    of a hole facet, a deformed hole facet pushed into its neighbors, and a
    torn top facet leaving a gap."""
    return FlawScript(steps=[
        FlawStep("intersect_move", {"face_near": [2.5, 2.5, 1.0]},
                 {"displacement": [0.0, 0.0, 0.05], "eps": 0.08, "duplicate": True}),
        FlawStep("duplicate", {"face_near": [0.72, 0.69, 0.6]}),
        FlawStep("intersect_move", {"face_near": [0.69, 0.72, 0.3]},
                 {"displacement": [0.04, 0.04, 0.0], "eps": 0.08}),
        FlawStep("explode"),
        FlawStep("move", {"corner_of_triangle": [[3.2, 3.2, 1.0], [3.4, 3.4, 1.0]]},
                 {"displacement": [0.0, 0.0, 0.12], "eps": 0.15}),
    ])


def plate_soups(cfg: StudyConfig):
    valid = fixtures.quarter_plate_with_hole(n_arc=cfg.plate_arc)
    mesh = index_mesh(valid, 1e-9)
    flawed, ledger = apply_script(mesh, flawed_plate_script())
    return valid, flawed, ledger


def _plate_grid(p: int) -> tuple:
    # The cell block covers the plate exactly; only the hole cuts cells.
    # Boundary-sliced cells would create nearly material-free modes whose
    # 10^-q stiffness poisons the conditioning at higher p.
    box = Aabb((0.0, 0.0, 0.0), (4.0, 4.0, 1.0))
    return build_grid(box, 10, 10, 1, p, ELASTICITY)


_PLATE_TREE_DOMAIN = Aabb((-0.5, -0.5, -0.2), (4.6, 4.6, 1.25))


def _plate_boundary() -> BoundarySpec:
    return BoundarySpec(
        dirichlet=[
            DirichletSpec(components=[0], plane=(0, 0.0), enforcement="strong"),
            DirichletSpec(components=[1], plane=(1, 0.0), enforcement="strong"),
            DirichletSpec(components=[2], plane=(2, 0.0), enforcement="strong"),
        ],
        neumann=[NeumannSpec(surface={"axis": 0, "value": 4.0, "tol": 1e-6},
                             traction=np.array([100.0, 0.0, 0.0]))],
    )


def _plate_material() -> Material:
    return Material(ELASTICITY, E=10000.0, nu=0.30)


def plate_study(cfg: StudyConfig) -> dict:
    """p-convergence on the valid and the defective plate, plus a bracket
    run on the defective one at the highest degree.

    The whole sweep shares one Gauss order (the cap's), so the discrete
    energies are exactly nested in p.
    """
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    valid, flawed, ledger = plate_soups(cfg)
    material = _plate_material()
    boundary = _plate_boundary()
    gauss_n = cfg.plate_p_cap + 1

    rows = []
    brackets = {}
    for name, soup, depth_cap in (("valid", valid, 4), ("flawed", flawed, 4)):
        from .spacetree import auto_depth
        result, filled = auto_depth(soup, _PLATE_TREE_DOMAIN, depth_cap)
        engine = PmcEngine(filled, soup)
        prev_ctx = None
        for p in range(1, cfg.plate_p_cap + 1):
            grid = _plate_grid(p)
            ctx = AssemblyContext(grid, engine, cfg.k, q=cfg.q,
                                  gauss_n=gauss_n, reuse=prev_ctx)
            prev_ctx = ctx
            K, f = assemble_from_context(ctx, material, MAJORITY_POLICY)
            for spec in boundary.neumann:
                tris = spec.resolve_triangles(soup)
                patches = clean_surface_for_integration(tris, grid)
                f = f + apply_neumann(grid, patches, traction=spec.traction,
                                      pressure=spec.pressure)
            constrained = apply_dirichlet(grid, K, f, boundary,
                                          material=material, soup=soup)
            res = solve(K, f, method=cfg.solver_method, tol=cfg.solver_tol, constrained=constrained)
            stats = ambiguity_stats(ctx.batch)
            rows.append({"model": name, "p": p, "U": res.energy,
                         "iterations": res.iterations,
                         "n_max": result.chosen, **stats})
            if name == "flawed" and p == cfg.plate_p_cap:
                brackets = _plate_bracket(ctx, material, boundary, flawed, cfg)

    csv_path = out / "plate_convergence.csv"
    with open(csv_path, "w") as fh:
        fh.write("model,p,U,iterations,n_max,total_points,cut_cell_points,"
                 "ambiguous_points,tie_points,cut_cell_pct,ambiguous_pct,tie_pct\n")
        for r in rows:
            fh.write(f"{r['model']},{r['p']},{_fmt(r['U'])},{r['iterations']},"
                     f"{r['n_max']},{r['total_points']},{r['cut_cell_points']},"
                     f"{r['ambiguous_points']},{r['tie_points']},"
                     f"{_fmt(r['cut_cell_pct'])},{_fmt(r['ambiguous_pct'])},"
                     f"{_fmt(r['tie_pct'])}\n")
    with open(out / "plate_bracket.json", "w") as fh:
        json.dump(brackets, fh, indent=2)
    _plate_figure(rows, out / "plate_convergence.png")
    return {"rows": rows, "bracket": brackets, "flaw_ledger": ledger}


def _plate_bracket(ctx, material, boundary, soup, cfg: StudyConfig) -> dict:
    br = bracket_run(ctx, material, boundary, soup=soup, method=cfg.solver_method, tol=cfg.solver_tol)
    return {
        "U_low": br.U_low, "U_majority": br.U_majority, "U_high": br.U_high,
        "rel_width": br.rel_width, "ordering_violated": br.ordering_violated,
        "stats": br.stats,
    }


def _plate_figure(rows, path):
    fig, ax = plt.subplots(figsize=(6.5, 4))
    for name, style in (("valid", "o-"), ("flawed", "s--")):
        sel = sorted((r for r in rows if r["model"] == name), key=lambda r: r["p"])
        ax.plot([r["p"] for r in sel], [r["U"] for r in sel], style, label=name)
    ax.set_xlabel("polynomial degree p")
    ax.set_ylabel("strain energy U")
    ax.grid(True, linestyle="--", alpha=0.4)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
