import json

import numpy as np
import pytest
from click.testing import CliRunner

from dirtyfcm import fixtures
from dirtyfcm.cli import main
from dirtyfcm.fixtures import gap_cube_script
from dirtyfcm.mesh_io import write_stl
from dirtyfcm.studies import StudyConfig, cube_gap_study, flawed_plate_script, plate_soups


@pytest.fixture()
def runner():
    return CliRunner()


@pytest.fixture()
def workdir(tmp_path):
    write_stl(fixtures.cube(), tmp_path / "cube.stl")
    (tmp_path / "gap.json").write_text(gap_cube_script(0.1).to_json())
    rng = np.random.default_rng(3)
    pts = rng.uniform(-0.2, 1.2, size=(40, 3))
    with open(tmp_path / "pts.csv", "w") as fh:
        fh.write("x,y,z\n")
        for p in pts:
            fh.write(f"{p[0]},{p[1]},{p[2]}\n")
    problem = {
        "stl": "cube.stl",
        "physics": "elasticity",
        "material": {"E": 10000.0, "nu": 0.3, "body_load": [0, 0, -1000.0]},
        "grid": {"box": {"min": [-0.3, -0.3, -0.3], "max": [1.3, 1.3, 1.3]},
                 "nx": 2, "ny": 2, "nz": 2, "p": 1},
        "tree": {"depth_cap": 4},
        "k": 1, "q": 8.0,
        "policy": "majority",
        "boundary": {"dirichlet": [{"surface": {"axis": 2, "value": 0.0},
                                    "components": [0, 1, 2], "enforcement": "penalty"}],
                     "neumann": []},
        "solver": {"method": "direct"},
    }
    (tmp_path / "problem.json").write_text(json.dumps(problem))
    return tmp_path


def test_cli_inspect_watertight(runner, workdir):
    result = runner.invoke(main, ["inspect", str(workdir / "cube.stl")])
    assert result.exit_code == 0
    data = json.loads(result.output)
    assert data["watertight"] is True


def test_cli_inspect_bad_file(runner, tmp_path):
    bad = tmp_path / "bad.stl"
    bad.write_bytes(b"\x00" * 100)
    result = runner.invoke(main, ["inspect", str(bad)])
    assert result.exit_code != 0


def test_cli_inject_and_reinspect(runner, workdir):
    out = workdir / "dirty.stl"
    result = runner.invoke(main, ["inject", str(workdir / "cube.stl"),
                                  str(workdir / "gap.json"), "--out", str(out)])
    assert result.exit_code == 0
    info = json.loads(result.output)
    assert info["eps_gap"] > 0
    assert (workdir / "dirty_ledger.json").exists()
    report = runner.invoke(main, ["inspect", str(out), "--skip-intersections"])
    data = json.loads(report.output)
    assert data["free_edge_count"] == 4
    assert data["watertight"] is False


def test_cli_pmc_labels(runner, workdir):
    out = workdir / "labels.csv"
    result = runner.invoke(main, [
        "pmc", str(workdir / "cube.stl"), str(workdir / "pts.csv"),
        "--out", str(out), "--n-max", "4",
        "--tree-json", str(workdir / "tree.json")])
    assert result.exit_code == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "x,y,z,label,votes_in,votes_out,tie"
    assert len(lines) == 41
    labels = [ln.split(",")[3] for ln in lines[1:]]
    assert set(labels) <= {"inside", "outside"}
    tree = json.loads((workdir / "tree.json").read_text())
    assert tree["inside"] > 0


def test_cli_solve_outputs(runner, workdir):
    out = workdir / "solveout"
    result = runner.invoke(main, ["solve", str(workdir / "problem.json"),
                                  "--out", str(out)])
    assert result.exit_code == 0
    summary = json.loads(result.output)
    assert summary["U"] > 0
    csv = (out / "energy.csv").read_text().splitlines()
    assert csv[0] == "run_id,policy,p,k,q,U,iterations"
    assert (out / "fields.vtk").read_text().startswith("# vtk DataFile")


def test_cli_bracket_flawless_zero_width(runner, workdir):
    out = workdir / "brk"
    result = runner.invoke(main, ["bracket", str(workdir / "problem.json"),
                                  "--out", str(out)])
    assert result.exit_code == 0
    data = json.loads(result.output)
    assert data["rel_width"] == pytest.approx(0.0, abs=1e-12)
    rows = (out / "bracket.csv").read_text().splitlines()
    assert len(rows) == 4


def test_cli_study_cube_tiny(runner, tmp_path):
    cfg = {"betas": [0], "gap_fractions": [0.2], "cube_cells": 3, "cube_p": 1}
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(cfg))
    out = tmp_path / "study"
    result = runner.invoke(main, ["study-cube", "--out", str(out),
                                  "--reduced", "--config", str(cfg_path)])
    assert result.exit_code == 0, result.output
    assert (out / "cube_gap.csv").exists()
    assert (out / "cube_gap.png").exists()
    header = (out / "cube_gap.csv").read_text().splitlines()[0]
    assert header == "eps_gap,beta,n_max,U,U_ref,rel_dev,measured_opening"


def test_study_rows_within_bracket_sanity(tmp_path):
    """Deviation from the flawless reference stays bounded on the tiny config."""
    cfg = StudyConfig(out_dir=str(tmp_path), betas=[0], gap_fractions=[0.2],
                      cube_cells=3, cube_p=1)
    rows = cube_gap_study(cfg)
    assert all(np.isfinite(r["U"]) for r in rows)
    assert all(r["rel_dev"] < 0.2 for r in rows)


def test_flawed_plate_script_defect_mix():
    valid, flawed, ledger = plate_soups(StudyConfig(plate_arc=12))
    assert len(flawed) > len(valid)  # duplicates added
    ops = [s.operator for s in flawed_plate_script().steps]
    assert "duplicate" in ops
    assert "intersect_move" in ops
    assert "move" in ops
    assert ledger.eps_gap > 0


def test_heat_diffusion_smoke_on_flawed_cube(cube_domain):
    """Scalar diffusion on the torn cube: heated volume, cold base."""
    from dirtyfcm.fcm import (BoundarySpec, DIFFUSION, DirichletSpec, Material,
                              apply_dirichlet, assemble_system, build_grid)
    from dirtyfcm.pmc import PmcEngine
    from dirtyfcm.solver import sample_field, solve
    from dirtyfcm.spacetree import build_geo_tree, flood_fill

    soup, _ = fixtures.gap_cube(0.1)
    engine = PmcEngine(flood_fill(build_geo_tree(soup, cube_domain, 4)), soup)
    grid = build_grid(cube_domain, 3, 3, 3, 2, DIFFUSION)
    mat = Material(DIFFUSION, kappa=1.0, body_load=[5.0])
    bnd = BoundarySpec(dirichlet=[DirichletSpec(
        components=[0], enforcement="penalty", surface={"axis": 2, "value": 0.0})])
    K, f, ctx = assemble_system(grid, engine, mat, k=1)
    cs = apply_dirichlet(grid, K, f, bnd, material=mat, soup=soup)
    res = solve(K, f, method="direct", constrained=cs)
    assert res.energy > 0
    T = sample_field(grid, res.u, np.array([[0.5, 0.5, 0.9], [0.5, 0.5, 0.05]]))
    assert T[0] > T[1]  # hotter away from the cooled base
    assert np.isfinite(T).all()
