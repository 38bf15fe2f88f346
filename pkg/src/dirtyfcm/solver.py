"""Linear solve, energies, bracketing, field sampling, and VTK export."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .fcm import (AssemblyContext, ConstrainedSystem, FcmGrid, Material,
                  apply_dirichlet, apply_neumann, assemble_from_context,
                  clean_surface_for_integration, _basis_at_points, _elastic_B,
                  ELASTICITY)
from .pmc import (BRACKET_INSIDE_POLICY, BRACKET_OUTSIDE_POLICY,
                  MAJORITY_POLICY, PmcEngine, VotePolicy, ambiguity_stats)


class SolverError(RuntimeError):
    def __init__(self, message, residuals=None):
        super().__init__(message)
        self.residuals = residuals or []


@dataclass
class SolveResult:
    u: np.ndarray
    iterations: int
    residual: float
    energy: float
    wall_time: float


def solve(K, f, method: str = "cg", tol: float = 1e-10, maxit: int = None,
          constrained: ConstrainedSystem = None) -> SolveResult:
    """Solve K u = f; returns the full-length solution.

    ``cg`` is Jacobi-preconditioned conjugate gradients with a relative
    residual stop; the diagonal scaling tames part of the conditioning
    spread the indicator's 10^-q floor introduces, but penalty-dominated
    systems routinely defeat it -- that is what the iteration trace in the
    raised error is for.  ``direct`` uses a sparse LU for sparse input and
    a dense solve (limited to 3000 unknowns) otherwise.  When a constrained
    system is given, the reduced problem is solved and the prescribed
    values folded back in.
    """
    t0 = time.perf_counter()
    if constrained is not None:
        K_red, f_red = constrained.reduced()
    else:
        K_red, f_red = K, f

    if method == "direct":
        if sp.issparse(K_red):
            lu = sp.linalg.splu(K_red.tocsc())
            u_red = lu.solve(f_red)
            res = float(np.linalg.norm(K_red @ u_red - f_red) /
                        (np.linalg.norm(f_red) or 1.0))
        else:
            if K_red.shape[0] > 3000:
                raise SolverError(
                    f"dense direct solve limited to 3000 dofs, got {K_red.shape[0]}")
            dense = np.asarray(K_red)
            u_red = np.linalg.solve(dense, f_red)
            res = float(np.linalg.norm(dense @ u_red - f_red) /
                        (np.linalg.norm(f_red) or 1.0))
        iters = 1
    elif method == "cg":
        u_red, iters, res, hist = _pcg(K_red, f_red, tol=tol, maxit=maxit)
        if res > tol:
            raise SolverError(
                f"cg stalled at relative residual {res:.3e} after {iters} iterations",
                residuals=hist)
    else:
        raise ValueError(f"unknown solver {method!r}")

    if constrained is not None:
        u = constrained.expand(u_red)
        K_full, f_full = constrained.K, constrained.f
    else:
        u = u_red
        K_full, f_full = K, f
    energy = strain_energy(K_full, u)
    return SolveResult(u, iters, res, energy, time.perf_counter() - t0)


def _pcg(K, f, tol=1e-10, maxit=None):
    n = K.shape[0]
    if maxit is None:
        maxit = max(10 * n, 1000)
    fnorm = np.linalg.norm(f)
    if fnorm == 0.0:
        return np.zeros(n), 0, 0.0, []
    diag = K.diagonal() if sp.issparse(K) else np.diag(K)
    inv_diag = np.where(diag > 0, 1.0 / np.where(diag > 0, diag, 1.0), 1.0)

    u = np.zeros(n)
    r = f.copy()
    z = inv_diag * r
    d = z.copy()
    rz = r @ z
    hist = []
    it = 0
    while it < maxit:
        res = np.linalg.norm(r) / fnorm
        hist.append(res)
        if res <= tol:
            break
        Kd = K @ d
        denom = d @ Kd
        if denom <= 0:
            break  # lost positive definiteness; report stall
        a = rz / denom
        u += a * d
        r -= a * Kd
        z = inv_diag * r
        rz_new = r @ z
        d = z + (rz_new / rz) * d
        rz = rz_new
        it += 1
    res = float(np.linalg.norm(r) / fnorm)
    return u, it, res, hist


def strain_energy(K, u) -> float:
    """U = u^T K u / 2."""
    return float(0.5 * (u @ (K @ u)))


@dataclass
class BracketResult:
    """Energies from forcing ambiguous points outside / majority / inside.

    The stiffness ordering between the extremes is structural; the energy
    ordering is reported, not asserted, since load terms shift with the
    policy as well.
    """

    U_low: float
    U_majority: float
    U_high: float
    rel_width: float
    ordering_violated: bool
    results: dict = field(default_factory=dict)
    stats: dict = field(default_factory=dict)


def bracket_run(ctx: AssemblyContext, material: Material, boundary,
                soup=None, method: str = "cg", tol: float = 1e-10) -> BracketResult:
    """Assemble and solve under all three vote policies, one classification.

    The context's stored votes are reused; only the indicator decision is
    re-derived per policy, so bracketing costs two extra assemblies and
    solves, not two extra classifications.
    """
    grid = ctx.grid
    neumann_load = np.zeros(grid.n_dof)
    if boundary is not None:
        for spec in boundary.neumann:
            tris = spec.resolve_triangles(soup) if soup is not None else spec.surface
            patches = clean_surface_for_integration(np.asarray(tris, dtype=float).reshape(-1, 3, 3), grid)
            neumann_load += apply_neumann(grid, patches,
                                          traction=spec.traction, pressure=spec.pressure)

    energies = {}
    results = {}
    for name, policy in (("low", BRACKET_OUTSIDE_POLICY),
                         ("majority", MAJORITY_POLICY),
                         ("high", BRACKET_INSIDE_POLICY)):
        K, f = assemble_from_context(ctx, material, policy)
        f = f + neumann_load
        constrained = apply_dirichlet(grid, K, f, boundary, material=material, soup=soup) \
            if boundary is not None else None
        try:
            res = solve(K, f, method=method, tol=tol, constrained=constrained)
        except SolverError as exc:
            raise SolverError(f"policy {name}: {exc}", residuals=exc.residuals) from exc
        energies[name] = res.energy
        results[name] = res

    U_low, U_maj, U_high = energies["low"], energies["majority"], energies["high"]
    width = (U_high - U_low) / U_maj if U_maj else 0.0
    violated = not (U_low <= U_maj + 1e-12 * abs(U_maj) and
                    U_maj <= U_high + 1e-12 * abs(U_maj))
    return BracketResult(U_low, U_maj, U_high, float(width), violated,
                         results=results, stats=ambiguity_stats(ctx.batch))


# ---------------------------------------------------------------------------
# Field sampling
# ---------------------------------------------------------------------------

def sample_field(grid: FcmGrid, u: np.ndarray, points) -> np.ndarray:
    """Displacement vectors (elasticity) or temperatures (diffusion)."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    nc = grid.n_comp
    out = np.zeros((len(points), nc))
    for i, (cell, N, _) in enumerate(_basis_at_points(grid, points)):
        dofs = grid.cell_dofs(cell)
        coeff = u[dofs].reshape(-1, nc)
        out[i] = N @ coeff
    return out[:, 0] if nc == 1 else out


def stresses(grid: FcmGrid, u: np.ndarray, material: Material, points) -> np.ndarray:
    """Voigt stresses (xx, yy, zz, xy, yz, zx) at the points."""
    if grid.physics != ELASTICITY:
        raise ValueError("stresses need an elasticity grid")
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    C = material.constitutive()
    out = np.zeros((len(points), 6))
    for i, (cell, _, G) in enumerate(_basis_at_points(grid, points)):
        dofs = grid.cell_dofs(cell)
        B = _elastic_B(G[:, :, None])[0]  # (6, 3*nmodes)
        out[i] = C @ (B @ u[dofs])
    return out


def von_mises(grid: FcmGrid, u: np.ndarray, material: Material, points) -> np.ndarray:
    s = stresses(grid, u, material, points)
    sx, sy, sz, sxy, syz, szx = s.T
    return np.sqrt(sx ** 2 + sy ** 2 + sz ** 2 - sx * sy - sy * sz - sz * sx
                   + 3.0 * (sxy ** 2 + syz ** 2 + szx ** 2))


# ---------------------------------------------------------------------------
# VTK export
# ---------------------------------------------------------------------------

def export_vtk(grid: FcmGrid, u: np.ndarray, engine: PmcEngine, path,
               material: Material = None, q: float = 8.0,
               policy: VotePolicy = MAJORITY_POLICY):
    """Write cell-wise sampled fields as a legacy VTK point cloud.

    Each cell contributes a (p+1)^3 lattice of sample points carrying the
    primary field, the indicator, and (for elasticity, when a material is
    given) the von Mises stress.  Pass ``grid=None`` for a valid header-only
    file.
    """
    if grid is None:
        with open(path, "w") as fh:
            fh.write("# vtk DataFile Version 2.0\n")
            fh.write("dirtyfcm fields\nASCII\nDATASET UNSTRUCTURED_GRID\n")
            fh.write("POINTS 0 float\n")
        return 0

    n1 = grid.p + 1
    ticks = np.linspace(0.0, 1.0, n1)
    pts = []
    for cell in grid.cell_ids():
        box = grid.cell_box(cell)
        X, Y, Z = np.meshgrid(box.min[0] + ticks * box.extents[0],
                              box.min[1] + ticks * box.extents[1],
                              box.min[2] + ticks * box.extents[2], indexing="ij")
        pts.append(np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1))
    pts = np.concatenate(pts)

    field_vals = sample_field(grid, u, pts)
    inside = engine.classify_batch(pts).labels(policy)
    alpha_vals = np.where(inside, 1.0, 10.0 ** (-q))
    vm = None
    if grid.physics == ELASTICITY and material is not None:
        vm = von_mises(grid, u, material, pts)

    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 2.0\n")
        fh.write("dirtyfcm fields\nASCII\nDATASET UNSTRUCTURED_GRID\n")
        fh.write(f"POINTS {len(pts)} float\n")
        for p in pts:
            fh.write(f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g}\n")
        fh.write(f"CELLS {len(pts)} {2 * len(pts)}\n")
        for i in range(len(pts)):
            fh.write(f"1 {i}\n")
        fh.write(f"CELL_TYPES {len(pts)}\n")
        fh.write("1\n" * len(pts))
        fh.write(f"POINT_DATA {len(pts)}\n")
        if grid.physics == ELASTICITY:
            fh.write("VECTORS displacement float\n")
            for v in np.atleast_2d(field_vals):
                fh.write(f"{v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        else:
            fh.write("SCALARS temperature float 1\nLOOKUP_TABLE default\n")
            for v in np.atleast_1d(field_vals):
                fh.write(f"{v:.9g}\n")
        fh.write("SCALARS alpha float 1\nLOOKUP_TABLE default\n")
        for a in alpha_vals:
            fh.write(f"{a:.9g}\n")
        if vm is not None:
            fh.write("SCALARS von_mises float 1\nLOOKUP_TABLE default\n")
            for v in vm:
                fh.write(f"{v:.9g}\n")
    return len(pts)
