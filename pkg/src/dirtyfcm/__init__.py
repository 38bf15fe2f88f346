"""dirtyfcm: embedded-domain finite cell analysis on flawed triangle models.

The pipeline: read (possibly broken) STL geometry, diagnose or inject
defects, build a flood-filled space tree for robust point membership, and
run finite cell simulations whose defect-induced error can be bounded by
bracketing runs.
"""

from .mesh_io import (
    Aabb,
    IndexedMesh,
    StlParseError,
    TopologyReport,
    TriangleSoup,
    bounding_box,
    index_mesh,
    load_stl,
    save_stl,
    topology_report,
    write_stl,
)
from .flaws import (
    FlawLedger,
    FlawRefusal,
    FlawScript,
    FlawScriptError,
    FlawStep,
    apply_script,
    measure_max_opening,
)
from .spacetree import (
    AutoDepthResult,
    FilledSpaceTree,
    LeafState,
    SpaceTree,
    auto_depth,
    build_geo_tree,
    flood_fill,
    write_tree_vtk,
)
from .pmc import (
    BRACKET_INSIDE_POLICY,
    BRACKET_OUTSIDE_POLICY,
    MAJORITY_POLICY,
    BatchClassification,
    PmcEngine,
    VotePolicy,
    VoteRecord,
    ambiguity_stats,
)
from .fcm import (
    AssemblyContext,
    BoundarySpec,
    CellSurfacePatch,
    DIFFUSION,
    DirichletSpec,
    ELASTICITY,
    FcmGrid,
    Material,
    NeumannSpec,
    alpha,
    apply_dirichlet,
    apply_neumann,
    assemble_from_context,
    assemble_system,
    build_grid,
    build_integration_tree,
    clean_surface_for_integration,
)
from .solver import (
    BracketResult,
    SolveResult,
    SolverError,
    bracket_run,
    export_vtk,
    sample_field,
    solve,
    strain_energy,
    von_mises,
)
from .problems import build_problem, load_problem, run_bracket, run_solve

__version__ = "0.1.0"
