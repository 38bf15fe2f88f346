import numpy as np
import pytest

from dirtyfcm import fixtures
from dirtyfcm.mesh_io import Aabb, TriangleSoup, bounding_box
from dirtyfcm.spacetree import (FilledSpaceTree, LeafState, SpaceTree,
                                auto_depth, build_geo_tree, flood_fill,
                                write_tree_vtk, _INTERNAL)


@pytest.fixture(scope="module")
def filled_cube(cube_soup, cube_domain):
    return flood_fill(build_geo_tree(cube_soup, cube_domain, 4))


# -- construction -------------------------------------------------------------

def test_cube_tree_has_cut_shell_and_interior(filled_cube):
    counts = filled_cube.state_counts()
    assert counts[LeafState.CUT] > 0
    assert counts[LeafState.INSIDE] > 0
    assert counts[LeafState.OUTSIDE] > 0
    assert counts[LeafState.UNCLASSIFIED] == 0


def test_empty_soup_single_root_leaf(cube_domain):
    tree = build_geo_tree(TriangleSoup.empty(), cube_domain, 3)
    assert list(tree.leaves()) == [((0, 0, 0, 0), LeafState.UNCLASSIFIED)]
    filled = flood_fill(tree)
    assert filled.state_counts()[LeafState.OUTSIDE] == 1


def test_domain_must_contain_model(cube_soup):
    with pytest.raises(ValueError):
        build_geo_tree(cube_soup, Aabb((0, 0, 0), (1, 1, 1)), 3)


def test_leaves_tile_domain(filled_cube):
    vols = filled_cube.state_volumes()
    assert sum(vols.values()) == pytest.approx(1.6 ** 3)


def test_volume_sandwich_cube(filled_cube):
    vols = filled_cube.state_volumes()
    assert vols[LeafState.INSIDE] <= 1.0 + 1e-12
    assert vols[LeafState.INSIDE] + vols[LeafState.CUT] >= 1.0 - 1e-12


def test_volume_sandwich_sphere(icosphere_soup):
    domain = bounding_box(icosphere_soup, 0.25)
    filled = flood_fill(build_geo_tree(icosphere_soup, domain, 4))
    vols = filled.state_volumes()
    # volume of the faceted sphere is below the circumscribed ball's
    v_ball = 4.0 / 3.0 * np.pi * 0.8 ** 3
    assert vols[LeafState.INSIDE] <= v_ball
    assert vols[LeafState.INSIDE] + vols[LeafState.CUT] >= 0.9 * v_ball


def test_refinement_monotone_inside_volume(cube_soup, cube_domain):
    prev = 0.0
    for depth in (3, 4, 5):
        filled = flood_fill(build_geo_tree(cube_soup, cube_domain, depth))
        v = filled.state_volumes()[LeafState.INSIDE]
        assert v >= prev - 1e-12
        prev = v


# -- point location -------------------------------------------------------------

def test_leaf_at_center_and_corner(filled_cube):
    assert filled_cube.state_of(filled_cube.leaf_at((0.5, 0.5, 0.5))) == LeafState.INSIDE
    assert filled_cube.state_of(filled_cube.leaf_at((-0.29, -0.29, -0.29))) == LeafState.OUTSIDE


def test_leaf_at_surface_point_is_cut(filled_cube):
    assert filled_cube.state_of(filled_cube.leaf_at((1.0, 0.5, 0.5))) == LeafState.CUT


def test_leaf_at_outside_domain_errors(filled_cube):
    with pytest.raises(ValueError):
        filled_cube.leaf_at((2.0, 0.0, 0.0))


def test_leaf_at_tie_goes_to_lower_child(cube_domain):
    tree = build_geo_tree(TriangleSoup.empty(), cube_domain, 3)
    # single-leaf tree: force a deeper one with a tiny triangle far away
    tri = TriangleSoup(np.array([[[1.0, 1.0, 1.0], [1.05, 1.0, 1.0], [1.0, 1.05, 1.0]]]),
                       np.array([[0, 0, 1.0]]))
    tree = build_geo_tree(tri, cube_domain, 2)
    mid = 0.5 * (cube_domain.min[0] + cube_domain.max[0])
    key = tree.leaf_at((mid, -0.2, -0.2))
    box = tree.leaf_box(key)
    assert box.max[0] == pytest.approx(mid)  # lower cell owns the plane


def test_empty_tree_root_leaf_center(cube_domain):
    tree = build_geo_tree(TriangleSoup.empty(), cube_domain, 3)
    assert tree.leaf_at(cube_domain.center) == (0, 0, 0, 0)


# -- flood fill -------------------------------------------------------------------

def test_flood_fill_leaky_shell_all_outside(cube_domain):
    """A shell with a hole bigger than the finest leaf floods entirely."""
    soup, _ = fixtures.gap_cube(0.2)
    filled = flood_fill(build_geo_tree(soup, cube_domain, 6))
    counts = filled.state_counts()
    assert counts[LeafState.INSIDE] == 0
    assert counts[LeafState.OUTSIDE] > 0


def test_flood_fill_two_components():
    soup = fixtures.two_cubes(gap=0.6)
    domain = bounding_box(soup, 0.2)
    filled = flood_fill(build_geo_tree(soup, domain, 4))
    inside_boxes = [filled.leaf_center(k) for k, s in filled.leaves()
                    if s == LeafState.INSIDE]
    xs = np.array([c[0] for c in inside_boxes])
    assert (xs < 1.0).any() and (xs > 1.6).any()  # both bodies detected


def test_flood_fill_rejects_cut_seed(cube_soup, cube_domain):
    tree = build_geo_tree(cube_soup, cube_domain, 4)
    key = tree.leaf_at((1.0, 0.5, 0.5))
    with pytest.raises(ValueError):
        flood_fill(tree, seed_key=key)


def test_separation_certificate(filled_cube):
    assert filled_cube.separation_holds()


def test_separation_violated_when_flooded(cube_domain):
    soup, _ = fixtures.gap_cube(0.2)
    filled = flood_fill(build_geo_tree(soup, cube_domain, 6))
    # everything outside: trivially separated (no inside leaves at all)
    assert filled.state_counts()[LeafState.INSIDE] == 0
    assert filled.separation_holds()


# -- auto depth -------------------------------------------------------------------

def test_auto_depth_flawless_reaches_cap(cube_soup, cube_domain):
    result, filled = auto_depth(cube_soup, cube_domain, 5)
    assert result.chosen == 5
    assert result.first_flooded is None
    assert filled.state_counts()[LeafState.INSIDE] > 0


def test_auto_depth_gap_cube_backs_off(cube_domain):
    soup, ledger = fixtures.gap_cube(0.05)
    result, filled = auto_depth(soup, cube_domain, 8)
    assert result.first_flooded is not None
    assert result.chosen < result.first_flooded
    assert result.interior_counts[result.chosen] > 0
    assert result.flooded_all[result.first_flooded]
    # depth-bound consistency: the flooding leaf fits through the opening
    leaf = 1.6 / 2 ** result.first_flooded
    assert leaf <= 2.0 * ledger.eps_gap


def test_auto_depth_deterministic(cube_domain):
    soup, _ = fixtures.gap_cube(0.1)
    r1, _ = auto_depth(soup, cube_domain, 7)
    r2, _ = auto_depth(soup, cube_domain, 7)
    assert r1.chosen == r2.chosen
    assert r1.interior_counts == r2.interior_counts


def test_auto_depth_no_interior_errors():
    # a single open triangle has no interior at any depth
    tri = TriangleSoup(np.array([[[0, 0, 0], [1, 0, 0], [0, 1, 0]]], dtype=float),
                       np.array([[0, 0, 1.0]]))
    domain = bounding_box(tri, 0.4)
    with pytest.raises(RuntimeError):
        auto_depth(tri, domain, 3)


# -- neighbor targets ---------------------------------------------------------------

def test_targets_on_flat_face_have_both_labels(cube_soup, cube_domain):
    # depth 3 puts the face plane mid-leaf: a single-layer cut shell whose
    # leaves see labeled neighbors on both sides
    filled = flood_fill(build_geo_tree(cube_soup, cube_domain, 3))
    key = filled.leaf_at((0.5, 0.5, 1.0))
    assert filled.state_of(key) == LeafState.CUT
    labels = {s for _, s in filled.noncut_neighbor_targets(key)}
    assert LeafState.INSIDE in labels
    assert LeafState.OUTSIDE in labels


def test_targets_near_domain_corner_outside_only(cube_domain):
    # a tiny triangle hugging the domain corner: its cut leaf sees only outside
    lo = cube_domain.min
    tri = TriangleSoup(np.array([[lo + 0.01, lo + (0.05, 0.01, 0.01),
                                  lo + (0.01, 0.05, 0.01)]]), np.array([[0, 0, 1.0]]))
    tree = build_geo_tree(tri, cube_domain, 4)
    seed = tree.leaf_at(cube_domain.max - 1e-9)
    filled = flood_fill(tree, seed_key=seed)
    key = filled.leaf_at(lo + 0.02)
    assert filled.state_of(key) == LeafState.CUT
    labels = {s for _, s in filled.noncut_neighbor_targets(key)}
    assert labels == {LeafState.OUTSIDE}


def test_isolated_cut_leaf_empty_targets(cube_domain):
    """Hand-built tree: a cut leaf fully surrounded by cut leaves."""
    nodes = {(0, 0, 0, 0): _INTERNAL}
    for ox in range(2):
        for oy in range(2):
            for oz in range(2):
                nodes[(1, ox, oy, oz)] = LeafState.CUT
    tree = SpaceTree(cube_domain, 1, nodes)
    filled = FilledSpaceTree(tree, {}, None)
    assert filled.noncut_neighbor_targets((1, 0, 0, 0)) == []


def test_targets_rejects_noncut(filled_cube):
    key = filled_cube.leaf_at((0.5, 0.5, 0.5))
    with pytest.raises(ValueError):
        filled_cube.noncut_neighbor_targets(key)


def test_neighbor_enumeration_across_depths(filled_cube):
    """Face neighbors tile each shared face exactly: areas must match."""
    tree = filled_cube._filled
    for key, _ in list(filled_cube.leaves())[::37]:
        box = tree.leaf_box(key)
        for nb in tree.neighbor_leaves(key, connectivity=6):
            nbox = tree.leaf_box(nb)
            gap = np.maximum(np.maximum(box.min - nbox.max, nbox.min - box.max), 0)
            assert np.count_nonzero(gap > 1e-12) == 0


# -- exports --------------------------------------------------------------------------

def test_plate_tree_scale_order_of_magnitude():
    """A production-like resolution on the plate lands in the
    hundreds-of-thousands-to-millions leaf range (order of magnitude only)."""
    from dirtyfcm import fixtures as fx
    plate = fx.quarter_plate_with_hole(n_arc=24)
    domain = bounding_box(plate, 0.15)
    tree = build_geo_tree(plate, domain, 8)
    n = sum(1 for _ in tree.leaves())
    assert 1e5 < n < 1e7


def test_tree_vtk_and_summary(tmp_path, filled_cube):
    path = tmp_path / "tree.vtk"
    write_tree_vtk(filled_cube, path)
    text = path.read_text().splitlines()
    assert text[0].startswith("# vtk DataFile")
    n_leaves = sum(1 for _ in filled_cube.leaves())
    assert f"CELLS {n_leaves} {9 * n_leaves}" in "\n".join(text)
    import json
    summary = json.loads(filled_cube.summary_json())
    assert summary["cut"] == filled_cube.state_counts()[LeafState.CUT]
