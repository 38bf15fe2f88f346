import io
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dirtyfcm import fixtures
from dirtyfcm.mesh_io import (Aabb, StlParseError, TriangleSoup, bounding_box,
                              explode, index_mesh, load_stl, save_stl,
                              topology_report)


# -- STL round trips ---------------------------------------------------------

def test_load_binary_cube(cube_soup):
    data = save_stl(cube_soup, "binary")
    soup = load_stl(data)
    assert len(soup) == 12
    assert soup.corners.reshape(-1, 3).shape == (36, 3)


def test_binary_byte_count(cube_soup):
    assert len(save_stl(cube_soup, "binary")) == 80 + 4 + 12 * 50


def test_ascii_zero_facets():
    soup = load_stl(b"solid empty\nendsolid empty\n")
    assert len(soup) == 0


def test_truncated_binary_errors(cube_soup):
    data = save_stl(cube_soup, "binary")[:-7]
    with pytest.raises(StlParseError) as err:
        load_stl(data)
    assert err.value.byte_offset is not None


def test_declared_count_exceeds_payload(cube_soup):
    data = bytearray(save_stl(cube_soup, "binary"))
    struct.pack_into("<I", data, 80, 99)
    with pytest.raises(StlParseError):
        load_stl(bytes(data))


def test_stream_input(cube_soup):
    data = save_stl(cube_soup, "binary")
    soup = load_stl(io.BytesIO(data))
    assert len(soup) == 12


def test_empty_soup_saves():
    data = save_stl(TriangleSoup.empty(), "binary")
    assert len(data) == 84
    assert len(load_stl(data)) == 0


def test_ascii_round_trip(cube_soup):
    soup = load_stl(save_stl(cube_soup, "ascii"))
    assert np.allclose(soup.corners, cube_soup.corners)
    assert np.allclose(soup.normals, cube_soup.normals)


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=1, max_value=12), st.integers(min_value=0, max_value=2 ** 31))
def test_binary_round_trip_bit_exact(n, seed):
    rng = np.random.default_rng(seed)
    corners = rng.uniform(-50, 50, size=(n, 3, 3)).astype(np.float32).astype(float)
    normals = rng.normal(size=(n, 3)).astype(np.float32).astype(float)
    soup = TriangleSoup(corners, normals)
    back = load_stl(save_stl(soup, "binary"))
    assert np.array_equal(back.corners, soup.corners)
    assert np.array_equal(back.normals, soup.normals)


# -- Indexing ----------------------------------------------------------------

def test_index_cube_counts(cube_mesh):
    assert len(cube_mesh.vertices) == 8
    assert len(cube_mesh.faces) == 12
    assert len(cube_mesh.edges) == 18
    assert all(len(e.face_ids) == 2 for e in cube_mesh.edges.values())
    # Euler characteristic of a closed genus-0 surface
    assert len(cube_mesh.vertices) - len(cube_mesh.edges) + len(cube_mesh.faces) == 2


def test_index_zero_tolerance_welds_exact_duplicates(cube_soup):
    mesh = index_mesh(cube_soup, 0.0)
    assert len(mesh.vertices) == 8
    assert len(mesh.edges) == 18


def test_index_perturbed_corner(cube_soup):
    soup = cube_soup.copy()
    soup.corners[0, 0] = soup.corners[0, 0] + np.array([1e-3, 0, 0])
    mesh = index_mesh(soup, 1e-6)
    assert len(mesh.vertices) == 9
    report = topology_report(mesh, check_self_intersections=False)
    assert report.free_edge_count >= 1


def test_index_idempotent(cube_mesh):
    again = index_mesh(explode(cube_mesh), cube_mesh.weld_tol)
    assert len(again.vertices) == len(cube_mesh.vertices)
    assert len(again.edges) == len(cube_mesh.edges)
    assert len(again.faces) == len(cube_mesh.faces)


def test_degenerate_face_flagged():
    tri = np.array([[[0, 0, 0], [1, 0, 0], [0, 1, 0]],
                    [[0, 0, 0], [0, 0, 0], [0, 1, 0]]], dtype=float)
    soup = TriangleSoup(tri, np.tile([0, 0, 1.0], (2, 1)))
    mesh = index_mesh(soup, 1e-9)
    assert len(mesh.degenerate_face_ids) == 1
    assert len(mesh.faces) == 2  # retained, never dropped


# -- Topology report ---------------------------------------------------------

def test_report_welded_cube(cube_mesh):
    r = topology_report(cube_mesh)
    assert r.free_edge_count == 0
    assert r.non_manifold_edge_count == 0
    assert r.duplicate_face_count == 0
    assert r.inconsistent_orientation_pair_count == 0
    assert r.self_intersection_pair_count == 0
    assert r.watertight


def test_report_missing_face(cube_soup):
    soup = TriangleSoup(cube_soup.corners[1:], cube_soup.normals[1:])
    r = topology_report(index_mesh(soup, 1e-9), check_self_intersections=False)
    assert r.free_edge_count == 3
    assert not r.watertight


def test_report_duplicated_face(cube_soup):
    corners = np.concatenate([cube_soup.corners, cube_soup.corners[:1]])
    normals = np.concatenate([cube_soup.normals, cube_soup.normals[:1]])
    r = topology_report(index_mesh(TriangleSoup(corners, normals), 1e-9),
                        check_self_intersections=False)
    assert r.non_manifold_edge_count == 3
    assert r.duplicate_face_count == 1
    assert not r.watertight


def test_delete_face_free_edges_match_boundary(cube_mesh):
    from dirtyfcm.flaws import op_delete
    fid = sorted(cube_mesh.faces)[4]
    boundary_edges = len(cube_mesh.faces[fid].eids)
    out = op_delete(cube_mesh, fid, eps=1.0)
    r = topology_report(out, check_self_intersections=False)
    assert r.free_edge_count == boundary_edges


def test_exploded_soup_counts_no_self_intersections(cube_mesh):
    soup = explode(cube_mesh)
    mesh = index_mesh(soup, 0.0)  # weld tol 0 still welds exact duplicates
    r = topology_report(mesh)
    assert r.self_intersection_pair_count == 0


def test_piercing_triangle_detected(cube_soup):
    spike = np.array([[[0.5, 0.5, 0.5], [0.5, 0.2, 1.7], [0.6, 0.8, 1.7]]])
    corners = np.concatenate([cube_soup.corners, spike])
    normals = np.concatenate([cube_soup.normals, [[0, 0, 1.0]]])
    r = topology_report(index_mesh(TriangleSoup(corners, normals), 1e-9))
    assert r.self_intersection_pair_count >= 1


def test_report_json_stable_fields(cube_mesh):
    import json
    data = json.loads(topology_report(cube_mesh).to_json())
    assert set(data) == {
        "free_edge_count", "free_edge_ids", "non_manifold_edge_count",
        "duplicate_face_count", "inconsistent_orientation_pair_count",
        "self_intersection_pair_count", "watertight"}


# -- Bounding boxes ----------------------------------------------------------

def test_bbox_padded_cube(cube_soup):
    box = bounding_box(cube_soup, 0.3)
    assert np.allclose(box.min, [-0.3, -0.3, -0.3])
    assert np.allclose(box.max, [1.3, 1.3, 1.3])


def test_bbox_exact(cube_soup):
    box = bounding_box(cube_soup, 0.0)
    assert np.allclose(box.min, 0.0)
    assert np.allclose(box.max, 1.0)


def test_bbox_flat_floor():
    tri = TriangleSoup(np.array([[[0, 0, 0], [2, 0, 0], [0, 1, 0]]], dtype=float),
                       np.array([[0, 0, 1.0]]))
    box = bounding_box(tri, 0.1)
    diag = np.linalg.norm([2.0, 1.0, 0.0])
    assert box.extents[2] == pytest.approx(1e-3 * diag)
    assert box.extents[0] == pytest.approx(2.0 * 1.2)


def test_bbox_empty_errors():
    with pytest.raises(ValueError):
        bounding_box(TriangleSoup.empty(), 0.1)


def test_aabb_invariants():
    with pytest.raises(ValueError):
        Aabb((0, 0, 0), (-1, 1, 1))
    box = Aabb((0, 0, 0), (2, 2, 2))
    assert box.contains([(1, 1, 1)]).all()
    assert not box.contains([(3, 1, 1)]).any()


# -- Watertight fixtures -----------------------------------------------------

@pytest.mark.parametrize("soup_fn", [
    lambda: fixtures.icosphere(2),
    lambda: fixtures.quarter_plate_with_hole(n_arc=8),
    lambda: fixtures.two_cubes(0.4),
])
def test_fixture_generators_watertight(soup_fn):
    soup = soup_fn()
    r = topology_report(index_mesh(soup, 1e-9), check_self_intersections=False)
    assert r.watertight
