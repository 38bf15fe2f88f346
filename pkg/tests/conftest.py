import numpy as np
import pytest

from dirtyfcm import fixtures, mesh_io


@pytest.fixture(scope="session")
def cube_soup():
    return fixtures.cube()


@pytest.fixture(scope="session")
def cube_mesh(cube_soup):
    return mesh_io.index_mesh(cube_soup, 1e-6)


@pytest.fixture(scope="session")
def cube_domain():
    return mesh_io.Aabb((-0.3, -0.3, -0.3), (1.3, 1.3, 1.3))


@pytest.fixture(scope="session")
def icosphere_soup():
    return fixtures.icosphere(subdivisions=2, radius=0.8, center=(0.5, 0.5, 0.5))


def select_face(mesh, point):
    """Face id whose centroid is nearest to the probe point."""
    fids = sorted(mesh.faces)
    cent = np.stack([mesh.face_corners(f).mean(axis=0) for f in fids])
    d = np.linalg.norm(cent - np.asarray(point, dtype=float)[None, :], axis=1)
    return fids[int(np.argmin(d))]
