import numpy as np
import pytest

from dotrecon.mesh import Mesh, generate_disk_mesh
from dotrecon.phantom import ParameterField, pinned_mask


@pytest.fixture(scope="session")
def small_mesh():
    """54-triangle-target disk (under the 60-triangle limit of the Jacobian checks)."""
    m = generate_disk_mesh(25.0, 54, seed=1)
    assert m.n_triangles <= 60
    return m


@pytest.fixture(scope="session")
def coarse_mesh():
    return generate_disk_mesh(25.0, 541, seed=0)


@pytest.fixture(scope="session")
def fine_mesh():
    return generate_disk_mesh(25.0, 2097, seed=1)


@pytest.fixture
def two_triangles():
    """Unit square split along the diagonal (0,0)-(1,1)."""
    nodes = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    return Mesh(nodes, np.array([[0, 1, 2], [0, 2, 3]]))


def random_field(mesh, rng, spread=0.3, pin=True):
    from dotrecon.phantom import D_BACKGROUND, MU_BACKGROUND

    T = mesh.n_triangles
    return ParameterField(mesh, D_BACKGROUND * (1 + spread * rng.random(T)),
                          MU_BACKGROUND * (1 + spread * rng.random(T)),
                          pinned=pinned_mask(mesh) if pin else None)
