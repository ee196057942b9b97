import numpy as np
import pytest

from hypokin.collision import CollisionModel
from hypokin.geometry import DomainSpec, build_normalized_mesh
from hypokin.transport import KineticSystem
from hypokin.velocity import gauss_hermite_grid


@pytest.fixture(scope="session")
def grid8():
    return gauss_hermite_grid(8)


@pytest.fixture(scope="session")
def square_mesh():
    return build_normalized_mesh(DomainSpec("unit-square"), 0.2)


@pytest.fixture(scope="session")
def disk_mesh():
    return build_normalized_mesh(DomainSpec("disk"), 0.25)


@pytest.fixture(scope="session")
def square_system(square_mesh, grid8):
    return KineticSystem(square_mesh, grid8, CollisionModel("bgk"))


@pytest.fixture(scope="session")
def specular_disk_system(disk_mesh, grid8):
    return KineticSystem(disk_mesh.with_alpha(0.0), grid8, CollisionModel("bgk"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
