import numpy as np
import pytest

from endonav.anatomy import mesh_from_arrays
from endonav.phantom import BranchPhantom, box_mesh, tube_mesh
from endonav.statics import ToolSpec

L = 1.25e-3


@pytest.fixture(scope="session")
def cube():
    v, t = box_mesh((-0.5, -0.5, -0.5), (0.5, 0.5, 0.5), 1)
    return mesh_from_arrays(v, t)


@pytest.fixture(scope="session")
def tube():
    # radius 10 mm, axis z, from 20 mm below the origin to 80 mm above
    v, t = tube_mesh(10.0, -20.0, 80.0, sides=64, rings=80)
    return mesh_from_arrays(v * 1e-3, t)


@pytest.fixture(scope="session")
def phantom():
    return BranchPhantom(lcca_length=18.0)


@pytest.fixture(scope="session")
def phantom_mesh(phantom):
    return phantom.mesh()


def guidewire(max_segments=90, prebend_deg=70.0, prebend_segments=24):
    pre = np.tile([np.deg2rad(prebend_deg) / prebend_segments, 0.0, 0.0], (prebend_segments, 1))
    return ToolSpec("guidewire", 0.889e-3, 70e9, 0.33, 0.0, L, max_segments, pre)


def catheter(max_segments=10):
    return ToolSpec("catheter", 1.7e-3, 0.0, 0.33, 0.0, L, max_segments)
