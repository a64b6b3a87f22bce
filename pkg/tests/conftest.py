"""Shared fixtures: small meshes and one solved reference case."""

import numpy as np
import pytest

from mhdfem.mesh import Mesh, build_topology, unit_cube_mesh


@pytest.fixture(scope="session")
def mesh1():
    return unit_cube_mesh(1)


@pytest.fixture(scope="session")
def mesh2():
    return unit_cube_mesh(2)


@pytest.fixture(scope="session")
def topo1(mesh1):
    return build_topology(mesh1)


@pytest.fixture(scope="session")
def topo2(mesh2):
    return build_topology(mesh2)


@pytest.fixture(scope="session")
def single_tet():
    vertices = np.array(
        [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
    )
    cells = np.array([[0, 1, 2, 3]])
    return Mesh(vertices, cells)


@pytest.fixture(scope="session")
def solved_case_n4():
    """Converged builtin normal_B multiplier solve on n = 4, shared by the
    diagnostics, reduced-form and measuring-stick tests."""
    from mhdfem.mhd import MhdDriver
    from mhdfem.verify import builtin_case

    case = builtin_case("normal_B")
    driver = MhdDriver(unit_cube_mesh(4), case.params("multiplier"), sources=case.sources())
    state, report = driver.picard_solve(tol=1e-11, maxit=50)
    assert report.converged
    return case, driver, state, report
