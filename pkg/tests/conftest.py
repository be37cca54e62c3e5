import numpy as np
import pytest

import smoothfit as sf
from smoothfit.problems import catalog_entry


@pytest.fixture(scope="session")
def b1_solution():
    e = catalog_entry("b1")
    v, stop, rep = sf.solve_obstacle(e.problem, e.grid, tol=1e-8, max_iter=80)
    return e, v, stop, rep


@pytest.fixture(scope="session")
def b2_solution():
    e = catalog_entry("b2")
    v, stop, rep = sf.solve_obstacle(e.problem, e.grid, tol=1e-8, max_iter=80)
    return e, v, stop, rep


@pytest.fixture(scope="session")
def b3_solution():
    e = catalog_entry("b3")
    v, stop, rep = sf.solve_obstacle(e.problem, e.grid, tol=1e-8, max_iter=80)
    return e, v, stop, rep


@pytest.fixture(scope="session")
def b4_solution():
    e = catalog_entry("b4")
    v, policy, rep = sf.policy_iteration(e.problem, e.grid, tol=1e-8, max_iter=60)
    return e, v, policy, rep


@pytest.fixture(scope="session")
def b4_fine_solution():
    e = catalog_entry("b4")
    grid = sf.build_grid([-2.0], [2.0], [4001])
    v, policy, rep = sf.policy_iteration(e.problem, grid, tol=1e-8, max_iter=60)
    return e, v, policy, rep


@pytest.fixture(scope="session")
def b5_solution():
    e = catalog_entry("b5")
    v, action, rep = sf.solve_impulse_qvi(e.problem, e.grid, tol=1e-8, max_iter=60)
    return e, v, action, rep


@pytest.fixture()
def rng():
    return np.random.default_rng(12345)
