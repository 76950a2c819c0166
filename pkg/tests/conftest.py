import numpy as np
import pytest

from mfteams import EnvironmentModel
from mfteams.models import load_bundled


@pytest.fixture(scope="session")
def counterexample():
    return load_bundled("counterexample")


@pytest.fixture(scope="session")
def decoupled():
    return load_bundled("decoupled")


@pytest.fixture(scope="session")
def weakly_coupled():
    return load_bundled("weakly_coupled")


def make_random_model(rng, num_states=2, num_actions=2, coupled=False, discount=0.9):
    """A random valid model.  Coupled kernels are built from per-vertex
    stochastic rows, which keeps them valid on the whole simplex."""
    X, U = num_states, num_actions
    if coupled:
        rows = rng.dirichlet(np.ones(X), size=(X, U, X))  # [x, u, z, x']
        base = np.zeros((X, U, X))
        coupling = np.swapaxes(rows, 2, 3)
    else:
        base = rng.dirichlet(np.ones(X), size=(X, U))
        coupling = np.zeros((X, U, X, X))
    return EnvironmentModel(
        num_states=X,
        num_actions=U,
        kernel_base=base,
        kernel_coupling=coupling,
        cost_const=rng.uniform(0.5, 2.0, (X, U)),
        cost_linear=rng.uniform(-0.3, 0.3, (X, U, X)),
        cost_quad=rng.uniform(-0.1, 0.1, (X, U, X, X)),
        discount=discount,
        initial_dist=rng.dirichlet(np.ones(X)),
    )
