import numpy as np
import pytest

from rvm.characteristics import ConstantField, ZeroField, push_states
from rvm.core import make_empty_scenario, make_gaussian_scenario
from rvm.density import PushedEnsemble, decompose, sample_particles


@pytest.fixture(scope="session")
def gauss_data():
    return make_gaussian_scenario(1.0, 2.0, 11.0, seed=1)


@pytest.fixture(scope="session")
def empty_data():
    return make_empty_scenario(2.0, 11.0, seed=1)


@pytest.fixture(scope="session")
def gauss_components(gauss_data):
    comps, _ = decompose(gauss_data, 4)
    return comps


@pytest.fixture(scope="session")
def small_pushed(gauss_components):
    """Shells 1-3 sampled at 4096 points each, pushed through a fixed
    constant field to t = 3 (so the source terms are exercised)."""
    field = ConstantField([0.08, 0.0, 0.03], [0.0, 0.05, 0.1])
    out = []
    for comp in gauss_components:
        if comp.measured_sup <= 0:
            continue
        ens = sample_particles(comp, 4096, seed=100 + comp.k)
        knots = push_states(field, ens.x0, ens.v0, 3.0, 0.02, 0.25)
        out.append(PushedEnsemble(ensemble=ens, knots=knots))
    return out


@pytest.fixture(scope="session")
def free_pushed(gauss_components):
    """Same ensembles free-streamed (zero field) to t = 3."""
    out = []
    for comp in gauss_components:
        if comp.measured_sup <= 0:
            continue
        ens = sample_particles(comp, 4096, seed=100 + comp.k)
        knots = push_states(ZeroField(), ens.x0, ens.v0, 3.0, 0.05, 0.25)
        out.append(PushedEnsemble(ensemble=ens, knots=knots))
    return out


def rng(seed=0):
    return np.random.default_rng(seed)
