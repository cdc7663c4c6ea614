import json
from pathlib import Path

import numpy as np
import pytest

from negctrl.data import CategoricalCoding, Dataset, ModelSpec
from negctrl.identify import DiscreteLaw
from negctrl.simulate import DgpSpec, generate_dataset, scenario_model_specs

ORACLES = Path(__file__).parent / "oracles"


@pytest.fixture(scope="session")
def oracle_laws():
    cases = json.loads((ORACLES / "laws.json").read_text())
    return [(DiscreteLaw.from_dict(c["law"]), c) for c in cases]


@pytest.fixture(scope="session")
def sim_data():
    """One draw from the binary-confounder design at n=2000."""
    return generate_dataset(DgpSpec(n=2000, seed=3)).data


@pytest.fixture(scope="session")
def correct_spec():
    return scenario_model_specs("all_correct")


def binary_covariate_data(n=3000, seed=11, n_levels=2):
    """Small data set with two binary covariates and |Z| = |W| = n_levels."""
    rng = np.random.default_rng(seed)
    x = (rng.random((n, 2)) < [0.4, 0.5]).astype(float)
    u = rng.integers(0, n_levels, n)
    a = (rng.random(n) < 0.3 + 0.2 * x[:, 0] + 0.3 * (u > 0)).astype(int)
    shift_z = (u + rng.integers(0, 2, n) * (rng.random(n) < 0.3)) % n_levels
    z = np.where(rng.random(n) < 0.6, u, shift_z)
    w = np.where(rng.random(n) < 0.55, u, rng.integers(0, n_levels, n))
    y = (rng.random(n) < 0.15 + 0.1 * x[:, 1] + 0.15 * u / max(n_levels - 1, 1) + 0.1 * a).astype(float)
    cz = CategoricalCoding(tuple(f"z{i}" for i in range(n_levels)))
    cw = CategoricalCoding(tuple(f"w{i}" for i in range(n_levels)))
    return Dataset(y, a, z, w, x, cz, cw, ("X1", "X2"))


@pytest.fixture(scope="session")
def saturated_data():
    return binary_covariate_data()


@pytest.fixture(scope="session")
def saturated_spec():
    return ModelSpec.saturated(("X1", "X2"))
