import numpy as np
import pytest

from qrecur.records import Dataset, SubjectRecord
from qrecur.sim import DGPSpec, generate_dataset


@pytest.fixture
def two_subjects():
    """Hand-checkable pair: all baseline quantities work out exactly."""
    records = (
        SubjectRecord("a", 1.0, event_times=(0.5, 0.8), covariates=(0.2,)),
        SubjectRecord("b", 0.6, event_times=(0.2,), covariates=(0.7,)),
    )
    return Dataset(records, covariate_names=("x1",), nu_star=1.0)


@pytest.fixture(scope="session")
def small_sim():
    """150 subjects from the homogeneous-normal generator, fixed seed."""
    spec = DGPSpec(n=150, seed=42)
    return generate_dataset(spec)


@pytest.fixture
def rng():
    return np.random.default_rng(2024)
