import os

# Pin BLAS threading before numpy loads anywhere; single-threaded execution
# is the canonical mode that the bitwise-reproducibility tests rely on.
for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")

import numpy as np
import pytest

from fedlos.cohort import CohortSpec, generate_cohort


@pytest.fixture(scope="session")
def small_cohort():
    """8 clients, 1200 stays: big enough to train on, cheap enough to share."""
    return generate_cohort(CohortSpec(n_clients=8, total_stays=1200), seed=42)


@pytest.fixture(scope="session")
def tiny_cohort():
    """3 clients, 240 stays, mild skew: for orchestration-level tests."""
    spec = CohortSpec(n_clients=3, total_stays=240, size_dispersion=0.3)
    return generate_cohort(spec, seed=7)


@pytest.fixture()
def rng():
    return np.random.default_rng(20260810)
