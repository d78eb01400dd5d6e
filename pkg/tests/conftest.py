import numpy as np
import pytest

from adrec.data import ingest, k_core_filter, split_users
from adrec.demo import generate_demo_logs
from adrec.tensor import set_debug_checks

# Finite-value guards on every op for the whole suite; heavy integration
# tests switch them off locally where throughput matters.
set_debug_checks(True)


@pytest.fixture
def rng():
    return np.random.default_rng(20240809)


@pytest.fixture(scope="session")
def toy_dataset(tmp_path_factory):
    """Small genre-ring world: 60 users, 24 items, sequences capped at 8."""
    out = tmp_path_factory.mktemp("demo")
    log_path, _ = generate_demo_logs(out, n_users=60, n_items=24, n_genres=4,
                                     min_len=8, max_len_seq=20, seed=3)
    ds = k_core_filter(ingest(log_path), k=5, max_len=8)
    return split_users(ds, seed=1)
