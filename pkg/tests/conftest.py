import numpy as np
import pytest

from sheafrec.data import InteractionSet, adapt_bipartite, build_bipartite, split_interactions
from sheafrec.synthetic import generate_synthetic


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)


@pytest.fixture(scope="session")
def small_split():
    """2-cluster synthetic dataset, split and graph, shared across tests."""
    interactions = generate_synthetic(40, 40, 2, 0.05, seed=11)
    split = split_interactions(interactions, seed=11)
    graph = adapt_bipartite(build_bipartite(split.train))
    return interactions, split, graph


def toy_interactions(n_users=4, n_items=4, density=0.6, seed=3) -> InteractionSet:
    r = np.random.default_rng(seed)
    records = [(u, i, 1.0) for u in range(n_users) for i in range(n_items) if r.random() < density]
    if not records:
        records = [(0, 0, 1.0)]
    return InteractionSet.from_records(n_users, n_items, records)
