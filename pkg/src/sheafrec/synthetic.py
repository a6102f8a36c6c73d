"""Deterministic block-structured synthetic datasets for desk-scale runs."""

from __future__ import annotations

import numpy as np

from .data import InteractionSet, write_tsv

IN_BLOCK_PROB = 0.8


class SyntheticConfigError(ValueError):
    pass


def generate_synthetic(
    n_users: int,
    m_items: int,
    clusters: int,
    noise: float,
    seed: int,
    path=None,
) -> InteractionSet:
    """Users and items fall into matched blocks; each user picks every
    in-block item with probability 0.8 and every out-of-block item with
    probability ``noise``.  In-block interactions carry rating 5.0, noise
    interactions 1.0.  Written as tsv when ``path`` is given.
    """
    if clusters < 1 or n_users % clusters or m_items % clusters:
        raise SyntheticConfigError(
            f"clusters={clusters} must evenly divide users={n_users} and items={m_items}"
        )
    if not 0.0 <= noise < 1.0:
        raise SyntheticConfigError(f"noise must lie in [0, 1), got {noise}")
    rng = np.random.default_rng(seed)
    users_per = n_users // clusters
    items_per = m_items // clusters
    user_block = np.arange(n_users) // users_per
    item_block = np.arange(m_items) // items_per
    users, items, ratings = [], [], []
    for u in range(n_users):
        in_block = item_block == user_block[u]
        prob = np.where(in_block, IN_BLOCK_PROB, noise)
        hit = rng.random(m_items) < prob
        chosen = np.nonzero(hit)[0]
        users.extend([u] * len(chosen))
        items.extend(chosen.tolist())
        ratings.extend(np.where(in_block[chosen], 5.0, 1.0).tolist())
    out = InteractionSet(
        n_users=n_users,
        n_items=m_items,
        users=np.asarray(users, dtype=np.int64),
        items=np.asarray(items, dtype=np.int64),
        ratings=np.asarray(ratings, dtype=float),
    )
    if path is not None:
        write_tsv(out, path)
    return out
