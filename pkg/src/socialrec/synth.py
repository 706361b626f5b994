"""Synthetic datasets for demos, sanity checks, and scaling measurements."""

from __future__ import annotations

import numpy as np

from .graphs import InteractionRecord
from .numerics import STREAM_SYNTH, rng_for
from .training import RecDataset

DAY = 86_400


def planted_dataset(user_count: int = 20, item_count: int = 30,
                    type_count: int = 2, seed: int = 7, own_items: int = 10,
                    cross_items: int = 0,
                    use_category_graph: bool = False) -> RecDataset:
    """Two user communities preferring two item categories.

    Users in community c draw their interactions from category c (plus
    `cross_items` of noise if requested); social ties stay within
    communities.  The item graph defaults to co-interaction: a full
    category clique would make same-category items indistinguishable after
    normalized propagation (the clique operator averages its members),
    which no amount of training can break.  A capable model should overfit
    this data easily.
    """
    rng = rng_for(seed, STREAM_SYNTH)
    half_users = user_count // 2
    half_items = item_count // 2
    records = []
    for u in range(user_count):
        community = 0 if u < half_users else 1
        own_pool = np.arange(0, half_items) if community == 0 else \
            np.arange(half_items, item_count)
        other_pool = np.arange(half_items, item_count) if community == 0 else \
            np.arange(0, half_items)
        n_own = min(own_items, own_pool.size)
        chosen = list(rng.choice(own_pool, size=n_own, replace=False))
        chosen += list(rng.choice(other_pool, size=min(cross_items, other_pool.size),
                                  replace=False))
        times = np.sort(rng.integers(0, 120 * DAY, size=len(chosen)))
        for item, ts in zip(chosen, times):
            type_id = int(rng.random() < 0.4) % type_count
            records.append(InteractionRecord(u, int(item), type_id, int(ts)))

    social_edges = []
    for c in range(2):
        lo = 0 if c == 0 else half_users
        hi = half_users if c == 0 else user_count
        members = list(range(lo, hi))
        for i, a in enumerate(members):  # ring keeps each community connected
            social_edges.append((a, members[(i + 1) % len(members)]))
        for a in members:
            for b in members:
                if a < b and rng.random() < 0.2:
                    social_edges.append((a, b))

    categories = None
    if use_category_graph:
        categories = {j: ["catA" if j < half_items else "catB"]
                      for j in range(item_count)}
    return RecDataset(
        user_count=user_count,
        item_count=item_count,
        type_count=type_count,
        records=records,
        social_edges=social_edges,
        item_categories=categories,
    )


def random_dataset(user_count: int = 600, item_count: int = 200,
                   interactions_per_user: int = 5, type_count: int = 2,
                   seed: int = 11) -> RecDataset:
    """Structure-free uniform interactions; a null model for baselines."""
    rng = rng_for(seed, STREAM_SYNTH)
    records = []
    for u in range(user_count):
        items = rng.choice(item_count, size=interactions_per_user, replace=False)
        times = np.sort(rng.integers(0, 120 * DAY, size=items.size))
        for item, ts in zip(items, times):
            records.append(InteractionRecord(u, int(item),
                                             int(rng.integers(0, type_count)), int(ts)))
    social_edges = [(int(a), int(b))
                    for a, b in rng.integers(0, user_count, size=(user_count, 2))
                    if a != b]
    categories = {j: [f"cat{int(rng.integers(0, 12))}"] for j in range(item_count)}
    return RecDataset(
        user_count=user_count,
        item_count=item_count,
        type_count=type_count,
        records=records,
        social_edges=social_edges,
        item_categories=categories,
    )


def random_interactions(user_count: int, item_count: int, type_count: int,
                        edge_count: int, seed: int = 0) -> list:
    """Exactly `edge_count` distinct (user, item, type) interactions."""
    space = user_count * item_count * type_count
    if edge_count > space:
        raise ValueError(f"cannot place {edge_count} distinct edges in {space} slots")
    rng = rng_for(seed, STREAM_SYNTH)
    flat = rng.choice(space, size=edge_count, replace=False)
    times = rng.integers(0, 365 * DAY, size=edge_count)
    records = []
    for code, ts in zip(flat, times):
        k = int(code % type_count)
        j = int((code // type_count) % item_count)
        u = int(code // (type_count * item_count))
        records.append(InteractionRecord(u, j, k, int(ts)))
    return records
