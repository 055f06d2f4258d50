"""Seeded generators for test fixtures and desk-scale runs."""

from __future__ import annotations

import numpy as np

from .data import CatalogEntry, Interaction, InteractionDataset, make_dataset


def make_planted_interactions(n_users=600, n_items=240, n_categories=6, brands_per_category=3,
                              min_len=12, max_len=36, stay=0.8, step_std=2.0,
                              horizon=1_000_000, seed=0) -> InteractionDataset:
    """Interaction log with a planted sequential preference structure.

    Items of one category sit on a ring; a user keeps browsing its current
    category with probability ``stay`` and then moves to a ring neighbour of
    the previous item, otherwise it jumps to one of its two favourite
    categories and picks an item by (Zipf) popularity. Brands are contiguous
    arcs of the ring, so brand follows category and locality. Timestamps are
    uniform over ``[0, horizon)`` per user.
    """
    rng = np.random.default_rng(seed)
    per_cat = n_items // n_categories
    n_items = per_cat * n_categories
    item_cat = np.repeat(np.arange(n_categories), per_cat)
    item_pos = np.tile(np.arange(per_cat), n_categories)
    item_brand = item_pos * brands_per_category // per_cat

    popularity = 1.0 / np.arange(1, per_cat + 1) ** 0.8
    popularity = rng.permuted(np.tile(popularity, (n_categories, 1)), axis=1)
    popularity /= popularity.sum(axis=1, keepdims=True)

    catalog = {}
    for j in range(n_items):
        iid = f"i{j:05d}"
        catalog[iid] = CatalogEntry(iid, f"item {j}", f"b{item_cat[j]}_{item_brand[j]}", f"c{item_cat[j]}")

    events = []
    for u in range(n_users):
        favs = rng.choice(n_categories, size=2, replace=False)
        pref = np.full(n_categories, 0.1 / n_categories)
        pref[favs[0]] += 0.6
        pref[favs[1]] += 0.3
        length = int(rng.integers(min_len, max_len + 1))
        times = np.sort(rng.choice(horizon, size=length, replace=False))
        cat = int(rng.choice(n_categories, p=pref))
        pos = int(rng.choice(per_cat, p=popularity[cat]))
        for step in range(length):
            if step > 0:
                if rng.random() < stay:
                    delta = int(np.rint(rng.normal(0.0, step_std))) or int(rng.choice([-1, 1]))
                    pos = (pos + delta) % per_cat
                else:
                    cat = int(rng.choice(n_categories, p=pref))
                    pos = int(rng.choice(per_cat, p=popularity[cat]))
            j = cat * per_cat + pos
            events.append(Interaction(f"u{u:05d}", f"i{j:05d}", int(times[step])))
    return make_dataset(events, catalog)


def make_low_rank_embeddings(n=2048, D=64, rank=8, noise=0.0, seed=0) -> np.ndarray:
    """Rows ``A @ B`` with ``A ~ N(0, I)`` and orthonormal ``B``; unit per-coordinate scale."""
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((n, rank))
    B, _ = np.linalg.qr(rng.standard_normal((D, rank)))
    X = A @ B.T * np.sqrt(D / rank)
    if noise:
        X += noise * rng.standard_normal(X.shape)
    return X
