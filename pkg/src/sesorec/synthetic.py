"""Synthetic rating + social data with community structure.

Users belong to clusters; each cluster has a centre in latent space and
friendships are drawn mostly within a cluster, so the social graph carries
real signal about preferences.
"""
from __future__ import annotations

import numpy as np

from .data import RatingDataset, SocialGraph

__all__ = ["make_social_ratings"]


def make_social_ratings(n_users: int = 200, n_items: int = 150, n_ratings: int = 3000,
                        n_edges: int = 600, k: int = 5, n_clusters: int = 5,
                        spread: float = 0.3, noise: float = 0.3, homophily: float = 0.9,
                        scale=(1.0, 5.0), seed=None):
    """Sample a rating dataset and a matching symmetric social graph.

    Parameters
    ----------
    n_ratings : int
        Distinct (user, item) pairs to rate; at most ``n_users * n_items``.
    n_edges : int
        Undirected friendships (no self-loops, no repeats).
    homophily : float
        Probability that a friendship stays inside a cluster.
    spread : float
        Std of users around their cluster centre.

    Returns
    -------
    ratings : RatingDataset
    graph : SocialGraph
    truth : dict
        ``U``, ``V`` and ``cluster`` used to generate the data.
    """
    if n_ratings > n_users * n_items:
        raise ValueError("more ratings than user-item pairs")
    if n_edges > n_users * (n_users - 1) // 2:
        raise ValueError("more edges than user pairs")
    rng = np.random.default_rng(seed)
    cluster = rng.integers(0, n_clusters, n_users)
    centres = rng.normal(0, 1, (n_clusters, k))
    U = (centres[cluster] + spread * rng.normal(size=(n_users, k))).T
    V = rng.normal(0, 1, (k, n_items)) / np.sqrt(k)

    # every user and item gets at least one rating where possible
    pairs = set()
    base = min(n_ratings, max(n_users, n_items))
    for t in range(base):
        pairs.add((t % n_users, int(rng.integers(n_items)) if t >= n_items else t % n_items))
    while len(pairs) < n_ratings:
        pairs.add((int(rng.integers(n_users)), int(rng.integers(n_items))))
    pairs = np.array(sorted(pairs))
    rng.shuffle(pairs)
    users, items = pairs[:, 0], pairs[:, 1]
    mid = 0.5 * (scale[0] + scale[1])
    raw = mid + np.einsum("ki,ki->i", U[:, users], V[:, items]) + noise * rng.normal(size=len(users))
    ratings = np.clip(np.round(raw), *scale)

    members = [np.flatnonzero(cluster == c) for c in range(n_clusters)]
    edges = set()
    while len(edges) < n_edges:
        a = int(rng.integers(n_users))
        pool = members[cluster[a]] if rng.random() < homophily and len(members[cluster[a]]) > 1 else None
        b = int(rng.choice(pool)) if pool is not None else int(rng.integers(n_users))
        if a != b:
            edges.add((min(a, b), max(a, b)))
    graph = SocialGraph.from_edges(n_users, sorted(edges))

    ds = RatingDataset(
        users=users.astype(np.int64),
        items=items.astype(np.int64),
        ratings=ratings,
        user_ids=[f"u{j}" for j in range(n_users)],
        item_ids=[f"i{j}" for j in range(n_items)],
    )
    return ds, graph, {"U": U, "V": V, "cluster": cluster}
