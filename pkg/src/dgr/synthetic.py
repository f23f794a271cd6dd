"""Seeded synthetic implicit-feedback data at MovieLens-100k scale.

Users and items get latent taste vectors drawn around a handful of shared
genres; items also get a heavy-tailed popularity bias and users a
heavy-tailed activity level. Each user picks ``n_u`` distinct items with
probability proportional to ``exp(beta * taste + popularity)`` using the
Gumbel top-k trick.
"""

from __future__ import annotations

import numpy as np

from .graph import InteractionGraph


def make_interactions(num_users: int = 943, num_items: int = 1682, target_edges: int = 100_000,
                      dim: int = 16, n_genres: int = 12, beta: float = 2.5,
                      popularity_sigma: float = 1.0, activity_sigma: float = 0.7,
                      min_degree: int = 20, seed: int = 0) -> InteractionGraph:
    rng = np.random.default_rng(seed)
    genres = rng.normal(size=(n_genres, dim))
    genres /= np.linalg.norm(genres, axis=1, keepdims=True)

    def taste(n, spread):
        k = rng.integers(0, n_genres, size=(n, 2))
        mix = rng.dirichlet([1.0, 1.0], size=n)
        z = mix[:, :1] * genres[k[:, 0]] + mix[:, 1:] * genres[k[:, 1]]
        z += spread * rng.normal(size=(n, dim)) / np.sqrt(dim)
        return z / np.linalg.norm(z, axis=1, keepdims=True)

    zu, zi = taste(num_users, 0.6), taste(num_items, 0.6)
    pop = rng.normal(0.0, popularity_sigma, size=num_items)
    act = rng.lognormal(0.0, activity_sigma, size=num_users)
    extra = max(target_edges - min_degree * num_users, 0)
    deg = min_degree + np.floor(extra * act / act.sum()).astype(np.int64)
    deg = np.minimum(deg, num_items - 1)
    users, items = [], []
    for u in range(num_users):
        logits = beta * (zi @ zu[u]) + pop
        keys = logits + rng.gumbel(size=num_items)
        chosen = np.argpartition(-keys, deg[u])[:deg[u]]
        users.append(np.full(deg[u], u))
        items.append(np.sort(chosen))
    return InteractionGraph.from_pairs(np.concatenate(users), np.concatenate(items),
                                       num_users, num_items)
