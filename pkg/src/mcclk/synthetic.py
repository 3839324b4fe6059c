"""Small planted-structure datasets for tests, demos and smoke runs."""

from __future__ import annotations

import numpy as np

from .graph import make_rng
from .ingest import Dataset, InteractionGraph, KnowledgeGraph


def planted_dataset(n_users=60, n_items=80, n_clusters=4, n_attr_per_cluster=3,
                    n_noise_entities=10, p_in=0.35, p_out=0.02, seed=0) -> Dataset:
    """Users and items share a latent cluster; the KG reveals item clusters.

    Each user interacts with in-cluster items with probability ``p_in`` and
    others with ``p_out``.  Every item links to one attribute entity of its
    cluster (relation 0) and one random noise entity (relation 1); attributes
    of a cluster link to a cluster hub (relation 2).  Labeled negatives, one per
    positive, come from items the user never touched.
    """
    rng = make_rng(seed)
    uc = rng.integers(0, n_clusters, n_users)
    ic = np.arange(n_items) % n_clusters
    prob = np.where(uc[:, None] == ic[None, :], p_in, p_out)
    hit = rng.random((n_users, n_items)) < prob
    for u in np.flatnonzero(hit.sum(axis=1) == 0):  # every user gets a positive
        hit[u, rng.choice(np.flatnonzero(ic == uc[u]))] = True
    pos = np.argwhere(hit)
    neg = []
    for u in range(n_users):
        free = np.flatnonzero(~hit[u])
        k = min(int(hit[u].sum()), len(free))
        neg.extend((u, j) for j in np.sort(rng.choice(free, size=k, replace=False)))
    graph = InteractionGraph(n_users, n_items, pos.astype(np.int64),
                             np.array(neg, np.int64).reshape(-1, 2))

    attr0 = n_items
    hub0 = attr0 + n_clusters * n_attr_per_cluster
    noise0 = hub0 + n_clusters
    n_entities = noise0 + n_noise_entities
    triples = []
    for i in range(n_items):
        triples.append((i, 0, attr0 + ic[i] * n_attr_per_cluster + rng.integers(n_attr_per_cluster)))
        if n_noise_entities:
            triples.append((i, 1, noise0 + rng.integers(n_noise_entities)))
    for c in range(n_clusters):
        for a in range(n_attr_per_cluster):
            triples.append((attr0 + c * n_attr_per_cluster + a, 2, hub0 + c))
    triples = np.unique(np.array(triples, np.int64), axis=0)
    kg = KnowledgeGraph(n_entities, 3, triples, np.arange(n_items))
    return Dataset(graph, kg, "planted")


def rank_one_table(n=50, d=8, seed=0) -> np.ndarray:
    rng = make_rng(seed)
    return np.outer(rng.standard_normal(n), rng.standard_normal(d))
