"""Projection heads and cross-view InfoNCE losses (local and global level)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import BatchTooSmall, DimensionMismatch

__all__ = [
    "ProjectionHead",
    "project",
    "cross_view_nce",
    "local_contrastive_loss",
    "global_contrastive_loss",
]


@dataclass
class ProjectionHead:
    """One-hidden-layer MLP ``W2 elu(W1 z + b1) + b2`` (weights act on columns)."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @classmethod
    def identity(cls, d: int) -> "ProjectionHead":
        return cls(np.eye(d), np.zeros(d), np.eye(d), np.zeros(d))

    @classmethod
    def zeros(cls, d: int) -> "ProjectionHead":
        return cls(np.zeros((d, d)), np.zeros(d), np.zeros((d, d)), np.zeros(d))


def project(z, w1, b1, w2, b2) -> ad.Var:
    """Apply the projection head to every row of ``z``."""
    z = ad.as_var(z)
    w1, b1, w2, b2 = (ad.as_var(p) for p in (w1, b1, w2, b2))
    if z.value.ndim == 1:
        return ad.reshape(project(ad.reshape(z, (1, -1)), w1, b1, w2, b2), (-1,))
    if z.shape[-1] != w1.shape[1] or w2.shape[1] != w1.shape[0]:
        raise DimensionMismatch(f"input width {z.shape[-1]} vs head {w1.shape}/{w2.shape}")
    hidden = ad.elu(ad.add(ad.matmul(z, ad.transpose(w1)), b1))
    return ad.add(ad.matmul(hidden, ad.transpose(w2)), b2)


def project_head(z, head: ProjectionHead) -> ad.Var:
    return project(z, head.w1, head.b1, head.w2, head.b2)


def cross_view_nce(anchor, other, tau: float) -> ad.Var:
    """Per-anchor InfoNCE loss between two aligned views.

    Row ``i`` of ``anchor`` is pulled toward row ``i`` of ``other`` and pushed
    from every other row of both ``anchor`` (intra-view) and ``other``
    (inter-view).  Similarity is cosine; the sum is taken in log-sum-exp form.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    a = ad.normalize_rows(anchor)
    c = ad.normalize_rows(other)
    if a.shape != c.shape:
        raise DimensionMismatch(f"view shapes differ: {a.shape} vs {c.shape}")
    n = a.shape[0]
    if n < 2:
        raise BatchTooSmall(f"contrastive batch needs at least 2 rows, got {n}")
    av, cv = a.value, c.value
    inter = av @ cv.T / tau
    intra = av @ av.T / tau
    np.fill_diagonal(intra, -np.inf)
    mx = np.maximum(inter.max(axis=1), intra.max(axis=1))
    e_inter = np.exp(inter - mx[:, None])
    e_intra = np.exp(intra - mx[:, None])
    denom = e_inter.sum(axis=1) + e_intra.sum(axis=1)
    lse = mx + np.log(denom)
    loss = lse - np.diag(inter)
    p_inter = e_inter / denom[:, None]
    p_intra = e_intra / denom[:, None]

    def bwd(g):
        d_inter = g[:, None] * p_inter
        d_inter[np.diag_indices(n)] -= g
        d_intra = g[:, None] * p_intra
        ga = (d_inter @ cv + d_intra @ av + d_intra.T @ av) / tau
        gc = (d_inter.T @ av) / tau
        return ga, gc

    return ad._op(loss, (a, c), bwd)


def _check_batch(idx):
    idx = np.asarray(idx, dtype=np.int64)
    if len(idx) < 2:
        raise BatchTooSmall(f"contrastive batch needs at least 2 ids, got {len(idx)}")
    return idx


def local_contrastive_loss(zs_p, zc_p, tau: float, batch) -> ad.Var:
    """Mean semantic-anchored cross-view loss over the batch items."""
    batch = _check_batch(batch)
    return ad.mean(cross_view_nce(ad.take(zs_p, batch), ad.take(zc_p, batch), tau))


def global_contrastive_loss(zg_i, zl_i, zg_u, zl_u, tau: float, items, users) -> ad.Var:
    """Symmetric global/local loss, averaged per node type and summed.

    For each node type both directions (global anchor, local anchor) are
    averaged with weight 1/2, then the item and user halves are added.
    """
    items, users = _check_batch(items), _check_batch(users)
    parts = []
    for g, l, idx in ((zg_i, zl_i, items), (zg_u, zl_u, users)):
        gb, lb = ad.take(g, idx), ad.take(l, idx)
        both = ad.add(cross_view_nce(gb, lb, tau), cross_view_nce(lb, gb, tau))
        parts.append(ad.scale(ad.mean(both), 0.5))
    return ad.add(parts[0], parts[1])
