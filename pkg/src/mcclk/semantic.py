"""Item-item semantic kNN graph built from relation-aware KG propagation."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch
from .graph import SparseAdjacency, build_csr, scatter_rows, sym_degree_normalize
from .ingest import KnowledgeGraph

log = logging.getLogger(__name__)

__all__ = [
    "SemanticGraph",
    "kg_edges",
    "relation_aware_propagate",
    "cosine_sim",
    "cosine_matrix_rows",
    "knn_sparsify",
    "build_semantic_graph",
]


@dataclass(frozen=True)
class SemanticGraph:
    adjacency: SparseAdjacency
    k: int
    built_from_epoch: int = 0


def kg_edges(kg: KnowledgeGraph):
    """Directed message edges ``(dst, relation, src)``, one per triple direction."""
    t = kg.triples
    dst = np.concatenate([t[:, 0], t[:, 2]])
    rel = np.concatenate([t[:, 1], t[:, 1]])
    src = np.concatenate([t[:, 2], t[:, 0]])
    return dst.astype(np.int64), rel.astype(np.int64), src.astype(np.int64)


def _check_dims(*tables):
    dims = {t.shape[1] for t in tables if t.ndim == 2 and t.shape[0]}
    if len(dims) > 1:
        raise DimensionMismatch(f"embedding widths differ: {sorted(dims)}")


def relation_aware_propagate(kg, item_emb, entity_emb, relation_emb, depth: int) -> np.ndarray:
    """Item representations after ``depth`` rounds of relational mean aggregation.

    Every node takes the mean of ``e_r * e_v`` over its KG neighbors, with KG
    edges read in both directions.  A node without neighbors keeps its
    previous representation.
    """
    if depth < 0:
        raise ValueError("depth must be >= 0")
    item_emb = np.asarray(item_emb, float)
    entity_emb = np.asarray(entity_emb, float).reshape(-1, item_emb.shape[1])
    relation_emb = np.asarray(relation_emb, float)
    _check_dims(item_emb, entity_emb, relation_emb)
    n_items = len(item_emb)
    x = np.vstack([item_emb, entity_emb])
    if len(x) < kg.n_entities:
        raise DimensionMismatch(f"{len(x)} node embeddings for {kg.n_entities} KG entities")
    dst, rel, src = kg_edges(kg)
    count = np.bincount(dst, minlength=len(x)).astype(float)
    has = count > 0
    chunk = 1 << 17
    for _ in range(depth):
        agg = np.zeros_like(x)
        for lo in range(0, len(dst), chunk):
            c = slice(lo, lo + chunk)
            agg += scatter_rows(dst[c], relation_emb[rel[c]] * x[src[c]], len(x))
        x = np.where(has[:, None], agg / np.maximum(count, 1.0)[:, None], x)
    return x[:n_items]


def cosine_sim(a, b) -> float:
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        if na == 0.0 and nb == 0.0:
            log.debug("cosine of two zero vectors taken as 0")
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def _unit_rows(x):
    norm = np.linalg.norm(x, axis=1, keepdims=True)
    return np.divide(x, norm, out=np.zeros_like(x), where=norm > 0)


def cosine_matrix_rows(x: np.ndarray, rows: slice) -> np.ndarray:
    u = _unit_rows(x)
    return np.clip(u[rows] @ u.T, -1.0, 1.0)


def _topk_mask(block: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of the ``k`` largest entries per row; ties go to lower columns."""
    n = block.shape[1]
    if k >= n:
        return np.isfinite(block)
    kth = -np.partition(-block, k - 1, axis=1)[:, k - 1 : k]
    gt = block > kth
    eq = block == kth
    room = k - gt.sum(axis=1, keepdims=True)
    return gt | (eq & (np.cumsum(eq, axis=1) <= room))


def knn_sparsify(sim: np.ndarray, k: int, row_offset: int = 0) -> SparseAdjacency:
    """Keep the ``k`` largest off-diagonal similarities of each row (directed).

    ``row_offset`` gives the global index of the first row when ``sim`` is a
    block of rows, so that the diagonal is located correctly.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    sim = np.array(sim, dtype=float)
    n_rows, n_cols = sim.shape
    r = np.arange(n_rows)
    diag = r + row_offset
    ok = diag < n_cols
    sim[r[ok], diag[ok]] = -np.inf
    kk = min(k, n_cols - 1)
    mask = _topk_mask(sim, kk) if kk > 0 else np.zeros(sim.shape, bool)
    mask[r[ok], diag[ok]] = False
    rows, cols = np.nonzero(mask)
    return build_csr(np.column_stack([rows, cols, sim[rows, cols]]), n_rows, n_cols)


def build_semantic_graph(
    kg: KnowledgeGraph, item_emb, entity_emb, relation_emb, k: int, depth: int,
    block_size: int = 1024, epoch: int = 0,
) -> SemanticGraph:
    """Relational propagation, cosine similarity, top-k and symmetric normalization.

    Similarities at or below zero are dropped after top-k selection so the
    degree normalization sees nonnegative weights only.
    """
    reps = relation_aware_propagate(kg, item_emb, entity_emb, relation_emb, depth)
    n = len(reps)
    unit = _unit_rows(reps)
    rows, cols, vals = [], [], []
    for lo in range(0, n, block_size):
        hi = min(lo + block_size, n)
        block = np.clip(unit[lo:hi] @ unit.T, -1.0, 1.0)
        part = knn_sparsify(block, k, row_offset=lo)
        rr = part.row_ids() + lo
        keep = part.values > 0
        rows.append(rr[keep])
        cols.append(part.col_indices[keep])
        vals.append(part.values[keep])
    edges = np.column_stack([np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)]) \
        if rows else np.zeros((0, 3))
    adj = sym_degree_normalize(build_csr(edges, n, n))
    return SemanticGraph(adj, int(k), int(epoch))


def export_semantic_graph(graph: SemanticGraph, path) -> None:
    with open(path, "w") as fh:
        for i, j, w in graph.adjacency.edges():
            fh.write(f"{i} {j} {w!r}\n")
