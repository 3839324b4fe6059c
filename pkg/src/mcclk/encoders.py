"""Collaborative, semantic and structural view encoders.

All encoders are written against :mod:`mcclk.autodiff` so that a forward pass
over parameter ``Var`` objects can be differentiated.  Plain numpy arrays are
accepted as well and are treated as constants.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .errors import DimensionMismatch, EmptyNeighborhood
from .ingest import InteractionGraph, KnowledgeGraph
from .semantic import SemanticGraph, kg_edges

__all__ = [
    "EmbeddingState",
    "ViewRepresentations",
    "StructuralGraph",
    "collaborative_adjacency",
    "user_mean_adjacency",
    "collaborative_encode",
    "semantic_encode",
    "relation_attention",
    "structural_attention",
    "structural_encode",
]


@dataclass
class EmbeddingState:
    """Layer-0 embedding tables.

    ``entity`` holds only the entities that are not items; the KG node table is
    ``vstack([item, entity])``.
    """

    user: np.ndarray
    item: np.ndarray
    entity: np.ndarray
    relation: np.ndarray

    @property
    def dim(self) -> int:
        return self.item.shape[1]

    def check(self) -> None:
        dims = {t.shape[1] for t in (self.user, self.item, self.entity, self.relation)}
        if len(dims) != 1:
            raise DimensionMismatch(f"embedding tables disagree on width: {sorted(dims)}")
        for t in (self.user, self.item, self.entity, self.relation):
            if not np.all(np.isfinite(t)):
                raise FloatingPointError("non-finite embedding value")


@dataclass
class ViewRepresentations:
    zu_c: ad.Var
    zi_c: ad.Var
    zi_s: ad.Var
    zu_g: ad.Var
    zi_g: ad.Var


def _positives(graph) -> tuple[np.ndarray, int, int]:
    if isinstance(graph, InteractionGraph):
        return graph.positives, graph.n_users, graph.n_items
    raise TypeError("expected an InteractionGraph")


def collaborative_adjacency(pos: np.ndarray, n_users: int, n_items: int) -> sp.csr_matrix:
    """User x item matrix with weight ``1/sqrt(|N_u| |N_i|)`` per interaction."""
    pos = np.unique(np.asarray(pos, np.int64).reshape(-1, 2), axis=0)
    u, i = pos[:, 0], pos[:, 1]
    du = np.bincount(u, minlength=n_users).astype(float)
    di = np.bincount(i, minlength=n_items).astype(float)
    w = 1.0 / np.sqrt(du[u] * di[i]) if len(u) else np.zeros(0)
    return sp.csr_matrix((w, (u, i)), shape=(n_users, n_items))


def user_mean_adjacency(pos: np.ndarray, n_users: int, n_items: int) -> sp.csr_matrix:
    """User x item matrix with weight ``1/|N_u|``; rows of idle users are empty."""
    pos = np.unique(np.asarray(pos, np.int64).reshape(-1, 2), axis=0)
    u, i = pos[:, 0], pos[:, 1]
    du = np.bincount(u, minlength=n_users).astype(float)
    w = 1.0 / du[u] if len(u) else np.zeros(0)
    return sp.csr_matrix((w, (u, i)), shape=(n_users, n_items))


def _layer_sum(layers):
    out = layers[0]
    for x in layers[1:]:
        out = ad.add(out, x)
    return out


def collaborative_encode(adj, user_emb, item_emb, depth: int):
    """LightGCN propagation on the bipartite graph followed by a layer sum.

    ``adj`` is either an :class:`InteractionGraph` (its positives define the
    graph) or a prebuilt matrix from :func:`collaborative_adjacency`.
    """
    if depth < 0:
        raise ValueError("depth must be >= 0")
    if isinstance(adj, InteractionGraph):
        pos, m, n = _positives(adj)
        adj = collaborative_adjacency(pos, m, n)
    eu, ei = ad.as_var(user_emb), ad.as_var(item_emb)
    if eu.shape[1] != ei.shape[1]:
        raise DimensionMismatch(f"user width {eu.shape[1]} != item width {ei.shape[1]}")
    if adj.shape != (eu.shape[0], ei.shape[0]):
        raise DimensionMismatch(f"adjacency {adj.shape} vs tables {eu.shape[0]}x{ei.shape[0]}")
    adj_t = adj.T.tocsr()
    users, items = [eu], [ei]
    for _ in range(depth):
        eu, ei = ad.spmm(adj, ei), ad.spmm(adj_t, eu)
        users.append(eu)
        items.append(ei)
    return _layer_sum(users), _layer_sum(items)


def semantic_encode(graph, item_emb, depth: int):
    """Weighted propagation over the semantic kNN graph, summed over layers."""
    if depth < 0:
        raise ValueError("depth must be >= 0")
    mat = graph.adjacency.to_scipy() if isinstance(graph, SemanticGraph) else sp.csr_matrix(graph)
    ei = ad.as_var(item_emb)
    if mat.shape != (ei.shape[0], ei.shape[0]):
        raise DimensionMismatch(f"semantic graph {mat.shape} vs {ei.shape[0]} items")
    layers = [ei]
    for _ in range(depth):
        ei = ad.spmm(mat, ei)
        layers.append(ei)
    return _layer_sum(layers)


def relation_attention(x, relations, neighbors) -> np.ndarray:
    """Softmax weights of ``(x || e_r) . (e_v || e_r)`` over one neighborhood.

    ``relations[k]`` and ``neighbors[k]`` describe neighbor ``k``; the caller
    includes the query node itself when it belongs to the neighborhood.
    """
    relations = np.atleast_2d(np.asarray(relations, float))
    neighbors = np.atleast_2d(np.asarray(neighbors, float))
    if neighbors.size == 0:
        raise EmptyNeighborhood("attention over an empty neighborhood")
    x = np.asarray(x, float)
    logits = neighbors @ x + (relations ** 2).sum(axis=1)
    logits -= logits.max()
    w = np.exp(logits)
    return w / w.sum()


@dataclass(frozen=True)
class StructuralGraph:
    """Precomputed index arrays for the user-item-entity view.

    KG edges are stored sorted by ``(rel, dst, src)`` so that the edges of
    relation ``r`` occupy ``rel_ptr[r]:rel_ptr[r+1]``.  Each relation also gets
    a compact block: ``blocks[r] = (dst_ids, src_ids, row_offsets)`` and
    ``src_local[e]`` / ``dst_local[e]`` are the positions of ``src[e]`` /
    ``dst[e]`` within the block's ``src_ids`` / ``dst_ids``.
    """

    user_mean: sp.csr_matrix
    dst: np.ndarray
    rel: np.ndarray
    src: np.ndarray
    n_nodes: int
    n_items: int
    inv_degree: np.ndarray  # 1/|N_x| per node, 0 when isolated
    rel_ptr: np.ndarray
    blocks: tuple
    src_local: np.ndarray
    dst_local: np.ndarray
    by_dst: np.ndarray  # edge order sorted by destination
    dst_rows: np.ndarray  # compressed row offsets for that order

    edge_ids: Optional[np.ndarray] = None  # positions in the parent graph's edge list
    _plans: dict = field(default_factory=dict, compare=False, repr=False)

    @classmethod
    def build(cls, train_pos, n_users: int, n_items: int, kg: KnowledgeGraph,
              n_nodes: Optional[int] = None) -> "StructuralGraph":
        dst, rel, src = kg_edges(kg)
        order = np.lexsort((src, dst, rel))
        n_nodes = max(kg.n_entities, n_items) if n_nodes is None else n_nodes
        n_rel = max(kg.n_relations, int(rel.max()) + 1 if len(rel) else 0)
        return cls._from_sorted(user_mean_adjacency(train_pos, n_users, n_items),
                                dst[order], rel[order], src[order], n_nodes, n_items, n_rel)

    @classmethod
    def _from_sorted(cls, user_mean, dst, rel, src, n_nodes, n_items, n_rel, edge_ids=None):
        deg = np.bincount(dst, minlength=n_nodes).astype(float)
        inv = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
        rel_ptr = np.searchsorted(rel, np.arange(n_rel + 1))
        blocks = []
        src_local, dst_local = np.empty(len(src), np.int64), np.empty(len(src), np.int64)
        for r in range(n_rel):
            s = slice(rel_ptr[r], rel_ptr[r + 1])
            dst_ids, dst_local[s], counts = np.unique(dst[s], return_inverse=True,
                                                      return_counts=True)
            src_ids, src_local[s] = np.unique(src[s], return_inverse=True)
            blocks.append((dst_ids, src_ids, np.r_[0, np.cumsum(counts)].astype(np.int64)))
        by_dst = np.argsort(dst, kind="stable")
        dst_rows = np.r_[0, np.cumsum(np.bincount(dst, minlength=n_nodes))].astype(np.int64)
        return cls(user_mean, dst, rel, src, n_nodes, n_items, inv, rel_ptr, tuple(blocks),
                   src_local, dst_local, by_dst, dst_rows, edge_ids)

    def restrict(self, keep: np.ndarray) -> "StructuralGraph":
        """Subgraph of the edges flagged in ``keep``; ``edge_ids`` maps back."""
        ids = np.flatnonzero(keep)
        return self._from_sorted(self.user_mean, self.dst[ids], self.rel[ids], self.src[ids],
                                 self.n_nodes, self.n_items, len(self.rel_ptr) - 1, ids)

    def layer_plan(self, depth: int) -> list:
        """Edge sets that suffice for ``depth`` propagation steps.

        Only item rows are read out, so step ``l`` (1-based) needs its output
        at nodes within ``depth - l`` hops of an item.  Returns one
        ``(graph, positions)`` pair per step; ``graph`` keeps every edge into
        those nodes (so neighborhoods stay complete) and ``positions`` index
        the edges of the first step's graph.
        """
        if depth not in self._plans:
            needed = [np.zeros(self.n_nodes, bool) for _ in range(depth)]
            if depth:
                needed[-1][: self.n_items] = True
            for l in range(depth - 2, -1, -1):
                needed[l] = needed[l + 1].copy()
                needed[l][self.src[needed[l + 1][self.dst]]] = True
            first = self.restrict(needed[0][self.dst]) if depth else self
            plan = []
            for l in range(depth):
                keep = needed[l][first.dst]
                plan.append((first if l == 0 else first.restrict(keep), np.flatnonzero(keep)))
            self._plans[depth] = plan
        return self._plans[depth]

    def relation_block(self, r: int, values: np.ndarray) -> sp.csr_matrix:
        """Compact ``|dst_ids| x |src_ids|`` matrix of relation ``r``."""
        dst_ids, src_ids, rows = self.blocks[r]
        s = slice(self.rel_ptr[r], self.rel_ptr[r + 1])
        return sp.csr_matrix((values[s], self.src_local[s], rows),
                             shape=(len(dst_ids), len(src_ids)))

    def edge_matrix(self, values: np.ndarray) -> sp.csr_matrix:
        """``n_nodes x n_nodes`` matrix holding ``values[e]`` at ``(dst_e, src_e)``."""
        return sp.csr_matrix((values[self.by_dst], self.src[self.by_dst], self.dst_rows),
                             shape=(self.n_nodes, self.n_nodes))


EDGE_CHUNK = 1 << 17


def _chunks(lo, hi):
    for a in range(lo, hi, EDGE_CHUNK):
        yield slice(a, min(a + EDGE_CHUNK, hi))


def edge_logits(x, relation, sg: StructuralGraph) -> ad.Var:
    """``x[dst] . x[src] + |r|^2`` per edge."""
    x, relation = ad.as_var(x), ad.as_var(relation)
    xv, rv = x.value, relation.value
    rnorm = (rv ** 2).sum(axis=1)
    out = np.empty(len(sg.dst))
    for c in _chunks(0, len(sg.dst)):
        out[c] = np.einsum("ij,ij->i", xv[sg.dst[c]], xv[sg.src[c]])
    out += rnorm[sg.rel]

    def bwd(g):
        m = sg.edge_matrix(g)
        gx = m @ xv + m.T @ xv
        gr = 2.0 * rv * np.bincount(sg.rel, weights=g, minlength=len(rv))[:, None]
        return gx, gr

    return ad._op(out, (x, relation), bwd)


def relational_aggregate(x, relation, coef, sg: StructuralGraph) -> ad.Var:
    """``out[dst_e] += coef_e * (r_e * x[src_e])`` summed over edges."""
    x, relation, coef = ad.as_var(x), ad.as_var(relation), ad.as_var(coef)
    xv, rv, cv = x.value, relation.value, coef.value
    n_rel = len(sg.rel_ptr) - 1
    out = np.zeros((sg.n_nodes, xv.shape[1]))
    for r in range(n_rel):
        dst_ids, src_ids, _ = sg.blocks[r]
        if len(dst_ids):
            out[dst_ids] += (sg.relation_block(r, cv) @ xv[src_ids]) * rv[r]

    def bwd(g):
        gx = np.zeros_like(xv) if x.requires_grad else None
        gr = np.zeros_like(rv) if relation.requires_grad else None
        gcoef = np.empty(len(sg.dst)) if coef.requires_grad else None
        for r in range(n_rel):
            dst_ids, src_ids, _ = sg.blocks[r]
            if not len(dst_ids):
                continue
            gd = g[dst_ids]
            if gx is not None:
                gx[src_ids] += sg.relation_block(r, cv).T @ (gd * rv[r])
            if gr is None and gcoef is None:
                continue
            xs = xv[src_ids]
            if gr is not None:
                gr[r] = np.einsum("ij,ij->j", gd, sg.relation_block(r, cv) @ xs)
            if gcoef is not None:
                h = gd * rv[r]
                for c in _chunks(sg.rel_ptr[r], sg.rel_ptr[r + 1]):
                    gcoef[c] = np.einsum("ij,ij->i", h[sg.dst_local[c]], xs[sg.src_local[c]])
        return gx, gr, gcoef

    return ad._op(out, (x, relation, coef), bwd)


def structural_attention(sg: StructuralGraph, nodes0, relation, return_self: bool = False):
    """Per-edge attention weights, normalized over each node's neighbors plus itself.

    The self term scores ``e_x . e_x`` (no relation part) and enters only the
    normalizer; it carries no message.  With ``return_self`` the self weights
    of nodes that have neighbors (``(node_ids, weights)``) are returned too.
    """
    nodes0, relation = ad.as_var(nodes0), ad.as_var(relation)
    edge_logit = edge_logits(nodes0, relation, sg)
    has = np.flatnonzero(np.bincount(sg.dst, minlength=sg.n_nodes) > 0)
    xs = ad.take(nodes0, has)
    self_logit = ad.rowdot(xs, xs)
    logits = ad.concat([edge_logit, self_logit])
    seg = np.concatenate([sg.dst, has])
    weights = ad.segment_softmax(logits, seg, sg.n_nodes)
    edge_w = ad.take(weights, np.arange(len(sg.dst)))
    if return_self:
        return edge_w, (has, weights.value[len(sg.dst):])
    return edge_w


def structural_encode(sg: StructuralGraph, user_emb, item_emb, entity_emb, relation_emb,
                      depth: int, attention=None):
    """Path-aware propagation: users average items, KG nodes aggregate
    attention-weighted relational messages; layers are summed.

    ``attention`` may supply precomputed edge weights (e.g. to freeze them).
    """
    if depth < 0:
        raise ValueError("depth must be >= 0")
    eu = ad.as_var(user_emb)
    ei, ee, er = ad.as_var(item_emb), ad.as_var(entity_emb), ad.as_var(relation_emb)
    widths = {t.shape[1] for t in (eu, ei, er)} | ({ee.shape[1]} if ee.shape[0] else set())
    if len(widths) != 1:
        raise DimensionMismatch(f"embedding widths differ: {sorted(widths)}")
    x = ad.concat([ei, ee]) if ee.shape[0] else ei
    if x.shape[0] != sg.n_nodes:
        raise DimensionMismatch(f"{x.shape[0]} node embeddings for {sg.n_nodes} nodes")
    plan = sg.layer_plan(depth)
    users, items = [eu], [ei]
    if not depth:
        return _layer_sum(users), _layer_sum(items)
    first = plan[0][0]
    if attention is None:
        beta = structural_attention(first, x, er)
    else:
        beta = ad.take(ad.as_var(attention), first.edge_ids)
    coef = ad.mul(beta, first.inv_degree[first.dst])
    item_idx = np.arange(sg.n_items)
    for graph, positions in plan:
        users.append(ad.spmm(sg.user_mean, ad.take(x, item_idx)))
        x = relational_aggregate(x, er, ad.take(coef, positions), graph)
        items.append(ad.take(x, item_idx))
    return _layer_sum(users), _layer_sum(items)

