import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mcclk.encoders import (
    StructuralGraph,
    collaborative_adjacency,
    collaborative_encode,
    relation_attention,
    semantic_encode,
    structural_attention,
    structural_encode,
)
from mcclk.errors import DimensionMismatch, EmptyNeighborhood
from mcclk.graph import SparseAdjacency
from mcclk.ingest import InteractionGraph, KnowledgeGraph
from mcclk.semantic import SemanticGraph
from mcclk.synthetic import planted_dataset


def graph(pos, n_users, n_items):
    return InteractionGraph(n_users, n_items, np.asarray(pos).reshape(-1, 2), np.zeros((0, 2), int))


def dense_lightgcn(pos, eu, ei, depth):
    """Reference: powers of the normalized (M+N)x(M+N) adjacency."""
    m, n = len(eu), len(ei)
    a = np.zeros((m + n, m + n))
    for u, i in pos:
        a[u, m + i] = a[m + i, u] = 1.0
    d = a.sum(axis=1)
    inv = np.where(d > 0, 1.0 / np.sqrt(np.where(d > 0, d, 1.0)), 0.0)
    norm = inv[:, None] * a * inv[None, :]
    e = np.vstack([eu, ei])
    total, cur = e.copy(), e
    for _ in range(depth):
        cur = norm @ cur
        total += cur
    return total[:m], total[m:]


class TestCollaborative:
    def test_zero_depth(self):
        eu, ei = np.ones((2, 3)), np.arange(9.0).reshape(3, 3)
        zu, zi = collaborative_encode(graph([[0, 1]], 2, 3), eu, ei, 0)
        np.testing.assert_array_equal(zu.value, eu)
        np.testing.assert_array_equal(zi.value, ei)

    def test_one_edge_hand_case(self):
        zu, zi = collaborative_encode(graph([[0, 0]], 1, 1), np.array([[2.0]]), np.array([[3.0]]), 1)
        assert zu.value[0, 0] == 5.0 and zi.value[0, 0] == 5.0

    def test_zero_embeddings(self):
        zu, zi = collaborative_encode(graph([[0, 0], [1, 1]], 2, 2), np.zeros((2, 4)), np.zeros((2, 4)), 3)
        assert not zu.value.any() and not zi.value.any()

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 8), st.integers(1, 12), st.integers(0, 4))
    def test_matches_dense_reference(self, seed, m, n, depth):
        r = np.random.default_rng(seed)
        mask = r.random((m, n)) < 0.35
        pos = np.argwhere(mask)
        eu, ei = r.normal(size=(m, 3)), r.normal(size=(n, 3))
        zu, zi = collaborative_encode(graph(pos, m, n), eu, ei, depth)
        ru, ri = dense_lightgcn(pos, eu, ei, depth)
        np.testing.assert_allclose(zu.value, ru, rtol=0, atol=1e-10)
        np.testing.assert_allclose(zi.value, ri, rtol=0, atol=1e-10)

    def test_disconnected_nodes_keep_layer_zero(self):
        eu, ei = np.arange(6.0).reshape(3, 2), np.arange(8.0).reshape(4, 2)
        zu, zi = collaborative_encode(graph([[0, 0]], 3, 4), eu, ei, 3)
        np.testing.assert_array_equal(zu.value[1:], eu[1:])
        np.testing.assert_array_equal(zi.value[1:], ei[1:])
        assert np.all(np.isfinite(zu.value))

    def test_weights(self):
        a = collaborative_adjacency(np.array([[0, 0], [0, 1], [1, 1]]), 2, 2).toarray()
        np.testing.assert_allclose(a, [[1 / math.sqrt(2), 1 / 2], [0, 1 / math.sqrt(2)]])

    def test_width_mismatch(self):
        with pytest.raises(DimensionMismatch):
            collaborative_encode(graph([[0, 0]], 1, 1), np.ones((1, 2)), np.ones((1, 3)), 1)


class TestSemanticEncode:
    def test_zero_depth(self):
        ei = np.arange(6.0).reshape(3, 2)
        np.testing.assert_array_equal(semantic_encode(np.zeros((3, 3)), ei, 0).value, ei)

    def test_two_item_hand_case(self):
        g = SemanticGraph(SparseAdjacency.from_dense(np.array([[0.0, 1.0], [1.0, 0.0]])), 1)
        z = semantic_encode(g, np.array([[1.0], [2.0]]), 1)
        np.testing.assert_array_equal(z.value[:, 0], [3.0, 3.0])

    def test_empty_graph(self):
        g = SemanticGraph(SparseAdjacency.empty(4, 4), 3)
        ei = np.random.default_rng(0).normal(size=(4, 3))
        np.testing.assert_array_equal(semantic_encode(g, ei, 2).value, ei)

    def test_linear(self):
        r = np.random.default_rng(2)
        s = r.random((5, 5)) * (r.random((5, 5)) < 0.5)
        ei = r.normal(size=(5, 3))
        np.testing.assert_allclose(semantic_encode(s, 2 * ei, 2).value,
                                   2 * semantic_encode(s, ei, 2).value, rtol=1e-14)


class TestRelationAttention:
    def test_single_neighbor(self):
        w = relation_attention(np.ones(3), np.ones((1, 3)), np.full((1, 3), 2.0))
        np.testing.assert_array_equal(w, [1.0])

    def test_equal_logits(self):
        w = relation_attention(np.zeros(2), np.ones((4, 2)), np.random.default_rng(0).normal(size=(4, 2)))
        np.testing.assert_allclose(w, 0.25, atol=1e-15)

    def test_hand_softmax(self):
        x = np.array([1.0, 0.0])
        neighbors = np.array([[0.0, 5.0], [math.log(3.0), 0.0]])
        w = relation_attention(x, np.zeros((2, 2)), neighbors)
        np.testing.assert_allclose(w, [0.25, 0.75], rtol=1e-14)

    def test_empty(self):
        with pytest.raises(EmptyNeighborhood):
            relation_attention(np.ones(2), np.zeros((0, 2)), np.zeros((0, 2)))


def small_structural(seed=0, d=4):
    ds = planted_dataset(n_users=6, n_items=8, n_clusters=2, n_attr_per_cluster=2,
                         n_noise_entities=3, seed=seed)
    sg = StructuralGraph.build(ds.graph.positives, ds.n_users, ds.n_items, ds.kg)
    r = np.random.default_rng(seed)
    tables = (r.normal(size=(ds.n_users, d)), r.normal(size=(ds.n_items, d)),
              r.normal(size=(ds.n_entities - ds.n_items, d)), r.normal(size=(ds.n_relations, d)) * 0.5)
    return ds, sg, tables


def loop_structural(ds, tables, depth):
    """Reference written per node from the neighborhood definitions."""
    eu, ei, ee, er = tables
    x0 = np.vstack([ei, ee])
    nbrs = {v: [] for v in range(len(x0))}
    for h, r, t in ds.kg.triples:
        nbrs[h].append((r, t))
        nbrs[t].append((r, h))
    beta = {}
    for v, lst in nbrs.items():
        if not lst:
            continue
        logits = [x0[v] @ x0[w] + er[r] @ er[r] for r, w in lst] + [x0[v] @ x0[v]]
        z = np.exp(np.array(logits) - max(logits))
        beta[v] = z[:-1] / z.sum()
    items_of = {u: [] for u in range(len(eu))}
    for u, i in ds.graph.positives:
        items_of[u].append(i)
    x, users, items = x0, [eu], [ei]
    for _ in range(depth):
        users.append(np.array([np.mean([x[i] for i in items_of[u]], axis=0) if items_of[u]
                               else np.zeros(eu.shape[1]) for u in range(len(eu))]))
        new = np.zeros_like(x)
        for v, lst in nbrs.items():
            for b, (r, w) in zip(beta.get(v, []), lst):
                new[v] += b * er[r] * x[w] / len(lst)
        x = new
        items.append(x[:len(ei)])
    return sum(users), sum(items)


class TestStructural:
    def test_zero_depth(self):
        ds, sg, (eu, ei, ee, er) = small_structural()
        zu, zi = structural_encode(sg, eu, ei, ee, er, 0)
        np.testing.assert_array_equal(zu.value, eu)
        np.testing.assert_array_equal(zi.value, ei)

    @pytest.mark.parametrize("depth", [1, 2, 3])
    def test_matches_loop_reference(self, depth):
        ds, sg, tables = small_structural(seed=depth)
        zu, zi = structural_encode(sg, *tables, depth)
        ru, ri = loop_structural(ds, tables, depth)
        np.testing.assert_allclose(zu.value, ru, rtol=1e-12, atol=1e-13)
        np.testing.assert_allclose(zi.value, ri, rtol=1e-12, atol=1e-13)

    def test_user_with_one_item(self):
        kg = KnowledgeGraph(2, 1, np.array([[0, 0, 1]]), np.arange(2))
        sg = StructuralGraph.build(np.array([[0, 1]]), 1, 2, kg)
        ei = np.array([[1.0, 2.0], [3.0, 4.0]])
        zu, _ = structural_encode(sg, np.zeros((1, 2)), ei, np.zeros((0, 2)), np.ones((1, 2)), 1)
        np.testing.assert_array_equal(zu.value[0], ei[1])

    def test_single_triple_unit_attention(self):
        kg = KnowledgeGraph(2, 1, np.array([[0, 0, 1]]), np.arange(1))
        sg = StructuralGraph.build(np.array([[0, 0]]), 1, 1, kg)
        ev = np.array([[0.5, -2.0]])
        ei = np.array([[1.0, 1.0]])
        _, zi = structural_encode(sg, np.zeros((1, 2)), ei, ev, np.ones((1, 2)), 1,
                                  attention=np.ones(len(sg.dst)))
        np.testing.assert_array_equal(zi.value[0] - ei[0], ev[0])

    def test_attention_normalized_and_positive(self):
        ds, sg, (eu, ei, ee, er) = small_structural(seed=4)
        w, (nodes, self_w) = structural_attention(sg, np.vstack([ei, ee]), er, return_self=True)
        total = np.bincount(sg.dst, weights=w.value, minlength=sg.n_nodes)
        total[nodes] += self_w
        np.testing.assert_allclose(total[nodes], 1.0, rtol=0, atol=1e-12)
        assert np.all(w.value > 0) and np.all(self_w > 0)

    def test_homogeneous_with_frozen_attention(self):
        ds, sg, (eu, ei, ee, er) = small_structural(seed=5)
        beta = structural_attention(sg, np.vstack([ei, ee]), er).value
        a = structural_encode(sg, eu, ei, ee, er, 2, attention=beta)
        b = structural_encode(sg, 2 * eu, 2 * ei, 2 * ee, er, 2, attention=beta)
        for x, y in zip(a, b):
            np.testing.assert_allclose(y.value, 2 * x.value, rtol=1e-13)

    def test_isolated_nodes_finite(self):
        kg = KnowledgeGraph(5, 2, np.array([[0, 1, 4]]), np.arange(3))
        sg = StructuralGraph.build(np.array([[0, 0]]), 2, 3, kg)
        r = np.random.default_rng(1)
        zu, zi = structural_encode(sg, r.normal(size=(2, 3)), r.normal(size=(3, 3)),
                                   r.normal(size=(2, 3)), r.normal(size=(2, 3)), 2)
        assert np.all(np.isfinite(zu.value)) and np.all(np.isfinite(zi.value))


class TestLayerPlan:
    def chain(self):
        # item 0 - e1 - e2 - e3, one relation; the far end cannot reach item rows in 2 steps
        kg = KnowledgeGraph(4, 1, np.array([[0, 0, 1], [1, 0, 2], [2, 0, 3]]), np.arange(1))
        return StructuralGraph.build(np.array([[0, 0]]), 1, 1, kg)

    def test_edges_pruned_by_distance(self):
        plan = self.chain().layer_plan(2)
        first, second = plan[0][0], plan[1][0]
        assert sorted(zip(first.dst.tolist(), first.src.tolist())) == [(0, 1), (1, 0), (1, 2)]
        assert list(zip(second.dst.tolist(), second.src.tolist())) == [(0, 1)]

    def test_pruned_equals_unpruned(self):
        sg = self.chain()
        r = np.random.default_rng(0)
        x, rel = r.normal(size=(4, 3)), r.normal(size=(1, 3))
        zu, zi = structural_encode(sg, r.normal(size=(1, 3)), x[:1], x[1:], rel, 2)
        # dense unpruned reference over all nodes
        beta = structural_attention(sg, x, rel).value
        coef = beta * sg.inv_degree[sg.dst]
        layers, cur = [x[:1]], x
        for _ in range(2):
            nxt = np.zeros_like(cur)
            np.add.at(nxt, sg.dst, coef[:, None] * rel[sg.rel] * cur[sg.src])
            cur = nxt
            layers.append(cur[:1])
        np.testing.assert_allclose(zi.value, sum(layers), rtol=1e-14)
