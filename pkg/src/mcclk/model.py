"""The full model: parameters, three-view forward pass, batch objective and
finite-difference gradient verification."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .config import ModelConfig
from .contrastive import cross_view_nce, project
from .encoders import (
    StructuralGraph,
    ViewRepresentations,
    collaborative_adjacency,
    collaborative_encode,
    semantic_encode,
    structural_encode,
)
from .errors import GradCheckFailure
from .ingest import Dataset, InteractionGraph, KnowledgeGraph
from .objective import bpr_loss, final_representations, score_pairs, total_loss, xavier_init
from .semantic import SemanticGraph, build_semantic_graph

log = logging.getLogger(__name__)

HEAD_PARTS = ("w1", "b1", "w2", "b2")
PARAM_NAMES = ("user", "item", "entity", "relation") + tuple(
    f"{head}_{part}" for head in ("local", "global") for part in HEAD_PARTS
)


def init_params(n_users, n_items, n_entities, n_relations, dim, rng) -> dict:
    """Xavier-initialized tables; ``n_entities`` counts items too."""
    params = {
        "user": xavier_init((n_users, dim), rng),
        "item": xavier_init((n_items, dim), rng),
        "entity": xavier_init((n_entities - n_items, dim), rng)
        if n_entities > n_items else np.zeros((0, dim)),
        "relation": xavier_init((n_relations, dim), rng),
    }
    for head in ("local", "global"):
        params[f"{head}_w1"] = xavier_init((dim, dim), rng)
        params[f"{head}_b1"] = np.zeros(dim)
        params[f"{head}_w2"] = xavier_init((dim, dim), rng)
        params[f"{head}_b2"] = np.zeros(dim)
    return {name: params[name] for name in PARAM_NAMES}


@dataclass
class BatchLosses:
    bpr: ad.Var
    local: ad.Var
    global_: ad.Var
    reg: ad.Var
    total: ad.Var

    def values(self) -> dict:
        return {
            "l_bpr": float(self.bpr.value),
            "l_local": float(self.local.value),
            "l_global": float(self.global_.value),
            "l_total": float(self.total.value),
        }


class MCCLK:
    """Model bound to one dataset and one training interaction set."""

    def __init__(self, cfg: ModelConfig, dataset: Dataset, train_records: np.ndarray,
                 params: Optional[dict] = None, rng: Optional[np.random.Generator] = None):
        self.cfg = cfg
        self.dataset = dataset
        self.n_users = dataset.n_users
        self.n_items = dataset.n_items
        self.n_nodes = max(dataset.n_entities, dataset.n_items)
        self.n_relations = max(dataset.n_relations, 1)
        rec = np.asarray(train_records, np.int64).reshape(-1, 3)
        self.train_pos = rec[rec[:, 2] > 0, :2]
        self.collab = collaborative_adjacency(self.train_pos, self.n_users, self.n_items)
        self.struct = StructuralGraph.build(
            self.train_pos, self.n_users, self.n_items, dataset.kg, self.n_nodes
        )
        if params is None:
            if rng is None:
                raise ValueError("need params or an rng to initialize them")
            params = init_params(self.n_users, self.n_items, self.n_nodes,
                                 self.n_relations, cfg.dim, rng)
        self.params = params
        self.semantic: Optional[SemanticGraph] = None

    # graph views ---------------------------------------------------------

    def rebuild_semantic(self, epoch: int = 0, params: Optional[dict] = None) -> SemanticGraph:
        p = self.params if params is None else params
        self.semantic = build_semantic_graph(
            self.dataset.kg, p["item"], p["entity"], p["relation"],
            self.cfg.knn_k, self.cfg.kg_depth, self.cfg.similarity_block, epoch,
        )
        return self.semantic

    def forward(self, params: dict) -> ViewRepresentations:
        if self.semantic is None:
            self.rebuild_semantic()
        cfg = self.cfg
        zu_c, zi_c = collaborative_encode(self.collab, params["user"], params["item"], cfg.collab_depth)
        zi_s = semantic_encode(self.semantic, params["item"], cfg.semantic_depth)
        zu_g, zi_g = structural_encode(
            self.struct, params["user"], params["item"], params["entity"],
            params["relation"], cfg.struct_depth,
        )
        return ViewRepresentations(zu_c, zi_c, zi_s, zu_g, zi_g)

    # objective -----------------------------------------------------------

    def effective_alpha(self) -> float:
        return {"no-local": 0.0, "no-global": 1.0}.get(self.cfg.ablation, self.cfg.alpha)

    def batch_losses(self, params: dict, users, pos, neg, parts=("bpr", "local", "global", "reg"),
                     reps: Optional[ViewRepresentations] = None) -> BatchLosses:
        """Objective on a batch of ``(user, positive, negative)`` triples.

        ``parts`` selects which terms are computed; the others are 0.  ``reps``
        may carry a forward pass already computed from ``params``.
        """
        cfg = self.cfg
        users, pos, neg = (np.asarray(a, np.int64) for a in (users, pos, neg))
        if reps is None:
            reps = self.forward(params)
        zu, zi = final_representations(reps)
        zero = ad.Var(0.0, requires_grad=False)
        bpr = bpr_loss(score_pairs(zu, zi, users, pos), score_pairs(zu, zi, users, neg)) \
            if "bpr" in parts else zero
        if cfg.negative_scope == "full-graph":
            items_b, users_b = np.arange(self.n_items), np.arange(self.n_users)
        else:
            items_b, users_b = np.unique(pos), np.unique(users)
        enough = len(items_b) >= 2 and len(users_b) >= 2
        local = glob = zero
        if "local" in parts and cfg.ablation != "no-local" and enough:
            local = ad.mean(cross_view_nce(
                self._proj(reps.zi_s, items_b, params, "local"),
                self._proj(reps.zi_c, items_b, params, "local"), cfg.tau))
        if "global" in parts and cfg.ablation != "no-global" and enough:
            zl_i = ad.add(reps.zi_c, reps.zi_s)
            halves = []
            for zg, zl, idx in ((reps.zi_g, zl_i, items_b), (reps.zu_g, reps.zu_c, users_b)):
                g = self._proj(zg, idx, params, "global")
                l = self._proj(zl, idx, params, "global")
                both = ad.add(cross_view_nce(g, l, cfg.tau), cross_view_nce(l, g, cfg.tau))
                halves.append(ad.scale(ad.mean(both), 0.5))
            glob = ad.add(halves[0], halves[1])
        reg = zero
        if "reg" in parts:
            reg = ad.add(ad.sum_squares(ad.take(params["user"], np.unique(users))),
                         ad.sum_squares(ad.take(params["item"], np.unique(np.r_[pos, neg]))))
            for name in PARAM_NAMES[4:]:
                reg = ad.add(reg, ad.sum_squares(params[name]))
        total = total_loss(bpr, local, glob, self.effective_alpha(), cfg.contrast_weight,
                           cfg.l2, reg)
        return BatchLosses(bpr, local, glob, reg, total)

    @staticmethod
    def _proj(z, idx, params, head):
        return project(ad.take(z, idx), *(params[f"{head}_{p}"] for p in HEAD_PARTS))

    # inference -----------------------------------------------------------

    def final_embeddings(self, params: Optional[dict] = None):
        p = self.params if params is None else params
        zu, zi = final_representations(self.forward(p))
        return zu.value, zi.value

    def predict(self, users, items, params: Optional[dict] = None) -> np.ndarray:
        zu, zi = self.final_embeddings(params)
        return (zu[np.asarray(users)] * zi[np.asarray(items)]).sum(axis=1)


# gradient verification ---------------------------------------------------

COMPONENTS = {
    "bpr": ("bpr",),
    "local": ("local",),
    "global": ("global",),
    "combined": ("bpr", "local", "global", "reg"),
}


@dataclass
class BlockResult:
    name: str
    component: str
    analytic: np.ndarray
    numeric: np.ndarray
    rel_error: float
    passed: bool


@dataclass
class GradientReport:
    blocks: list = field(default_factory=list)
    tolerance: float = 1e-4

    @property
    def passed(self) -> bool:
        return all(b.passed for b in self.blocks)

    def table(self) -> str:
        lines = [f"{'component':<10} {'block':<12} {'|analytic|':>12} {'|numeric|':>12} {'rel.err':>10}  ok"]
        for b in self.blocks:
            lines.append(
                f"{b.component:<10} {b.name:<12} {np.linalg.norm(b.analytic):12.4e} "
                f"{np.linalg.norm(b.numeric):12.4e} {b.rel_error:10.2e}  {'yes' if b.passed else 'NO'}"
            )
        return "\n".join(lines)


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


def toy_dataset() -> Dataset:
    """4 users, 5 items, 6 further entities, 3 relations."""
    labeled = np.array([
        (0, 0, 1), (0, 1, 1), (0, 3, 0), (0, 4, 0),
        (1, 1, 1), (1, 2, 1), (1, 0, 0), (1, 4, 0),
        (2, 2, 1), (2, 3, 1), (2, 0, 0), (2, 1, 0),
        (3, 3, 1), (3, 4, 1), (3, 0, 0), (3, 2, 0),
    ])
    triples = np.array([
        (0, 0, 5), (1, 0, 5), (1, 1, 6), (2, 1, 6), (2, 2, 7),
        (3, 2, 8), (4, 0, 9), (4, 2, 10), (5, 1, 9), (7, 0, 10), (3, 1, 0),
    ])
    graph = InteractionGraph.from_labeled(labeled, 4, 5)
    kg = KnowledgeGraph(11, 3, triples, np.arange(5))
    return Dataset(graph, kg, "toy")


def toy_model(seed: int = 7, dim: int = 8, **overrides) -> tuple:
    ds = toy_dataset()
    cfg = ModelConfig(dim=dim, knn_k=2, collab_depth=2, kg_depth=2, semantic_depth=2,
                      struct_depth=2, tau=0.5, l2=1e-2, negative_scope="full-graph",
                      batch_size=8, dataset="toy", **overrides)
    rng = np.random.Generator(np.random.PCG64(seed))
    model = MCCLK(cfg, ds, ds.graph.labeled(), rng=rng)
    # nudge heads away from the ELU kink and give biases nonzero values
    for name in PARAM_NAMES[4:]:
        if name.endswith(("b1", "b2")):
            model.params[name] = rng.uniform(-0.5, 0.5, size=dim)
    model.rebuild_semantic()
    batch = (np.array([0, 1, 2, 3, 0, 2]), np.array([0, 2, 3, 4, 1, 2]), np.array([3, 4, 0, 2, 4, 1]))
    return model, batch


def grad_check(model: MCCLK, batch, eps: float = 1e-5, tol: float = 1e-4,
               components=("bpr", "local", "global", "combined"), raise_on_fail=False,
               ) -> GradientReport:
    """Compare tape gradients with central differences for every parameter block."""
    users, pos, neg = batch
    n_params = sum(p.size for p in model.params.values())
    if n_params > 1000:
        raise ValueError(f"{n_params} parameters is too many for central differences")
    report = GradientReport(tolerance=tol)
    for comp in components:
        parts = COMPONENTS[comp]

        def f(params):
            return float(model.batch_losses(params, users, pos, neg, parts).total.value)

        leaves = {k: ad.Var(v.copy(), requires_grad=True, name=k) for k, v in model.params.items()}
        out = model.batch_losses(leaves, users, pos, neg, parts).total
        ad.backward(out)
        base = {k: v.copy() for k, v in model.params.items()}
        for name in PARAM_NAMES:
            analytic = leaves[name].grad
            analytic = np.zeros_like(base[name]) if analytic is None else analytic
            numeric = np.zeros_like(base[name])
            flat = base[name].reshape(-1)
            num_flat = numeric.reshape(-1)
            for k in range(flat.size):
                old = flat[k]
                flat[k] = old + eps
                fp = f(base)
                flat[k] = old - eps
                fm = f(base)
                flat[k] = old
                num_flat[k] = (fp - fm) / (2 * eps)
            err = relative_error(analytic, numeric)
            report.blocks.append(BlockResult(name, comp, analytic, numeric, err, err <= tol))
    if raise_on_fail and not report.passed:
        raise GradCheckFailure(report)
    return report
