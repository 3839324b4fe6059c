"""CTR metrics, Recall@K and the 2-D SVD projection of item embeddings."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import ConvergenceFailure, DegenerateLabels

__all__ = [
    "CtrResult",
    "TopKResult",
    "auc",
    "f1",
    "ctr_result",
    "recall_at_k",
    "svd_project_2d",
    "write_projection",
    "read_projection",
]


@dataclass
class CtrResult:
    auc: float
    f1: float
    n_evaluated: int


@dataclass
class TopKResult:
    k: int
    recall: float
    per_user: dict = field(default_factory=dict)


def _labels(labels) -> np.ndarray:
    y = np.asarray(labels).reshape(-1)
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0/1")
    return y.astype(bool)


def auc(labels, scores) -> float:
    """Rank statistic: P(random positive outscores random negative), ties count 1/2."""
    y = _labels(labels)
    s = np.asarray(scores, float).reshape(-1)
    if len(s) != len(y):
        raise ValueError(f"{len(y)} labels vs {len(s)} scores")
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabels(f"AUC needs both classes ({n_pos} positive, {n_neg} negative)")
    ranks = rankdata(s)  # average ranks resolve ties as 1/2
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def f1(labels, scores) -> float:
    """F1 of the rule ``score >= 0`` (sigmoid >= 1/2); 0 when precision + recall is 0."""
    y = _labels(labels)
    pred = np.asarray(scores, float).reshape(-1) >= 0
    if len(y) == 0:
        raise ValueError("f1 of an empty evaluation set")
    tp = int(np.sum(pred & y))
    fp = int(np.sum(pred & ~y))
    fn = int(np.sum(~pred & y))
    if tp == 0:
        return 0.0
    precision, recall = tp / (tp + fp), tp / (tp + fn)
    return 2 * precision * recall / (precision + recall)


def ctr_result(labels, scores) -> CtrResult:
    return CtrResult(auc(labels, scores), f1(labels, scores), len(np.asarray(labels).reshape(-1)))


def recall_at_k(scores: np.ndarray, test_positives: dict, k_list, exclude: dict | None = None,
                ) -> list[TopKResult]:
    """Recall@K for every ``k`` in ``k_list``.

    ``scores`` is ``(n_users, n_items)``; ``test_positives`` and ``exclude`` map
    a user row to item ids.  Excluded items (train positives) are never
    recommended.  Ties go to the lower item id.  Users without test positives
    are skipped.
    """
    scores = np.asarray(scores, float)
    exclude = exclude or {}
    k_list = [int(k) for k in np.atleast_1d(k_list)]
    if any(k < 0 for k in k_list):
        raise ValueError("k must be nonnegative")
    per_k = {k: {} for k in k_list}
    kmax = max(k_list) if k_list else 0
    for u in sorted(test_positives):
        truth = np.unique(np.asarray(list(test_positives[u]), np.int64))
        if len(truth) == 0:
            continue
        row = scores[u].copy()
        banned = np.asarray(list(exclude.get(u, ())), np.int64)
        candidate = np.ones(len(row), bool)
        candidate[banned] = False
        ids = np.flatnonzero(candidate)
        order = ids[np.argsort(-row[ids], kind="stable")][:kmax]
        hit = np.isin(order, truth)
        cum = np.cumsum(hit)
        for k in k_list:
            n_hit = int(cum[min(k, len(cum)) - 1]) if k > 0 and len(cum) else 0
            per_k[k][u] = n_hit / len(truth)
    return [
        TopKResult(k, float(np.mean(list(per_k[k].values()))) if per_k[k] else 0.0, per_k[k])
        for k in k_list
    ]


def svd_project_2d(table, max_iter: int = 10000, tol: float = 1e-13, seed: int = 0):
    """Top-2 right singular directions of ``table`` by orthogonal iteration.

    Iterates a block of ``min(d, 8)`` vectors on the ``d x d`` Gram matrix until
    the leading two Ritz pairs stop moving, then rotates the block so that the
    projected coordinates are uncorrelated.  Returns ``(coords, directions,
    normalized_singular_values)`` with coords ``(N, 2)`` and directions
    ``(d, 2)``.
    """
    x = np.asarray(table, float)
    n, d = x.shape
    if n < 2 or d < 2:
        raise ValueError(f"need at least a 2x2 table, got {x.shape}")
    gram = x.T @ x
    scale = np.linalg.norm(gram)
    if scale == 0:
        raise ConvergenceFailure("all-zero table has no singular directions")
    p = min(d, 8)
    rng = np.random.Generator(np.random.PCG64(seed))
    q, _ = np.linalg.qr(rng.standard_normal((d, p)))
    for it in range(max_iter):
        z = gram @ q
        ritz = q.T @ z
        evals, evecs = np.linalg.eigh(ritz)
        top = evecs[:, ::-1][:, :2]
        resid = z @ top - q @ (ritz @ top)
        if np.linalg.norm(resid) <= tol * scale:
            break
        q, _ = np.linalg.qr(z)
    else:
        raise ConvergenceFailure(f"orthogonal iteration did not converge in {max_iter} steps")
    basis = q @ evecs[:, ::-1]
    coords_all = x @ basis[:, :2]
    # singular values from the projected data keep rank-deficient cases exact
    u, s, vt = np.linalg.svd(coords_all, full_matrices=False)
    directions = basis[:, :2] @ vt.T
    directions, _r = _orthonormalize(directions)
    coords = x @ directions
    sv = np.linalg.norm(coords, axis=0)
    order = np.argsort(-sv, kind="stable")
    coords, directions, sv = coords[:, order], directions[:, order], sv[order]
    return coords, directions, sv / sv[0]


def _orthonormalize(v):
    q, r = np.linalg.qr(v)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return q * signs, r


def write_projection(path, coords, singular_values, item_ids=None) -> None:
    """``item_id x y`` per line, then ``# singular_values s1 s2``."""
    coords = np.asarray(coords, float)
    ids = np.arange(len(coords)) if item_ids is None else np.asarray(item_ids)
    lines = [f"{int(i)} {x!r} {y!r}" for i, (x, y) in zip(ids, coords.tolist())]
    lines.append("# singular_values " + " ".join(repr(float(s)) for s in singular_values))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_projection(path):
    ids, coords, sv = [], [], None
    with open(path) as fh:
        for line in fh:
            if line.startswith("# singular_values"):
                sv = np.array([float(t) for t in line.split()[2:]])
            elif line.strip():
                i, x, y = line.split()
                ids.append(int(i))
                coords.append((float(x), float(y)))
    return np.array(ids), np.array(coords), sv
