"""Dataset loading, implicit-feedback conversion and train/eval/test splitting.

Canonical on-disk layout of a dataset directory::

    ratings_final.txt   user item label      (label 1 = positive, 0 = sampled negative)
    kg_final.txt        head relation tail

Items are KG entities: item ``i`` is aligned with entity ``i`` in the canonical
files.  After loading, the node space used for propagation places the ``N``
items at ids ``0..N-1`` and the remaining entities at ``N..|E|-1``.
"""

from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import BadRatios, EmptyFile, IndexOutOfBounds, ParseError
from .graph import make_rng

log = logging.getLogger(__name__)

RATINGS_FILE = "ratings_final.txt"
KG_FILE = "kg_final.txt"
SPLIT_MANIFEST = "split_manifest.txt"

# raw rating thresholds; None means every rating is a positive
THRESHOLDS = {"movie": 4.0, "book": None, "music": None}


@dataclass
class RatingTable:
    """Parsed ``user item rating`` records with dense 0-based ids.

    ``user_ids[k]`` / ``item_ids[k]`` hold the original id of dense index ``k``.
    """

    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    user_ids: np.ndarray
    item_ids: np.ndarray

    def __len__(self):
        return len(self.users)

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)


@dataclass
class InteractionGraph:
    n_users: int
    n_items: int
    positives: np.ndarray  # (P, 2) user, item
    negatives: np.ndarray  # (Q, 2) user, item
    # users whose negative count had to be cut short (rated nearly every item)
    short_users: list = field(default_factory=list)

    def labeled(self) -> np.ndarray:
        """All records as ``(user, item, label)`` rows sorted by user then item."""
        pos = np.column_stack([self.positives, np.ones(len(self.positives), np.int64)])
        neg = np.column_stack([self.negatives, np.zeros(len(self.negatives), np.int64)])
        rec = np.concatenate([pos, neg]).astype(np.int64).reshape(-1, 3)
        return rec[np.lexsort((rec[:, 1], rec[:, 0]))]

    @classmethod
    def from_labeled(cls, records: np.ndarray, n_users=None, n_items=None) -> "InteractionGraph":
        records = np.asarray(records, dtype=np.int64).reshape(-1, 3)
        n_users = int(records[:, 0].max()) + 1 if n_users is None else n_users
        n_items = int(records[:, 1].max()) + 1 if n_items is None else n_items
        lab = records[:, 2] > 0
        return cls(n_users, n_items, records[lab, :2].copy(), records[~lab, :2].copy())


@dataclass
class KnowledgeGraph:
    n_entities: int
    n_relations: int
    triples: np.ndarray  # (T, 3) head, relation, tail
    # alignment[i] = entity id of item i
    alignment: Optional[np.ndarray] = None
    n_duplicates_dropped: int = 0

    @property
    def n_triples(self) -> int:
        return len(self.triples)


@dataclass
class DataSplit:
    train: np.ndarray  # (n, 3) user, item, label
    eval: np.ndarray
    test: np.ndarray
    seed: int
    ratios: tuple

    def manifest_text(self) -> str:
        lines = [
            f"seed = {self.seed}",
            "ratios = " + " ".join(repr(float(r)) for r in self.ratios),
        ]
        for name in ("train", "eval", "test"):
            part = getattr(self, name)
            lines.append(
                f"{name} = {len(part)} records, {int(part[:, 2].sum())} positive"
            )
        return "\n".join(lines) + "\n"

    def serialize(self) -> bytes:
        chunks = [self.manifest_text().encode()]
        for name in ("train", "eval", "test"):
            chunks.append(_records_text(getattr(self, name)).encode())
        return b"".join(chunks)

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / SPLIT_MANIFEST).write_text(self.manifest_text())
        for name in ("train", "eval", "test"):
            (out / f"{name}.txt").write_text(_records_text(getattr(self, name)))


@dataclass
class Dataset:
    """Interaction graph and KG in one node space (items first, then entities)."""

    graph: InteractionGraph
    kg: KnowledgeGraph
    name: str = ""

    @property
    def n_users(self):
        return self.graph.n_users

    @property
    def n_items(self):
        return self.graph.n_items

    @property
    def n_entities(self):
        return self.kg.n_entities

    @property
    def n_relations(self):
        return self.kg.n_relations


def _records_text(rec: np.ndarray) -> str:
    return "".join(f"{u} {i} {y}\n" for u, i, y in rec.tolist())


def _read_columns(path, n_cols: int, kinds: Sequence[type]) -> list[tuple]:
    path = Path(path)
    out = []
    with path.open() as fh:
        for line_no, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) < n_cols:
                raise ParseError(path, line_no, line.rstrip("\n"))
            try:
                out.append(tuple(k(p) for k, p in zip(kinds, parts[:n_cols])))
            except ValueError:
                raise ParseError(path, line_no, line.rstrip("\n")) from None
    return out


def load_interactions(path) -> RatingTable:
    """Parse a whitespace-separated ``user item rating`` file.

    User and item ids are compacted to dense ranges in increasing order of the
    original id; the original ids are kept on the returned table.
    """
    rows = _read_columns(path, 3, (int, int, float))
    if not rows:
        raise EmptyFile(f"{path}: no interaction records")
    arr = np.array(rows, dtype=np.float64)
    user_ids, users = np.unique(arr[:, 0].astype(np.int64), return_inverse=True)
    item_ids, items = np.unique(arr[:, 1].astype(np.int64), return_inverse=True)
    return RatingTable(users.astype(np.int64), items.astype(np.int64), arr[:, 2], user_ids, item_ids)


def implicitize(
    table: RatingTable, threshold: Optional[float], rng: np.random.Generator
) -> InteractionGraph:
    """Convert explicit ratings to balanced implicit feedback.

    Ratings at or above ``threshold`` (all ratings when it is None) become
    positives.  Sub-threshold ratings are dropped and are never sampled as
    negatives.  Each user gets as many negatives as positives, drawn without
    replacement from items the user never rated.
    """
    users, items, ratings = table.users, table.items, table.ratings
    keep = np.ones(len(users), bool) if threshold is None else ratings >= threshold
    all_items = np.arange(table.n_items)
    pos_rows, neg_rows, short = [], [], []
    order = np.lexsort((items, users))
    users, items, keep = users[order], items[order], keep[order]
    bounds = np.flatnonzero(np.diff(users)) + 1
    for seg_u, seg_i, seg_k in zip(
        np.split(users, bounds), np.split(items, bounds), np.split(keep, bounds)
    ):
        if len(seg_u) == 0:
            continue
        pos = np.unique(seg_i[seg_k])
        if len(pos) == 0:
            continue
        u = int(seg_u[0])
        rated = np.unique(seg_i)
        unrated = np.setdiff1d(all_items, rated, assume_unique=True)
        n_neg = len(pos)
        if len(unrated) < n_neg:
            short.append((u, n_neg, len(unrated)))
            log.warning("user %d: only %d unrated items for %d positives", u, len(unrated), n_neg)
            n_neg = len(unrated)
        neg = np.sort(rng.choice(unrated, size=n_neg, replace=False)) if n_neg else unrated[:0]
        pos_rows.append(np.column_stack([np.full(len(pos), u), pos]))
        neg_rows.append(np.column_stack([np.full(len(neg), u), neg]))
    empty = np.zeros((0, 2), np.int64)
    return InteractionGraph(
        table.n_users,
        table.n_items,
        np.concatenate(pos_rows).astype(np.int64) if pos_rows else empty,
        np.concatenate(neg_rows).astype(np.int64) if neg_rows else empty,
        short,
    )


def load_kg(path) -> KnowledgeGraph:
    """Parse ``head relation tail`` integer triples; duplicates are dropped."""
    rows = _read_columns(path, 3, (int, int, int))
    if not rows:
        return KnowledgeGraph(0, 0, np.zeros((0, 3), np.int64))
    arr = np.array(rows, dtype=np.int64)
    if (arr < 0).any():
        raise IndexOutOfBounds(f"{path}: negative id in KG")
    _, first = np.unique(arr, axis=0, return_index=True)
    first.sort()
    n_dup = len(arr) - len(first)
    if n_dup:
        log.warning("%s: dropped %d duplicate triples", path, n_dup)
    arr = arr[first]
    n_entities = int(max(arr[:, 0].max(), arr[:, 2].max())) + 1
    n_relations = int(arr[:, 1].max()) + 1
    return KnowledgeGraph(n_entities, n_relations, arr, None, n_dup)


def split(graph: InteractionGraph, ratios=(0.6, 0.2, 0.2), seed: int = 2022) -> DataSplit:
    """Deterministic per-user stratified split of all labeled records.

    Each user's records are shuffled and spread evenly over ``[0, 1)``; the
    global order by that position is then cut at the exact target counts, so
    every user contributes to each part in proportion and the global sizes
    are within one record of the requested ratios.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) <= 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise BadRatios(f"ratios must be three positive numbers summing to 1, got {ratios}")
    rec = graph.labeled()
    n = len(rec)
    rng = make_rng(seed)
    jitter = rng.random(n)
    # random rank within each user
    order = np.lexsort((jitter, rec[:, 0]))
    users_sorted = rec[order, 0]
    starts = np.r_[0, np.flatnonzero(np.diff(users_sorted)) + 1]
    counts = np.diff(np.r_[starts, n])
    rank = np.arange(n) - np.repeat(starts, counts)
    position = np.empty(n)
    position[order] = (rank + 0.5) / np.repeat(counts, counts)
    tie = rng.random(n)
    global_order = np.lexsort((tie, position))
    n_train = int(round(ratios[0] * n))
    n_eval = int(round((ratios[0] + ratios[1]) * n)) - n_train
    parts = np.split(global_order, [n_train, n_train + n_eval])

    def _sorted(idx):
        part = rec[np.sort(idx)]
        return part[np.lexsort((part[:, 1], part[:, 0]))]

    return DataSplit(*(_sorted(p) for p in parts), seed=int(seed), ratios=ratios)


def assemble(table_or_graph, kg: KnowledgeGraph, item_entity: Optional[np.ndarray] = None,
             name: str = "") -> Dataset:
    """Put items and KG entities into one node space.

    ``item_entity[i]`` is the KG entity of dense item ``i``; by default the
    original item id is taken as its entity id.  Aligned entities are renumbered
    to their item index and the others follow from ``N`` in increasing id order.
    """
    graph = table_or_graph
    n_items = graph.n_items
    if item_entity is None:
        item_entity = np.arange(n_items)
    item_entity = np.asarray(item_entity, dtype=np.int64)
    n_old = max(kg.n_entities, int(item_entity.max()) + 1 if n_items else 0)
    new_id = np.full(n_old, -1, np.int64)
    new_id[item_entity] = np.arange(n_items)
    rest = np.flatnonzero(new_id < 0)
    new_id[rest] = n_items + np.arange(len(rest))
    triples = kg.triples.copy()
    if len(triples):
        triples[:, 0] = new_id[triples[:, 0]]
        triples[:, 2] = new_id[triples[:, 2]]
    node_kg = KnowledgeGraph(
        n_old, kg.n_relations, triples, np.arange(n_items), kg.n_duplicates_dropped
    )
    return Dataset(graph, node_kg, name)


def load_dataset(data_dir, name: str = "") -> Dataset:
    """Load a canonical ``ratings_final.txt`` + ``kg_final.txt`` directory."""
    data_dir = Path(data_dir)
    missing = [f for f in (RATINGS_FILE, KG_FILE) if not (data_dir / f).is_file()]
    if missing:
        raise FileNotFoundError(
            f"{data_dir}: expected files {', '.join(missing)} not found"
        )
    table = load_interactions(data_dir / RATINGS_FILE)
    kg = load_kg(data_dir / KG_FILE)
    labels = table.ratings
    if np.all((labels == 0) | (labels == 1)) and (labels == 0).any():
        rec = np.column_stack([table.users, table.items, labels.astype(np.int64)])
        graph = InteractionGraph.from_labeled(rec, table.n_users, table.n_items)
    else:
        graph = implicitize(table, None, make_rng(0))
    return assemble(graph, kg, item_entity=table.item_ids, name=name or data_dir.name)


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# raw dataset conversion -------------------------------------------------


def read_raw_ratings(kind: str, path) -> list[tuple[str, str, float]]:
    """Read a raw rating file as ``(user, item, rating)`` string-id records.

    ``music``: tab-separated ``userID artistID weight`` with a header line.
    ``movie``: ``user::item::rating::timestamp``.
    ``book``: ``;``-separated quoted CSV with a header line.
    """
    path = Path(path)
    out = []
    if kind == "book":
        with path.open(encoding="latin-1", newline="") as fh:
            reader = csv.reader(fh, delimiter=";", quotechar='"')
            next(reader, None)
            for line_no, parts in enumerate(reader, start=2):
                if len(parts) < 3:
                    raise ParseError(path, line_no, ";".join(parts))
                try:
                    out.append((parts[0], parts[1], float(parts[2])))
                except ValueError:
                    raise ParseError(path, line_no, ";".join(parts)) from None
        return out
    sep = {"movie": "::", "music": "\t"}.get(kind)
    if sep is None:
        raise ValueError(f"unknown dataset kind {kind!r}")
    with path.open(encoding="latin-1") as fh:
        for line_no, line in enumerate(fh, start=1):
            if kind == "music" and line_no == 1:
                continue
            parts = line.strip().split(sep)
            if parts == [""]:
                continue
            try:
                out.append((parts[0], parts[1], float(parts[2])))
            except (IndexError, ValueError):
                raise ParseError(path, line_no, line.rstrip("\n")) from None
    return out


def _read_pairs(path) -> list[list[str]]:
    with Path(path).open(encoding="utf-8") as fh:
        return [line.strip().split("\t") for line in fh if line.strip()]


@dataclass
class PreprocessResult:
    graph: InteractionGraph
    kg: KnowledgeGraph
    user_ids: list
    item_ids: list
    entity_ids: list
    relation_ids: list
    n_kg_lines: int


def preprocess_raw(
    kind: str, ratings_path, item_map_path, kg_path, seed: int = 0,
    threshold: Optional[float] = "default",
) -> PreprocessResult:
    """Convert raw ratings plus a KG sub-graph into canonical integer data.

    ``item_map_path`` lists ``raw_item<TAB>entity`` pairs; only listed items are
    kept and they become items ``0..N-1`` in file order.  Users are numbered in
    order of first appearance; KG entities and relations beyond the items are
    numbered in order of first appearance in ``kg_path``.
    """
    if threshold == "default":
        threshold = THRESHOLDS[kind]
    item_index, entity_index = {}, {}
    for raw_item, entity in _read_pairs(item_map_path):
        if raw_item in item_index:
            continue
        item_index[raw_item] = len(item_index)
        entity_index.setdefault(entity, item_index[raw_item])
    records = read_raw_ratings(kind, ratings_path)
    user_index: dict = {}
    users, items, ratings = [], [], []
    for u, i, r in records:
        if i not in item_index:
            continue
        users.append(user_index.setdefault(u, len(user_index)))
        items.append(item_index[i])
        ratings.append(r)
    table = RatingTable(
        np.array(users, np.int64), np.array(items, np.int64), np.array(ratings),
        np.arange(len(user_index)), np.arange(len(item_index)),
    )
    graph = implicitize(table, threshold, make_rng(seed))
    relation_index: dict = {}
    triples = []
    n_lines = 0
    for parts in _read_pairs(kg_path):
        if len(parts) < 3:
            continue
        n_lines += 1
        h = entity_index.setdefault(parts[0], len(entity_index))
        r = relation_index.setdefault(parts[1], len(relation_index))
        t = entity_index.setdefault(parts[2], len(entity_index))
        triples.append((h, r, t))
    arr = np.array(triples, np.int64).reshape(-1, 3)
    kg = KnowledgeGraph(len(entity_index), len(relation_index), arr, np.arange(len(item_index)))
    inv = lambda d: [k for k, _ in sorted(d.items(), key=lambda kv: kv[1])]
    return PreprocessResult(graph, kg, inv(user_index), inv(item_index),
                            inv(entity_index), inv(relation_index), n_lines)


def write_canonical(result: PreprocessResult, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    g = result.graph
    rec = np.concatenate([
        np.column_stack([g.positives, np.ones(len(g.positives), np.int64)]),
        np.column_stack([g.negatives, np.zeros(len(g.negatives), np.int64)]),
    ]).reshape(-1, 3)
    rec = rec[np.lexsort((-rec[:, 2], rec[:, 0]))]
    (out / RATINGS_FILE).write_text(_records_text(rec))
    (out / KG_FILE).write_text("".join(f"{h} {r} {t}\n" for h, r, t in result.kg.triples.tolist()))
    for name, ids in (("user", result.user_ids), ("item", result.item_ids),
                      ("entity", result.entity_ids), ("relation", result.relation_ids)):
        (out / f"{name}_remap.txt").write_text(
            "".join(f"{k}\t{raw}\n" for k, raw in enumerate(ids))
        )


def write_ratings_file(path, records: Iterable[Sequence]) -> None:
    Path(path).write_text("".join(" ".join(str(x) for x in r) + "\n" for r in records))


def save_dataset(dataset: Dataset, out_dir) -> None:
    """Write ``dataset`` as canonical ``ratings_final.txt`` / ``kg_final.txt``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rec = dataset.graph.labeled()
    rec = rec[np.lexsort((-rec[:, 2], rec[:, 0]))]
    (out / RATINGS_FILE).write_text(_records_text(rec))
    (out / KG_FILE).write_text(
        "".join(f"{h} {r} {t}\n" for h, r, t in dataset.kg.triples.tolist())
    )
