"""Training loop, negative sampling, checkpoints and the per-epoch metrics log."""

from __future__ import annotations

import json
import logging
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from .config import ModelConfig
from .errors import CheckpointMismatch, DiskWriteError
from .graph import make_rng
from .ingest import DataSplit, Dataset
from .metrics import auc, f1
from .model import MCCLK, PARAM_NAMES
from .objective import Adam

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"MCCLKCKP"
CHECKPOINT_VERSION = 1
CHECKPOINT_FILE = "checkpoint.bin"
METRICS_FILE = "metrics.jsonl"
LOG_FIELDS = ("epoch", "l_bpr", "l_local", "l_global", "l_total", "eval_auc", "eval_f1", "wall_time")


# negative sampling -------------------------------------------------------

def sample_negatives(users: np.ndarray, positive_keys: np.ndarray, n_items: int,
                     rng: np.random.Generator, max_rounds: int = 100) -> np.ndarray:
    """One uniformly drawn unobserved item per entry of ``users``.

    ``positive_keys`` is the sorted array of ``user * n_items + item`` codes of
    observed pairs.  Rejection sampling; users who have interacted with every
    item get a random item after ``max_rounds`` (never happens in practice).
    """
    users = np.asarray(users, np.int64)
    neg = rng.integers(0, n_items, size=len(users))
    todo = np.arange(len(users))
    for _ in range(max_rounds):
        codes = users[todo] * n_items + neg[todo]
        pos = np.searchsorted(positive_keys, codes)
        pos = np.minimum(pos, max(len(positive_keys) - 1, 0))
        clash = positive_keys[pos] == codes if len(positive_keys) else np.zeros(len(todo), bool)
        todo = todo[clash]
        if not len(todo):
            break
        neg[todo] = rng.integers(0, n_items, size=len(todo))
    return neg


def pair_keys(pairs: np.ndarray, n_items: int) -> np.ndarray:
    pairs = np.asarray(pairs, np.int64).reshape(-1, 2)
    return np.unique(pairs[:, 0] * n_items + pairs[:, 1])


# checkpoints -------------------------------------------------------------

def checkpoint_header(params: dict, cfg: ModelConfig, n_entities: int) -> dict:
    return {
        "format_version": CHECKPOINT_VERSION,
        "dim": int(params["user"].shape[1]),
        "n_users": int(params["user"].shape[0]),
        "n_items": int(params["item"].shape[0]),
        "n_entities": int(n_entities),
        "n_relations": int(params["relation"].shape[0]),
        "config_hash": cfg.digest(),
        "config": cfg.to_text(),
        "tables": [[name, list(params[name].shape)] for name in PARAM_NAMES],
    }


def save_checkpoint(path, params: dict, cfg: ModelConfig, n_entities: int) -> None:
    """Magic, header length, JSON header, then each table as little-endian f8."""
    header = json.dumps(checkpoint_header(params, cfg, n_entities), sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<I", len(header)))
            fh.write(header)
            for name in PARAM_NAMES:
                fh.write(np.ascontiguousarray(params[name], dtype="<f8").tobytes())
        tmp.replace(path)
    except OSError as exc:
        raise DiskWriteError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path) -> tuple[dict, dict]:
    """Return ``(header, params)``."""
    blob = Path(path).read_bytes()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise CheckpointMismatch(f"{path} is not a checkpoint file")
    (n,) = struct.unpack("<I", blob[8:12])
    header = json.loads(blob[12:12 + n])
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointMismatch(f"unsupported checkpoint version {header.get('format_version')}")
    offset = 12 + n
    params = {}
    for name, shape in header["tables"]:
        count = int(np.prod(shape))
        params[name] = np.frombuffer(blob, "<f8", count, offset).reshape(shape).astype(np.float64)
        offset += 8 * count
    if offset != len(blob):
        raise CheckpointMismatch(f"{path}: {len(blob) - offset} trailing bytes")
    return header, params


def check_compatible(header: dict, dataset: Dataset) -> None:
    ours = (header["n_users"], header["n_items"], header["n_entities"], header["n_relations"])
    theirs = (dataset.n_users, dataset.n_items, max(dataset.n_entities, dataset.n_items),
              max(dataset.n_relations, 1))
    if ours != theirs:
        raise CheckpointMismatch(
            f"checkpoint (users, items, entities, relations) = {ours} but dataset has {theirs}"
        )


# training ----------------------------------------------------------------

@dataclass
class TrainResult:
    model: MCCLK
    best_params: dict
    best_epoch: int
    history: list = field(default_factory=list)
    stopped_early: bool = False


def ctr_scores(model: MCCLK, records: np.ndarray, params: Optional[dict] = None):
    rec = np.asarray(records, np.int64).reshape(-1, 3)
    return rec[:, 2], model.predict(rec[:, 0], rec[:, 1], params)


def evaluate_ctr(model: MCCLK, records, params=None) -> tuple[float, float]:
    labels, scores = ctr_scores(model, records, params)
    if len(labels) == 0 or labels.min() == labels.max():
        return float("nan"), float("nan")
    return auc(labels, scores), f1(labels, scores)


def _rebuild_every(cfg: ModelConfig) -> Optional[int]:
    if cfg.semantic_rebuild.startswith("steps:"):
        return max(int(cfg.semantic_rebuild[6:]), 1)
    return None


def train(cfg: ModelConfig, split: DataSplit, dataset: Dataset, out_dir=None,
          echo=None) -> TrainResult:
    """Optimize the full objective; keep the parameters with the best eval AUC.

    Writes ``checkpoint.bin`` (best epoch) and ``metrics.jsonl`` into
    ``out_dir`` when given.  Epoch 0 records the initialization.
    """
    rng = make_rng(cfg.seed)
    model = MCCLK(cfg, dataset, split.train, rng=rng)
    n_items = dataset.n_items
    pos = model.train_pos
    keys = pair_keys(pos, n_items)
    opt = Adam(cfg.lr)
    every = _rebuild_every(cfg)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / METRICS_FILE).write_text("")
    n_total = max(dataset.n_entities, n_items)

    def batches(epoch_rng):
        order = epoch_rng.permutation(len(pos))
        negs = sample_negatives(pos[order, 0], keys, n_items, epoch_rng)
        for lo in range(0, len(order), cfg.batch_size):
            sl = slice(lo, lo + cfg.batch_size)
            yield pos[order[sl], 0], pos[order[sl], 1], negs[sl]

    def record(epoch, sums, n_batches, t0):
        eval_auc, eval_f1 = evaluate_ctr(model, split.eval)
        row = {"epoch": epoch}
        for k in LOG_FIELDS[1:5]:
            row[k] = sums.get(k, 0.0) / max(n_batches, 1)
        row.update(eval_auc=eval_auc, eval_f1=eval_f1, wall_time=time.perf_counter() - t0)
        history.append(row)
        if out is not None:
            try:
                with open(out / METRICS_FILE, "a") as fh:
                    fh.write(json.dumps(row) + "\n")
            except OSError as exc:
                raise DiskWriteError(f"cannot append metrics: {exc}") from exc
        if echo:
            echo(" ".join(f"{k}={row[k]:.6g}" if k != "epoch" else f"epoch={epoch}" for k in LOG_FIELDS))
        return row

    history: list = []
    t0 = time.perf_counter()
    model.rebuild_semantic(0)
    # epoch 0: objective at initialization over one pass of batches, no updates
    sums, nb = {}, 0
    reps0 = model.forward(model.params)
    for u, i, j in batches(make_rng(cfg.seed + 1)):
        for k, v in model.batch_losses(model.params, u, i, j, reps=reps0).values().items():
            sums[k] = sums.get(k, 0.0) + v
        nb += 1
    row = record(0, sums, nb, t0)
    best_auc, best_epoch = row["eval_auc"], 0
    best_params = {k: v.copy() for k, v in model.params.items()}
    if out is not None:
        save_checkpoint(out / CHECKPOINT_FILE, best_params, cfg, n_total)
    stale, step, stopped = 0, 0, False

    for epoch in range(1, cfg.epochs + 1):
        if cfg.semantic_rebuild == "epoch" and epoch > 1:
            model.rebuild_semantic(epoch)
        sums, nb = {}, 0
        for u, i, j in batches(rng):
            if every is not None and step > 0 and step % every == 0:
                model.rebuild_semantic(epoch)
            leaves = {k: ad.Var(v, requires_grad=True, name=k) for k, v in model.params.items()}
            losses = model.batch_losses(leaves, u, i, j)
            ad.backward(losses.total)
            opt.step(model.params, {k: leaves[k].grad for k in leaves})
            for k, v in losses.values().items():
                sums[k] = sums.get(k, 0.0) + v
            nb += 1
            step += 1
        row = record(epoch, sums, nb, t0)
        score = row["eval_auc"]
        if np.isnan(best_auc) or score > best_auc:
            best_auc, best_epoch, stale = score, epoch, 0
            best_params = {k: v.copy() for k, v in model.params.items()}
            if out is not None:
                save_checkpoint(out / CHECKPOINT_FILE, best_params, cfg, n_total)
        else:
            stale += 1
            if stale >= cfg.patience:
                stopped = True
                log.info("early stop at epoch %d (best %d)", epoch, best_epoch)
                break
    return TrainResult(model, best_params, best_epoch, history, stopped)


def read_metrics(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
