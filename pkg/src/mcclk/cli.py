"""Command line: preprocess, train, evaluate, gradcheck, export-viz, sweep.

Every command writes ``run_manifest.json`` into its output directory and
exits nonzero on any error.  ``MCCLK_DATA`` names the default data root.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import os
import subprocess
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .config import ABLATIONS, ModelConfig, load_config
from .errors import MCCLKError
from .ingest import (
    KG_FILE,
    RATINGS_FILE,
    file_digest,
    load_dataset,
    preprocess_raw,
    split,
    write_canonical,
)
from .metrics import ctr_result, recall_at_k, svd_project_2d, write_projection
from .model import MCCLK, grad_check, toy_model
from .train import CHECKPOINT_FILE, check_compatible, load_checkpoint, train

log = logging.getLogger("mcclk")

DATA_ENV = "MCCLK_DATA"
MANIFEST_FILE = "run_manifest.json"

# sweepable names -> config keys
SWEEP_KEYS = {
    "alpha": "alpha",
    "beta": "contrast_weight",
    "tau": "tau",
    "k": "knn_k",
    "K": "collab_depth",
    "K'": "kg_depth",
    "K′": "kg_depth",
    "L": "semantic_depth",
    "L'": "struct_depth",
    "L′": "struct_depth",
    "lr": "lr",
}


class UsageError(MCCLKError):
    pass


# run manifest -----------------------------------------------------------

def engine_version() -> str:
    here = Path(__file__).resolve().parent
    try:
        rev = subprocess.run(["git", "describe", "--always", "--dirty"], cwd=here,
                             capture_output=True, text=True, timeout=5)
        if rev.returncode == 0 and rev.stdout.strip():
            return f"{__version__}+{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


class RunManifest:
    """Collects what is needed to rerun a command; written once, atomically."""

    def __init__(self, command: str, argv: list):
        self.data = {
            "command": command,
            "argv": list(argv),
            "engine_version": engine_version(),
            "started": _now(),
            "config": None,
            "dataset_hashes": {},
            "split_seed": None,
            "finished": None,
            "outcome": None,
        }

    def record_config(self, cfg: ModelConfig) -> None:
        self.data["config"] = cfg.to_text()
        self.data["config_hash"] = cfg.digest()
        self.data["split_seed"] = cfg.split_seed

    def record_files(self, *paths) -> None:
        for p in paths:
            p = Path(p)
            if p.is_file():
                self.data["dataset_hashes"][str(p)] = file_digest(p)

    def write(self, out_dir, outcome: str) -> None:
        self.data["finished"] = _now()
        self.data["outcome"] = outcome
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        tmp = out / (MANIFEST_FILE + ".tmp")
        tmp.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n")
        tmp.replace(out / MANIFEST_FILE)


# helpers ----------------------------------------------------------------

def resolve_data(arg: Optional[str], default_name: str) -> Path:
    """``--data`` if given (absolute, relative, or under the data root), else
    ``$MCCLK_DATA/<default_name>``."""
    root = os.environ.get(DATA_ENV)
    if arg:
        p = Path(arg)
        if p.exists() or root is None or p.is_absolute():
            return p
        return Path(root) / arg
    if root is None:
        raise UsageError(f"no --data given and {DATA_ENV} is not set")
    return Path(root) / default_name


def parse_overrides(pairs) -> dict:
    out = {}
    for item in pairs or ():
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def build_config(args) -> ModelConfig:
    values = _parse_config_text(load_config(args.config).to_text()) if args.config else {}
    values.update(parse_overrides(getattr(args, "set", None)))
    if getattr(args, "seed", None) is not None:
        values["seed"] = args.seed
    if getattr(args, "ablation", None):
        values["ablation"] = args.ablation
    return ModelConfig.from_mapping(values)


def parse_list(text: str, kind=float) -> list:
    items = [t for t in text.replace(",", " ").split() if t]
    return [kind(t) for t in items]


def _limit_threads(n: Optional[int]):
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n) if n else threadpool_limits(limits=None)


def _checkpoint_path(p) -> Path:
    p = Path(p)
    return p / CHECKPOINT_FILE if p.is_dir() else p


def restore(checkpoint, data_dir) -> tuple:
    """Rebuild the model of a checkpoint on its dataset and split."""
    header, params = load_checkpoint(_checkpoint_path(checkpoint))
    cfg = ModelConfig.from_mapping(_parse_config_text(header["config"]))
    dataset = load_dataset(data_dir)
    check_compatible(header, dataset)
    shapes = {name: tuple(shape) for name, shape in header["tables"]}
    if shapes["user"][1] != cfg.dim:
        raise MCCLKError(f"checkpoint width {shapes['user'][1]} != config dim {cfg.dim}")
    parts = split(dataset.graph, cfg.split_ratios, cfg.split_seed)
    model = MCCLK(cfg, dataset, parts.train, params=params)
    model.rebuild_semantic()
    return model, header, parts, dataset


def _parse_config_text(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def topk_results(model: MCCLK, parts, k_list):
    zu, zi = model.final_embeddings()
    train = parts.train[parts.train[:, 2] == 1]
    test = parts.test[parts.test[:, 2] == 1]
    truth = {}
    for u, i in test[:, :2].tolist():
        truth.setdefault(u, []).append(i)
    seen = {}
    for u, i in train[:, :2].tolist():
        seen.setdefault(u, []).append(i)
    users = np.array(sorted(truth), np.int64)
    scores = np.zeros((model.n_users, model.n_items))
    scores[users] = zu[users] @ zi.T
    return recall_at_k(scores, truth, k_list, seen)


# commands ---------------------------------------------------------------

def cmd_preprocess(args, manifest: RunManifest) -> int:
    out = Path(args.out)
    seed = 2022 if args.seed is None else args.seed
    result = preprocess_raw(args.kind, args.ratings, args.item_map, args.kg, seed=seed)
    write_canonical(result, out)
    manifest.record_files(args.ratings, args.item_map, args.kg)
    cfg = ModelConfig.for_dataset(args.kind, split_seed=seed)
    # split what training will see: the canonical files as loaded back
    parts = split(load_dataset(out).graph, cfg.split_ratios, cfg.split_seed)
    parts.save(out)
    manifest.record_config(cfg)
    g, kg = result.graph, result.kg
    print(f"users {g.n_users}  items {g.n_items}  interactions {len(g.positives)}  "
          f"entities {kg.n_entities}  relations {kg.n_relations}  triples {len(kg.triples)}")
    return 0


def cmd_train(args, manifest: RunManifest) -> int:
    cfg = build_config(args)
    data_dir = resolve_data(args.data, cfg.dataset)
    dataset = load_dataset(data_dir)
    manifest.record_config(cfg)
    manifest.record_files(data_dir / RATINGS_FILE, data_dir / KG_FILE)
    print(cfg.to_text(), end="")
    parts = split(dataset.graph, cfg.split_ratios, cfg.split_seed)
    out = Path(args.out)
    (out).mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    result = train(cfg, parts, dataset, out, echo=print if args.verbose else None)
    scores = result.model.predict(parts.test[:, 0], parts.test[:, 1], result.best_params)
    res = ctr_result(parts.test[:, 2], scores)
    manifest.data["best_epoch"] = result.best_epoch
    manifest.data["test_auc"] = res.auc
    manifest.data["test_f1"] = res.f1
    print(f"best epoch {result.best_epoch}  test auc {res.auc:.4f}  test f1 {res.f1:.4f}")
    return 0


def cmd_evaluate(args, manifest: RunManifest) -> int:
    ckpt = _checkpoint_path(args.checkpoint)
    header, _ = load_checkpoint(ckpt)
    cfg = ModelConfig.from_mapping(_parse_config_text(header["config"]))
    data_dir = resolve_data(args.data, cfg.dataset)
    model, header, parts, _ = restore(ckpt, data_dir)
    manifest.record_config(cfg)
    manifest.record_files(ckpt, data_dir / RATINGS_FILE, data_dir / KG_FILE)
    digest = file_digest(ckpt)[:16]
    lines = [f"# checkpoint {ckpt} sha256:{digest}",
             "# f1 decision rule: score >= 0 (sigmoid >= 0.5)",
             "# metric split value"]
    if args.metrics in ("ctr", "all"):
        res = ctr_result(parts.test[:, 2], model.predict(parts.test[:, 0], parts.test[:, 1]))
        lines += [f"auc test {res.auc:.6f}", f"f1 test {res.f1:.6f}",
                  f"n_evaluated test {res.n_evaluated}"]
    if args.metrics in ("topk", "all"):
        ks = parse_list(args.k_list, int)
        if not ks:
            raise UsageError("--k-list is empty")
        for r in topk_results(model, parts, ks):
            lines.append(f"recall@{r.k} test {r.recall:.6f}")
    report = "\n".join(lines) + "\n"
    print(report, end="")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "evaluation.txt").write_text(report)
    return 0


def cmd_gradcheck(args, manifest: RunManifest) -> int:
    model, batch = toy_model(seed=args.seed if args.seed is not None else 7)
    manifest.record_config(model.cfg)
    report = grad_check(model, batch)
    print(report.table())
    print("PASS" if report.passed else "FAIL")
    manifest.data["max_rel_error"] = max(b.rel_error for b in report.blocks)
    return 0 if report.passed else 1


def cmd_export_viz(args, manifest: RunManifest) -> int:
    ckpt = _checkpoint_path(args.checkpoint)
    header, params = load_checkpoint(ckpt)
    manifest.record_files(ckpt)
    table = params["item"]
    if args.final:
        # propagated item representations; needs the dataset
        cfg = ModelConfig.from_mapping(_parse_config_text(header["config"]))
        model, *_ = restore(ckpt, resolve_data(args.data, cfg.dataset))
        table = model.final_embeddings()[1]
    coords, directions, sv = svd_project_2d(table)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_projection(out / "projection.txt", coords, sv)
    np.savetxt(out / "directions.txt", directions, fmt="%.17g")
    print(f"{len(coords)} rows, singular values " + " ".join(f"{s:.6g}" for s in sv))
    return 0


def cmd_sweep(args, manifest: RunManifest) -> int:
    if args.param not in SWEEP_KEYS:
        raise UsageError(f"cannot sweep {args.param!r}; choose from {sorted(set(SWEEP_KEYS))}")
    values = parse_list(args.values, str)
    if not values:
        raise UsageError("sweep needs at least one value")
    cfg0 = build_config(args)
    key = SWEEP_KEYS[args.param]
    data_dir = resolve_data(args.data, cfg0.dataset)
    dataset = load_dataset(data_dir)
    manifest.record_config(cfg0)
    manifest.record_files(data_dir / RATINGS_FILE, data_dir / KG_FILE)
    parts = split(dataset.graph, cfg0.split_ratios, cfg0.split_seed)
    rows = [f"{args.param:>10} {'best_epoch':>10} {'test_auc':>9} {'test_f1':>9}"]
    for v in values:
        cfg = ModelConfig.from_mapping({**_parse_config_text(cfg0.to_text()), key: v})
        res = train(cfg, parts, dataset, Path(args.out) / f"{key}={v}")
        scores = res.model.predict(parts.test[:, 0], parts.test[:, 1], res.best_params)
        ctr = ctr_result(parts.test[:, 2], scores)
        rows.append(f"{v:>10} {res.best_epoch:>10} {ctr.auc:9.4f} {ctr.f1:9.4f}")
    table = "\n".join(rows) + "\n"
    print(table, end="")
    Path(args.out).mkdir(parents=True, exist_ok=True)
    (Path(args.out) / "sweep.txt").write_text(table)
    return 0


COMMANDS = {
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "gradcheck": cmd_gradcheck,
    "export-viz": cmd_export_viz,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mcclk", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_default):
        sp.add_argument("--out", default=out_default, help="output directory")
        sp.add_argument("--threads", type=int, default=None,
                        help="BLAS worker threads (1 = bit-exact reruns)")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("-v", "--verbose", action="store_true")

    sp = sub.add_parser("preprocess", help="raw ratings + KG -> canonical files and split")
    common(sp, "runs/preprocess")
    sp.add_argument("--kind", choices=("music", "book", "movie"), required=True)
    sp.add_argument("--ratings", required=True)
    sp.add_argument("--item-map", required=True, help="raw item id <TAB> KG entity")
    sp.add_argument("--kg", required=True, help="raw head <TAB> relation <TAB> tail")

    sp = sub.add_parser("train", help="train and keep the best-eval checkpoint")
    common(sp, "runs/train")
    sp.add_argument("--config")
    sp.add_argument("--data")
    sp.add_argument("--ablation", choices=ABLATIONS)
    sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")

    sp = sub.add_parser("evaluate", help="CTR and/or top-K metrics of a checkpoint")
    common(sp, "runs/evaluate")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data")
    sp.add_argument("--metrics", choices=("ctr", "topk", "all"), default="all")
    sp.add_argument("--k-list", default="5,10,20,50,100")

    sp = sub.add_parser("gradcheck", help="finite-difference check on the built-in toy model")
    common(sp, "runs/gradcheck")

    sp = sub.add_parser("export-viz", help="2-D SVD projection of item embeddings")
    common(sp, "runs/export-viz")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data")
    sp.add_argument("--final", action="store_true",
                    help="project final item representations instead of the item table")

    sp = sub.add_parser("sweep", help="one training run per value of a hyperparameter")
    common(sp, "runs/sweep")
    sp.add_argument("--config")
    sp.add_argument("--data")
    sp.add_argument("--ablation", choices=ABLATIONS)
    sp.add_argument("--set", action="append", metavar="KEY=VALUE")
    sp.add_argument("--param", required=True)
    sp.add_argument("--values", required=True, help="comma or space separated")
    return p


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    manifest = RunManifest(args.command, argv)
    outcome, code = "ok", 0
    try:
        with _limit_threads(args.threads):
            code = COMMANDS[args.command](args, manifest)
        if code:
            outcome = f"failed (exit {code})"
    except UsageError as exc:
        print(f"mcclk {args.command}: usage error: {exc}", file=sys.stderr)
        outcome, code = f"usage error: {exc}", 2
    except (MCCLKError, OSError, ValueError, KeyError) as exc:
        print(f"mcclk {args.command}: error: {exc}", file=sys.stderr)
        outcome, code = f"error: {type(exc).__name__}: {exc}", 1
    try:
        manifest.write(args.out, outcome)
    except OSError as exc:
        print(f"mcclk: cannot write run manifest: {exc}", file=sys.stderr)
        code = code or 1
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
