"""Model configuration and its flat ``key = value`` text format."""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

# Per-dataset propagation depths; everything else is shared.
DATASET_PRESETS = {
    "music": dict(collab_depth=3, kg_depth=2, semantic_depth=2, struct_depth=2),
    "book": dict(collab_depth=2, kg_depth=2, semantic_depth=1, struct_depth=2),
    "movie": dict(collab_depth=2, kg_depth=2, semantic_depth=1, struct_depth=2),
}

ABLATIONS = ("full", "no-local", "no-global")
REBUILD_CHOICES = ("epoch", "start")  # or "steps:<T>"


@dataclass
class ModelConfig:
    """Every hyperparameter of a run.

    Depth names: ``collab_depth`` (K), ``kg_depth`` (K'), ``semantic_depth``
    (L), ``struct_depth`` (L').  ``contrast_weight`` is the overall contrastive
    weight and ``alpha`` the local share of it.
    """

    dim: int = 64
    alpha: float = 0.2
    contrast_weight: float = 0.1
    l2: float = 1e-5
    tau: float = 0.8
    knn_k: int = 10
    collab_depth: int = 3
    kg_depth: int = 2
    semantic_depth: int = 2
    struct_depth: int = 2
    lr: float = 1e-3
    batch_size: int = 2048
    epochs: int = 100
    patience: int = 10
    seed: int = 2022
    split_seed: int = 2022
    split_ratios: tuple = (0.6, 0.2, 0.2)
    negative_scope: str = "in-batch"
    semantic_rebuild: str = "epoch"
    similarity_block: int = 1024
    ablation: str = "full"
    dataset: str = "music"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        for name in ("contrast_weight", "tau", "lr"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.l2 < 0:
            raise ValueError("l2 must be nonnegative")
        for name in ("collab_depth", "kg_depth", "semantic_depth", "struct_depth"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.dim < 1 or self.knn_k < 1 or self.batch_size < 1:
            raise ValueError("dim, knn_k and batch_size must be >= 1")
        if self.negative_scope not in ("in-batch", "full-graph"):
            raise ValueError(f"unknown negative_scope {self.negative_scope!r}")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}")
        rb = self.semantic_rebuild
        if rb not in REBUILD_CHOICES and not (rb.startswith("steps:") and rb[6:].isdigit()):
            raise ValueError(f"unknown semantic_rebuild {rb!r}")

    @classmethod
    def for_dataset(cls, dataset: str, **overrides) -> "ModelConfig":
        values = dict(DATASET_PRESETS.get(dataset, {}), dataset=dataset)
        values.update(overrides)
        return cls(**values)

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = " ".join(repr(float(x)) for x in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    @classmethod
    def from_mapping(cls, mapping: dict) -> "ModelConfig":
        known = {f.name: f for f in fields(cls)}
        base = mapping.get("dataset", cls.dataset)
        values = dict(DATASET_PRESETS.get(base, {}))
        for key, raw in mapping.items():
            key = key.strip()
            if key not in known:
                raise KeyError(f"unknown config key {key!r}")
            values[key] = _coerce(known[key], raw)
        return cls(**values)


def _coerce(f, raw):
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    if f.name == "split_ratios":
        return tuple(float(x) for x in raw.replace(",", " ").split())
    kind = type(f.default) if f.default is not dataclasses.MISSING else str
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    return raw


def load_config(path) -> ModelConfig:
    """Read a flat ``key = value`` file (``#`` comments allowed)."""
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"))
    parser.optionxform = str
    parser.read_string("[run]\n" + Path(path).read_text())
    return ModelConfig.from_mapping(dict(parser["run"]))


def save_config(cfg: ModelConfig, path) -> None:
    Path(path).write_text(cfg.to_text())
