"""Multi-level cross-view contrastive learning for knowledge-aware recommendation."""

__version__ = "0.1.0"

from .config import ModelConfig, load_config, save_config
from .errors import MCCLKError
from .graph import SparseAdjacency, build_csr, make_rng, sym_degree_normalize
from .ingest import (
    DataSplit,
    Dataset,
    InteractionGraph,
    KnowledgeGraph,
    implicitize,
    load_dataset,
    load_interactions,
    load_kg,
    split,
)
from .metrics import auc, f1, recall_at_k, svd_project_2d
from .model import MCCLK, grad_check, toy_model
from .train import load_checkpoint, save_checkpoint, train

__all__ = [
    "ModelConfig", "load_config", "save_config", "MCCLKError", "SparseAdjacency",
    "build_csr", "make_rng", "sym_degree_normalize", "DataSplit", "Dataset",
    "InteractionGraph", "KnowledgeGraph", "implicitize", "load_dataset",
    "load_interactions", "load_kg", "split", "auc", "f1", "recall_at_k",
    "svd_project_2d", "MCCLK", "grad_check", "toy_model", "load_checkpoint",
    "save_checkpoint", "train",
]
