# -*- coding: utf-8 -*-

"""Semantic-aware attentive embeddings for visual localization under changing conditions."""

from .attention import AttentionMaps, AttentionModule
from .config import RunConfig, SyntheticConfig, load_config
from .evaluation import PRCurve, RetrievalResult, evaluate, pr_curve, retrieve
from .formats import FeatureRecord, read_features, write_features
from .fusion import FusionModule
from .head import Embedding, embed, normalize_scale, spp
from .network import SAANE, VARIANTS
from .synthetic import generate_synthetic
from .tensor import Parameter, Tape, Tensor
from .trainer import train, triplet_loss

__all__ = [
    # Tensor core
    "Tensor",
    "Parameter",
    "Tape",
    # Modules
    "FusionModule",
    "AttentionModule",
    "AttentionMaps",
    "SAANE",
    "VARIANTS",
    # Embeddings
    "Embedding",
    "spp",
    "normalize_scale",
    "embed",
    # Training
    "triplet_loss",
    "train",
    # Evaluation
    "RetrievalResult",
    "PRCurve",
    "retrieve",
    "pr_curve",
    "evaluate",
    # Data
    "FeatureRecord",
    "read_features",
    "write_features",
    "generate_synthetic",
    "RunConfig",
    "SyntheticConfig",
    "load_config",
]
