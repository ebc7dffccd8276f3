"""Encoder-combiner-decoder multi-task models."""

from .config import ConfigError, FeatureSpec, ModelConfig, parse_config, validate_config
from .decoders import PathHypothesis, TreePathDecoder
from .features import FeatureProcessor, Vocabulary
from .model import EcdModel, build_model, export_embeddings, total_loss, write_embedding_table
from .trainer import evaluate_model, train

__all__ = [
    "ConfigError", "EcdModel", "FeatureProcessor", "FeatureSpec", "ModelConfig", "PathHypothesis",
    "TreePathDecoder", "Vocabulary", "build_model", "evaluate_model", "export_embeddings",
    "parse_config", "total_loss", "train", "validate_config", "write_embedding_table",
]
