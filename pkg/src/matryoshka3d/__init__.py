"""Text embedders whose depth, output width and embedding rank can all be
truncated after training."""

__version__ = "0.1.0"

from .data import Sample, load_jsonl, mine_hard_negatives
from .deploy import load_model, save_model, to_compatibility, to_efficiency, truncate_dims
from .errors import (
    ConfigurationError,
    DataError,
    DimensionError,
    FormatError,
    Matryoshka3DError,
    NumericalError,
    ParameterError,
    UsageError,
)
from .estimator import MatryoshkaEmbedder
from .evaluation import EvalReport, SynthTaskSpec, generate_synthetic_task, ndcg_at_k, run_sweep, spearman
from .linalg import truncated_svd
from .model import ModelConfig, ModelWeights, embed, forward_taps, init_model
from .objective import LossConfig, info_nce, total_3dml_loss
from .training import TrainConfig, train

__all__ = [
    "ConfigurationError",
    "DataError",
    "DimensionError",
    "EvalReport",
    "FormatError",
    "LossConfig",
    "Matryoshka3DError",
    "MatryoshkaEmbedder",
    "ModelConfig",
    "ModelWeights",
    "NumericalError",
    "ParameterError",
    "Sample",
    "SynthTaskSpec",
    "TrainConfig",
    "UsageError",
    "embed",
    "forward_taps",
    "generate_synthetic_task",
    "info_nce",
    "init_model",
    "load_jsonl",
    "load_model",
    "mine_hard_negatives",
    "ndcg_at_k",
    "run_sweep",
    "save_model",
    "spearman",
    "to_compatibility",
    "to_efficiency",
    "total_3dml_loss",
    "train",
    "truncate_dims",
    "truncated_svd",
]
