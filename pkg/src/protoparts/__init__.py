"""Prototypical-parts image classification with intra/inter-class
nearest-neighbor regularization, perturbation-based part descriptors, and a
latent-space evaluation harness."""

from .config import (AugmentationPolicy, DataConfig, ICNNConfig, LossWeights,
                     ModelConfig, RunConfig, SimilarityConfig, TrainingConfig,
                     load_run_config, run_config_from_dict)
from .errors import (ConfigurationError, DimensionError, DomainError,
                     NumericalError, ProjectionError, ProtoPartsError,
                     ValidationError)
from .icnn import ICNNBreakdown, icnn_loss, icnn_score
from .losses import composite_loss
from .model import (ProtoPartsModel, classify, extract_features,
                    load_checkpoint, save_checkpoint)
from .similarity import similarity_maps, similarity_score
from .training import TrainingData, TrainingResult, run_training

__version__ = "0.1.0"

__all__ = [
    "AugmentationPolicy", "ConfigurationError", "DataConfig",
    "DimensionError", "DomainError", "ICNNBreakdown", "ICNNConfig",
    "LossWeights", "ModelConfig", "NumericalError", "ProjectionError",
    "ProtoPartsError", "ProtoPartsModel", "RunConfig", "SimilarityConfig",
    "TrainingConfig", "TrainingData", "TrainingResult", "ValidationError",
    "classify", "composite_loss", "extract_features", "icnn_loss",
    "icnn_score", "load_checkpoint", "load_run_config", "run_config_from_dict",
    "run_training", "save_checkpoint", "similarity_maps", "similarity_score",
    "__version__",
]
