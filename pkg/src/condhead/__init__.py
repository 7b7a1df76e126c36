"""Semantic-embedding-conditioned box and mask heads with a synthetic open-vocabulary benchmark."""

from .errors import (
    CondHeadError,
    ConfigurationError,
    ContractViolation,
    DimensionError,
    DomainError,
    GenerationError,
    MatchError,
    ParseError,
    TrainingError,
)
from .heads import CondHeadConfig, anneal_tau, flop_count, paper_default_config
from .models import CondHeadModel, ClassAgnosticModel, ClassWiseModel, load_checkpoint, save_checkpoint
from .synthbench import BenchmarkSpec, gen_dataset, load_dataset, save_dataset
from .train import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "BenchmarkSpec", "ClassAgnosticModel", "ClassWiseModel", "CondHeadConfig", "CondHeadError",
    "CondHeadModel", "ConfigurationError", "ContractViolation", "DimensionError", "DomainError",
    "GenerationError", "MatchError", "ParseError", "TrainConfig", "TrainingError", "anneal_tau",
    "flop_count", "gen_dataset", "load_checkpoint", "load_dataset", "paper_default_config",
    "save_checkpoint", "save_dataset", "train",
]
