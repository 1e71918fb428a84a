"""Graph-based sequential recommendation: interest graphs, graph pooling and AUGRU evolution."""
from .config import ConfigError, RunConfig
from .data import DataError, DatasetSplit, InstanceSet, generate_synthetic
from .model import ModelConfig, Surge, gru4rec_config

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DataError", "DatasetSplit", "InstanceSet", "ModelConfig",
    "RunConfig", "Surge", "generate_synthetic", "gru4rec_config",
]
