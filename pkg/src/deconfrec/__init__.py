"""Confounder-aware implicit-feedback recommendation with variational confounder inference."""
from .dataio import InteractionDataset, read_dataset, write_dataset
from .errors import (CheckpointError, ConfigError, DataError, DeconfrecError, DivergenceError,
                     EmptyKCoreError, NumericalError)
from .mcdcf import ModelConfig, train
from .synth import SynthConfig, generate

__version__ = "0.1.0"

__all__ = [
    "CheckpointError", "ConfigError", "DataError", "DeconfrecError", "DivergenceError", "EmptyKCoreError",
    "InteractionDataset", "ModelConfig", "NumericalError", "SynthConfig", "generate", "read_dataset",
    "train", "write_dataset",
]
