"""Volumetric autoregressive generative modeling with uncertainty maps.

Causal three-stack masked 3D convolutions with gated activations model a
volume's density voxel by voxel; channel dropout kept on at inference
yields per-voxel uncertainty, and thresholding those maps segments
anomalies without labels.
"""

from . import bayes, model, stacks, tensor, train, volume_io
from .errors import (
    ConfigError,
    DataError,
    NumericError,
    ShapeError,
    UsageError,
    VoxarError,
)
from .model import ModelConfig, ModelParams, load_checkpoint, model_forward, nll, sample, save_checkpoint
from .stacks import MaskVariant, StackKind, causal_past, paper_wiring, receptive_field, verify_causality
from .train import Adam, TrainConfig, evaluate_ll, split_dataset, train as fit
from .volume_io import SynthConfig, read_volume, synth_dataset, write_volume

__version__ = "0.1.0"
