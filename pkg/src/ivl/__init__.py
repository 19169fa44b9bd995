"""Inductive visual localisation: recurrent decoders whose only carried state
is an explicit spatial memory map, trained on one-step inductive updates."""

from .tensor import Tensor, ShapeError, no_grad
from .gradcheck import grad_check, GradCheckReport, NonDeterministicError
from .layers import ConfigError, ENCODER_PRESETS, build_encoder, parse_layer_spec
from .memory import BlockLabel, CountLabel, SpatialMemory, update_memory
from .models import MODEL_KINDS, build_model, load_checkpoint, save_checkpoint
from .train import AdaDelta, inductive_loss, train_e2e, train_inductive
from .evaluate import (edit_distance, edit_distance_normalised, evaluate_model,
                       infer_block, infer_count)
from .config import ExperimentConfig, TrainConfig, load_config, save_config

__version__ = "0.1.0"

__all__ = [
    "Tensor", "ShapeError", "no_grad",
    "grad_check", "GradCheckReport", "NonDeterministicError",
    "ConfigError", "ENCODER_PRESETS", "build_encoder", "parse_layer_spec",
    "BlockLabel", "CountLabel", "SpatialMemory", "update_memory",
    "MODEL_KINDS", "build_model", "load_checkpoint", "save_checkpoint",
    "AdaDelta", "inductive_loss", "train_e2e", "train_inductive",
    "edit_distance", "edit_distance_normalised", "evaluate_model",
    "infer_block", "infer_count",
    "ExperimentConfig", "TrainConfig", "load_config", "save_config",
    "__version__",
]
