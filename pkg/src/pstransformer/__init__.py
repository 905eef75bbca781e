"""Sparse calibrated photometric stereo with dual-branch self-attention
feature aggregation: the network, the autodiff engine underneath it,
synthetic data generation, the classical least-squares oracle, and the
training/evaluation machinery."""

from .classic import LightMatrix, solve_map, woodham_solve
from .diffarray import BatchNorm2dState, DiffArray, Tape, backward, grad_check
from .model import (
    ForwardOutput,
    ModelConfig,
    ModelParams,
    build_pixel_inputs,
    extract_feature_map,
    forward,
    forward_many,
    load_checkpoint,
    normalize_normals,
    save_checkpoint,
)
from .objective import LossBreakdown, masked_mse, mean_angular_error, ps_transformer_loss
from .samples import LightSet, NormalMap, PhotoSample
from .synthdata import (
    DatasetManifest,
    SceneSpec,
    export_normal_png,
    extract_patches,
    read_manifest,
    read_sample,
    render_sample,
    sample_lights,
    write_manifest,
    write_sample,
)
from .trainer import TrainConfig, TrainLog, adam_step, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "BatchNorm2dState",
    "DatasetManifest",
    "DiffArray",
    "ForwardOutput",
    "LightMatrix",
    "LightSet",
    "LossBreakdown",
    "ModelConfig",
    "ModelParams",
    "NormalMap",
    "PhotoSample",
    "SceneSpec",
    "Tape",
    "TrainConfig",
    "TrainLog",
    "adam_step",
    "backward",
    "build_pixel_inputs",
    "evaluate",
    "export_normal_png",
    "extract_feature_map",
    "extract_patches",
    "forward",
    "forward_many",
    "grad_check",
    "load_checkpoint",
    "masked_mse",
    "mean_angular_error",
    "normalize_normals",
    "ps_transformer_loss",
    "read_manifest",
    "read_sample",
    "render_sample",
    "sample_lights",
    "save_checkpoint",
    "solve_map",
    "train",
    "woodham_solve",
    "write_manifest",
    "write_sample",
]
