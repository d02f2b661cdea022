"""Desk-scale text-to-image diffusion with space / time mixtures of experts,
edge supervision and route analysis, on a small numpy autodiff core."""

from .data import (FULL_BUCKETS, Scene, SceneConfig, allocate_batches, bucket_assign, desk_buckets,
                   gen_dataset, gen_scene)
from .diffusion import (NoiseSchedule, build_schedule, cfg_combine, ddim_step, ddpm_step,
                        denoise_loss, q_sample)
from .errors import (AllocationError, ConfigError, ContractError, DimensionError, FormatError,
                     GenerationError, PathdiffError)
from .model import Denoiser, ModelConfig, assemble_model
from .routes import RouteTrace, trace_routes, train_route_classifier
from .tensor import Tensor, backward, grad_check
from .text import DEFAULT_VOCAB, Vocabulary, clean_text
from .train import (SamplerConfig, TrainConfig, load_checkpoint, sample, save_checkpoint, train,
                    train_step)

__version__ = "0.1.0"

__all__ = [
    "FULL_BUCKETS", "Scene", "SceneConfig", "allocate_batches", "bucket_assign", "desk_buckets",
    "gen_dataset", "gen_scene", "NoiseSchedule", "build_schedule", "cfg_combine", "ddim_step",
    "ddpm_step", "denoise_loss", "q_sample", "AllocationError", "ConfigError", "ContractError",
    "DimensionError", "FormatError", "GenerationError", "PathdiffError", "Denoiser", "ModelConfig",
    "assemble_model", "RouteTrace", "trace_routes", "train_route_classifier", "Tensor", "backward",
    "grad_check", "DEFAULT_VOCAB", "Vocabulary", "clean_text", "SamplerConfig", "TrainConfig",
    "load_checkpoint", "sample", "save_checkpoint", "train", "train_step",
]
