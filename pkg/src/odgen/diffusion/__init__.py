"""Toy pixel-space diffusion with an object-wise control branch."""
from .checkpoint import load_checkpoint, save_checkpoint
from .losses import (
    TrainBatch,
    control_loss,
    dual_finetune_loss,
    reconstruction_loss,
    squared_error,
)
from .model import ControlInputs, ModelConfig, ObjectwiseDenoiser
from .sampling import (
    ddpm_sample,
    generate_foreground_pool,
    sample_image,
    sample_prompts,
    sample_triplets,
    sampling_timesteps,
)
from .schedule import (
    NoiseSchedule,
    cosine_alpha_bar,
    forward_noise,
    make_noise_schedule,
)
from .training import OptimizerConfig, train_control, train_finetune

__all__ = [
    "ControlInputs", "ModelConfig", "NoiseSchedule", "ObjectwiseDenoiser", "OptimizerConfig",
    "TrainBatch", "control_loss", "cosine_alpha_bar", "ddpm_sample", "dual_finetune_loss",
    "forward_noise", "generate_foreground_pool", "load_checkpoint", "make_noise_schedule",
    "reconstruction_loss", "sample_image", "sample_prompts", "sample_triplets",
    "sampling_timesteps", "save_checkpoint", "squared_error", "train_control", "train_finetune",
]
