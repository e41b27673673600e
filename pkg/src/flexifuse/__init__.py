"""Flexible-arity image fusion with a state-space diffusion prior.

Two or three co-registered source images are fused by sampling a learned
diffusion prior while an expectation-maximization correction pulls every
intermediate estimate toward the measurements.  One set of weights serves
both arities.
"""

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .denoiser import DenoiserParams, PatchConfig, denoise, init_params, ssm_scan, zoh_discretize
from .em import EMConfig, EMState, GradientOperator, ResidueError, SourceStack, em_correct, make_stack
from .imageio import (
    ImageBuffer,
    ImageFormatError,
    denormalize,
    load_image,
    normalize,
    save_image,
)
from .metrics import MetricReport, compute_metric, evaluate
from .sampler import FusionRun, fuse, fuse_fields, unconditional_sample
from .schedule import NoiseSchedule, estimate_f0, forward_perturb, make_schedule, posterior_step
from .training import TrainConfig, backward, dsm_loss, synthetic_corpus, train

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "DenoiserParams",
    "EMConfig",
    "EMState",
    "FusionRun",
    "GradientOperator",
    "ImageBuffer",
    "ImageFormatError",
    "MetricReport",
    "NoiseSchedule",
    "PatchConfig",
    "ResidueError",
    "SourceStack",
    "TrainConfig",
    "backward",
    "compute_metric",
    "denoise",
    "denormalize",
    "dsm_loss",
    "em_correct",
    "estimate_f0",
    "evaluate",
    "forward_perturb",
    "fuse",
    "fuse_fields",
    "init_params",
    "load_checkpoint",
    "load_image",
    "make_schedule",
    "make_stack",
    "normalize",
    "posterior_step",
    "save_checkpoint",
    "save_image",
    "ssm_scan",
    "synthetic_corpus",
    "train",
    "unconditional_sample",
    "zoh_discretize",
]
