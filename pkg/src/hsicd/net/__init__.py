"""Trainable change-classification network and its supporting machinery."""

from . import gradcheck, ops
from .checkpoint import load_checkpoint, save_checkpoint
from .model import (
    CHANNELS,
    FC1_UNITS,
    KERNELS,
    N_CLASSES,
    Network,
    RegionMaskSet,
    derive_region_masks,
)
from .training import TrainConfig, adagrad_step, init_adagrad, save_trace, train

__all__ = [
    "CHANNELS",
    "FC1_UNITS",
    "KERNELS",
    "N_CLASSES",
    "Network",
    "RegionMaskSet",
    "TrainConfig",
    "adagrad_step",
    "derive_region_masks",
    "gradcheck",
    "init_adagrad",
    "load_checkpoint",
    "ops",
    "save_checkpoint",
    "save_trace",
    "train",
]
