"""Local diffusion renderer: condition construction, forward/reverse diffusion,
losses with phase scheduling, training, sampling, and paste-back."""

from .conditions import (
    ConditionPack,
    RegionTransform,
    apply_condition_dropout,
    build_condition_pack,
    paste_back,
)
from .diffusion import NoiseSchedule, cosine_schedule, forward_diffuse, predict_x0
from .losses import TrainConfig, loss_back, loss_cdm, loss_fore, total_loss
from .sampling import sample
from .training import load_checkpoint, save_checkpoint, train
from .unet import SmallUNet, UNetConfig

__all__ = [
    "ConditionPack",
    "RegionTransform",
    "apply_condition_dropout",
    "build_condition_pack",
    "paste_back",
    "NoiseSchedule",
    "cosine_schedule",
    "forward_diffuse",
    "predict_x0",
    "TrainConfig",
    "loss_back",
    "loss_cdm",
    "loss_fore",
    "total_loss",
    "sample",
    "train",
    "save_checkpoint",
    "load_checkpoint",
    "SmallUNet",
    "UNetConfig",
]
