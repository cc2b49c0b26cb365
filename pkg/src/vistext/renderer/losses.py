"""Training losses and the phase-scheduled total objective.

The background loss is active for the first half of training (weight 1.0 by
default), then swapped for the recognizer-feature foreground loss (weight
0.01). All losses use mean reduction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import torch

__all__ = ["TrainConfig", "loss_cdm", "loss_fore", "loss_back", "total_loss"]


@dataclass
class TrainConfig:
    lambda_f: float = 0.01
    lambda_b: float = 1.0
    phase_boundary: int = 50  # epochs before this use L_back, after it L_fore
    drop_image: float = 0.5
    drop_text: float = 0.2
    epochs: int = 100
    batch_size: int = 8
    learning_rate: float = 1e-5
    seed: int = 0
    timesteps: int = 1000
    target_size: tuple[int, int] = (64, 512)  # (height, width)

    def __post_init__(self) -> None:
        for name, rate in (("drop_image", self.drop_image), ("drop_text", self.drop_text)):
            if not 0.0 <= rate <= 1.0:
                raise ValueError(f"{name}={rate} outside [0, 1]")
        if self.lambda_f < 0 or self.lambda_b < 0:
            raise ValueError("loss weights must be non-negative")

    def weights_at(self, epoch: int) -> tuple[float, float]:
        """(lambda_f, lambda_b) under the two-phase schedule."""
        if epoch < self.phase_boundary:
            return 0.0, self.lambda_b
        return self.lambda_f, 0.0


def _check_shapes(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def loss_cdm(eps: torch.Tensor, eps_hat: torch.Tensor) -> torch.Tensor:
    """Mean squared error between true and predicted noise."""
    _check_shapes(eps, eps_hat)
    return ((eps - eps_hat) ** 2).mean()


def loss_back(p0: torch.Tensor, p_pred: torch.Tensor, m_line: torch.Tensor) -> torch.Tensor:
    """Pixel consistency outside the line mask."""
    _check_shapes(p0, p_pred)
    inv = 1.0 - m_line
    return ((inv * p0 - inv * p_pred) ** 2).mean()


def loss_fore(
    p0: torch.Tensor,
    p_pred: torch.Tensor,
    m_line: torch.Tensor,
    features: Callable[[torch.Tensor], torch.Tensor],
) -> torch.Tensor:
    """Recognizer-feature consistency inside the line mask.

    Gradients flow into p_pred only; the reference branch is detached.
    """
    _check_shapes(p0, p_pred)
    ref = features((m_line * p0).detach()).detach()
    out = features(m_line * p_pred)
    _check_shapes(ref, out)
    return ((ref - out) ** 2).mean()


def total_loss(parts: dict, cfg: TrainConfig, epoch: int) -> torch.Tensor:
    """L = L_cdm + lambda_f * L_fore + lambda_b * L_back with phase weights."""
    lam_f, lam_b = cfg.weights_at(epoch)
    total = parts["cdm"]
    if lam_f and "fore" in parts:
        total = total + lam_f * parts["fore"]
    if lam_b and "back" in parts:
        total = total + lam_b * parts["back"]
    return total
