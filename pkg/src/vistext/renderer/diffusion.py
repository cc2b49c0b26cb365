"""Noise schedule and the forward/reverse diffusion algebra."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

__all__ = ["NoiseSchedule", "cosine_schedule", "forward_diffuse", "predict_x0"]


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray  # (T,)
    alpha_bar: np.ndarray  # (T,) cumulative product of 1 - beta

    def __post_init__(self) -> None:
        if not ((self.betas > 0) & (self.betas < 1)).all():
            raise ValueError("betas must lie in (0, 1)")
        if not (np.diff(self.alpha_bar) < 0).all():
            raise ValueError("alpha_bar must be strictly decreasing")

    @property
    def T(self) -> int:
        return len(self.betas)


def cosine_schedule(T: int = 1000, s: float = 0.008) -> NoiseSchedule:
    """Cosine alpha-bar schedule with the usual beta clipping."""
    steps = np.arange(T + 1, dtype=np.float64)
    f = np.cos((steps / T + s) / (1 + s) * np.pi / 2) ** 2
    alpha_bar_full = f / f[0]
    betas = np.clip(1.0 - alpha_bar_full[1:] / alpha_bar_full[:-1], 1e-8, 0.999)
    alpha_bar = np.cumprod(1.0 - betas)
    return NoiseSchedule(betas, alpha_bar)


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32))


def forward_diffuse(p0, t: int, eps, schedule: NoiseSchedule) -> torch.Tensor:
    """P_t = sqrt(abar_t) * P_0 + sqrt(1 - abar_t) * eps."""
    if not 0 <= t < schedule.T:
        raise ValueError(f"step {t} outside [0, {schedule.T})")
    p0, eps = _as_tensor(p0), _as_tensor(eps)
    ab = float(schedule.alpha_bar[t])
    return np.sqrt(ab) * p0 + np.sqrt(1.0 - ab) * eps


def predict_x0(
    p_t, eps_hat, t: int, schedule: NoiseSchedule, clip: bool = True
) -> torch.Tensor:
    """Invert the forward step given predicted noise; optionally clip to [-1, 1]."""
    if not 0 <= t < schedule.T:
        raise ValueError(f"step {t} outside [0, {schedule.T})")
    ab = float(schedule.alpha_bar[t])
    if ab <= 0:
        raise ValueError(f"alpha_bar[{t}] is zero; cannot invert")
    p_t, eps_hat = _as_tensor(p_t), _as_tensor(eps_hat)
    x0 = (p_t - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)
    if clip:
        x0 = torch.clamp(x0, -1.0, 1.0)
    return x0
