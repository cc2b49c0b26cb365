"""Ancestral sampling with classifier-free guidance."""

from __future__ import annotations

import numpy as np
import torch

from .conditions import ConditionPack
from .diffusion import NoiseSchedule
from .unet import SmallUNet

__all__ = ["sample"]


def sample(
    pack: ConditionPack,
    model: SmallUNet,
    schedule: NoiseSchedule,
    steps: int = 50,
    guidance: float = 3.0,
    seed: int = 0,
) -> np.ndarray:
    """Denoise pure noise into a region image under the pack's conditions.

    Deterministic DDIM-style updates over a strided subset of the schedule;
    guided noise is eps_null + guidance * (eps_cond - eps_null).
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    steps = min(steps, schedule.T)
    gen = torch.Generator().manual_seed(seed)
    h, w = pack.p_back.shape[:2]
    x = torch.randn(1, 3, h, w, generator=gen)
    p_back = torch.from_numpy(pack.p_back).permute(2, 0, 1).unsqueeze(0)
    m_line = torch.from_numpy(pack.m_line).unsqueeze(0)
    m_word = torch.from_numpy(pack.m_word).unsqueeze(0)

    ts = np.unique(np.linspace(0, schedule.T - 1, steps).round().astype(int))[::-1]
    with torch.no_grad():
        for i, t in enumerate(ts):
            t_batch = torch.full((1,), int(t), dtype=torch.long)
            eps_cond = model(
                x, p_back, m_line, m_word, t_batch,
                e_image=pack.e_image, e_text=pack.e_text,
            )
            if guidance == 1.0:
                eps = eps_cond
            else:
                eps_null = model(
                    x, p_back, m_line, m_word, t_batch, e_image=None, e_text=None
                )
                eps = eps_null + guidance * (eps_cond - eps_null)

            ab_t = float(schedule.alpha_bar[t])
            x0 = (x - np.sqrt(1.0 - ab_t) * eps) / np.sqrt(ab_t)
            x0 = torch.clamp(x0, -1.0, 1.0)
            if i + 1 < len(ts):
                ab_prev = float(schedule.alpha_bar[ts[i + 1]])
                x = np.sqrt(ab_prev) * x0 + np.sqrt(1.0 - ab_prev) * eps
            else:
                x = x0
    return x[0].permute(1, 2, 0).numpy().astype(np.float32)
