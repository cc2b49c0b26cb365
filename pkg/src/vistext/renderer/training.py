"""Training loop for the local renderer, plus self-contained checkpoints."""

from __future__ import annotations

import random
from dataclasses import asdict

import numpy as np
import torch

from .conditions import ConditionPack, apply_condition_dropout
from .diffusion import NoiseSchedule, cosine_schedule, forward_diffuse, predict_x0
from .losses import TrainConfig, loss_back, loss_cdm, loss_fore, total_loss
from .unet import SmallUNet, UNetConfig

__all__ = ["train", "save_checkpoint", "load_checkpoint"]


def _pack_tensors(samples: list[tuple[np.ndarray, ConditionPack]]):
    p0 = torch.stack([torch.from_numpy(p).permute(2, 0, 1) for p, _ in samples])
    p_back = torch.stack(
        [torch.from_numpy(c.p_back).permute(2, 0, 1) for _, c in samples]
    )
    m_line = torch.stack([torch.from_numpy(c.m_line) for _, c in samples])
    m_word = torch.stack([torch.from_numpy(c.m_word) for _, c in samples])
    valid = torch.stack([torch.from_numpy(c.valid_mask) for _, c in samples])
    return p0, p_back, m_line, m_word, valid


def train(
    dataset: list[tuple[np.ndarray, ConditionPack]],
    model: SmallUNet,
    cfg: TrainConfig,
    features=None,
    steps_per_epoch: int | None = None,
    log_every: int = 0,
):
    """Noise-prediction training; deterministic given cfg.seed.

    dataset holds (ground-truth region, condition pack) pairs. features is
    the frozen recognizer feature extractor used by the foreground loss.
    Returns (model, loss_curve).
    """
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    drop_rng = random.Random(cfg.seed + 1)
    schedule = cosine_schedule(cfg.timesteps)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.learning_rate)

    n = len(dataset)
    steps_per_epoch = steps_per_epoch or max(1, n // cfg.batch_size)
    losses: list[float] = []
    model.train()
    for epoch in range(cfg.epochs):
        lam_f, lam_b = cfg.weights_at(epoch)
        for _ in range(steps_per_epoch):
            idx = rng.choice(n, size=min(cfg.batch_size, n), replace=False)
            samples = [dataset[i] for i in idx]
            p0, p_back, m_line, m_word, valid = _pack_tensors(samples)
            packs = [
                apply_condition_dropout(dataset[i][1], drop_rng, cfg.drop_image, cfg.drop_text)
                for i in idx
            ]
            t = int(rng.integers(0, schedule.T))
            eps = torch.randn(p0.shape)
            p_t = forward_diffuse(p0, t, eps, schedule)

            eps_hat = model(
                p_t,
                p_back,
                m_line,
                m_word,
                torch.full((len(idx),), t, dtype=torch.long),
                e_image=[c.e_image for c in packs],
                e_text=[c.e_text for c in packs],
            )
            v = valid.unsqueeze(1)
            parts = {"cdm": loss_cdm(eps * v, eps_hat * v)}
            if lam_b or lam_f:
                # keep the restored estimate unclipped: clamping saturates at
                # high t and silently zeroes the auxiliary-loss gradients
                p_pred = predict_x0(p_t, eps_hat, t, schedule, clip=False)
                m = m_line.unsqueeze(1)
                if lam_b:
                    parts["back"] = loss_back(p0 * v, p_pred * v, m)
                if lam_f and features is not None:
                    parts["fore"] = loss_fore(p0, p_pred, m, features)
            loss = total_loss(parts, cfg, epoch)
            if not torch.isfinite(loss):
                raise RuntimeError(
                    f"non-finite loss at epoch {epoch} (t={t}, parts="
                    f"{ {k: float(v) for k, v in parts.items()} })"
                )
            opt.zero_grad()
            loss.backward()
            # the unclipped restored estimate makes the background loss spike
            # at near-pure-noise steps; cap the update instead of the gradient
            # source so those steps still teach without derailing the run
            torch.nn.utils.clip_grad_norm_(model.parameters(), 1.0)
            opt.step()
            losses.append(float(loss.detach()))
        if log_every and (epoch + 1) % log_every == 0:
            recent = np.mean(losses[-steps_per_epoch:])
            print(f"epoch {epoch + 1}/{cfg.epochs} loss {recent:.4f}", flush=True)
    model.eval()
    return model, losses


def save_checkpoint(model: SmallUNet, cfg: TrainConfig, path) -> None:
    torch.save(
        {
            "state": model.state_dict(),
            "unet_config": asdict(model.config),
            "train_config": asdict(cfg),
        },
        path,
    )


def load_checkpoint(path) -> tuple[SmallUNet, TrainConfig, NoiseSchedule]:
    blob = torch.load(path, map_location="cpu", weights_only=True)
    ucfg = blob["unet_config"]
    ucfg["channel_mults"] = tuple(ucfg["channel_mults"])
    model = SmallUNet(UNetConfig(**ucfg))
    model.load_state_dict(blob["state"])
    model.eval()
    tcfg = blob["train_config"]
    tcfg["target_size"] = tuple(tcfg["target_size"])
    cfg = TrainConfig(**tcfg)
    return model, cfg, cosine_schedule(cfg.timesteps)
