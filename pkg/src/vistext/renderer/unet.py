"""Small conditional UNet noise predictor.

Image-level conditions (background crop, line mask, word mask) are channel-
concatenated with the noisy region. Embedding-level conditions enter twice:
mean-pooled into the timestep embedding, and as a cross-attention context at
every resolution of the encoder and decoder, so glyph-level detail can reach
the feature maps before downsampling destroys it. Dropped embeddings are
replaced by learned null vectors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from ..recognizer import IMAGE_TOKEN_ROWS

__all__ = ["UNetConfig", "SmallUNet"]


@dataclass
class UNetConfig:
    base_channels: int = 32
    channel_mults: tuple[int, ...] = (1, 2, 3)
    emb_dim: int = 64
    cond_dim: int = 64
    cond_input_dim: int = 64  # recognizer embedding width
    in_channels: int = 8  # p_t(3) + p_back(3) + m_line(1) + m_word(1)
    pos_scale: float = 3.0  # positional-logit gain in the cross-attention


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None, :]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def position_encoding(pos: torch.Tensor, dim: int) -> torch.Tensor:
    """Encode 2-D positions (S, 2) as (S, dim): x in one half, y in the other."""
    half = dim // 2
    return torch.cat(
        [timestep_embedding(pos[:, 0], half), timestep_embedding(pos[:, 1], dim - half)],
        dim=-1,
    )


def grid_positions(length: int, rows: int) -> torch.Tensor:
    """Row-major (x, y) positions for a token grid, both axes scaled 0..100.

    Falls back to a single row when the sequence length is not a multiple of
    the requested row count (e.g. a plain 1-D token sequence).
    """
    if rows <= 1 or length < rows or length % rows != 0:
        rows = 1
    cols = length // rows
    x = torch.arange(cols, dtype=torch.float32) / max(cols - 1, 1) * 100.0
    if rows > 1:
        y = torch.arange(rows, dtype=torch.float32) / (rows - 1) * 100.0
    else:
        y = torch.full((1,), 50.0)
    return torch.stack([x.repeat(rows), y.repeat_interleave(cols)], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, emb_dim: int):
        super().__init__()
        groups = math.gcd(8, c_in)
        self.norm1 = nn.GroupNorm(groups, c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.film = nn.Linear(emb_dim, 2 * c_out)
        self.norm2 = nn.GroupNorm(math.gcd(8, c_out), c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()
        self.act = nn.SiLU()

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(self.act(self.norm1(x)))
        scale, shift = self.film(emb)[:, :, None, None].chunk(2, dim=1)
        h = self.act(self.norm2(h) * (1 + scale) + shift)
        return self.conv2(h) + self.skip(x)


class CrossAttention(nn.Module):
    """Single-head cross-attention with positional encodings.

    Queries carry their normalized (x, y) pixel position and keys carry the
    (x, y) position of their condition token, so the attention can align
    condition tokens (arranged as a coarse grid over the glyph render) with
    the matching image location instead of only pooling them globally.
    pos_scale multiplies both positional terms; above ~2 the position
    dot-products dominate the logits and each pixel attends almost
    deterministically to the condition tokens at its own location, which a
    small model needs because it cannot afford the gradient steps to
    discover the alignment itself.
    """

    def __init__(self, channels: int, context_dim: int, pos_scale: float = 3.0):
        super().__init__()
        self.norm = nn.GroupNorm(math.gcd(8, channels), channels)
        self.q = nn.Conv2d(channels, channels, 1)
        self.kv = nn.Linear(context_dim, 2 * channels)
        self.out = nn.Conv2d(channels, channels, 1)
        self.scale = channels**-0.5
        self.pos_scale = pos_scale

    def forward(
        self,
        x: torch.Tensor,
        context: torch.Tensor,
        context_pos: torch.Tensor,
    ) -> torch.Tensor:
        n, c, h, w = x.shape
        q = self.q(self.norm(x)).flatten(2).transpose(1, 2)  # (N, HW, C)
        col = torch.arange(w, device=x.device, dtype=torch.float32)
        col = col / max(w - 1, 1) * 100.0
        row = torch.arange(h, device=x.device, dtype=torch.float32)
        row = row / max(h - 1, 1) * 100.0
        q_pos = torch.stack([col.repeat(h), row.repeat_interleave(w)], dim=-1)
        q = q + self.pos_scale * position_encoding(q_pos, c)[None]
        k, v = self.kv(context).chunk(2, dim=-1)  # (N, S, C) each
        k = k + self.pos_scale * position_encoding(context_pos, c)[None]
        attn = torch.softmax(q @ k.transpose(1, 2) * self.scale, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(n, c, h, w)
        return x + self.out(out)


class SmallUNet(nn.Module):
    def __init__(self, config: UNetConfig | None = None):
        super().__init__()
        self.config = config or UNetConfig()
        cfg = self.config
        emb = cfg.emb_dim

        self.null_image = nn.Parameter(torch.zeros(1, cfg.cond_dim))
        self.null_text = nn.Parameter(torch.zeros(1, cfg.cond_dim))
        self.cond_proj = nn.Linear(cfg.cond_input_dim, cfg.cond_dim)
        self.time_mlp = nn.Sequential(
            nn.Linear(emb + cfg.cond_dim, emb), nn.SiLU(), nn.Linear(emb, emb)
        )

        chans = [cfg.base_channels * m for m in cfg.channel_mults]
        self.stem = nn.Conv2d(cfg.in_channels, chans[0], 3, padding=1)
        self.down_blocks = nn.ModuleList()
        self.down_attns = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        for i in range(len(chans) - 1):
            self.down_blocks.append(ResBlock(chans[i], chans[i], emb))
            self.down_attns.append(CrossAttention(chans[i], cfg.cond_dim, cfg.pos_scale))
            self.downsamples.append(nn.Conv2d(chans[i], chans[i + 1], 3, stride=2, padding=1))
        self.mid1 = ResBlock(chans[-1], chans[-1], emb)
        self.attn = CrossAttention(chans[-1], cfg.cond_dim, cfg.pos_scale)
        self.mid2 = ResBlock(chans[-1], chans[-1], emb)
        self.up_convs = nn.ModuleList()
        self.up_blocks = nn.ModuleList()
        self.up_attns = nn.ModuleList()
        for i in reversed(range(len(chans) - 1)):
            self.up_convs.append(nn.Conv2d(chans[i + 1], chans[i], 3, padding=1))
            self.up_blocks.append(ResBlock(2 * chans[i], chans[i], emb))
            self.up_attns.append(CrossAttention(chans[i], cfg.cond_dim, cfg.pos_scale))
        self.out_norm = nn.GroupNorm(math.gcd(8, chans[0]), chans[0])
        self.out_conv = nn.Conv2d(chans[0], 3, 3, padding=1)
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)

    def _embed_one(self, emb, null: torch.Tensor, length: int | None = None) -> torch.Tensor:
        """One sample's condition sequence (S, cond_dim); None -> learned null.

        When length is given the sequence is padded with the null vector so
        variable-length texts batch together.
        """
        if emb is None:
            seq = null
        else:
            if isinstance(emb, np.ndarray):
                emb = torch.from_numpy(np.ascontiguousarray(emb, dtype=np.float32))
            seq = self.cond_proj(emb)
        if length is not None and seq.shape[0] < length:
            pad = null.expand(length - seq.shape[0], -1)
            seq = torch.cat([seq, pad], dim=0)
        return seq

    def _context(self, e_image, e_text, batch: int) -> tuple[torch.Tensor, torch.Tensor]:
        # accept a single condition (shared by the batch) or a per-sample list
        if not isinstance(e_image, (list, tuple)):
            e_image = [e_image] * batch
        if not isinstance(e_text, (list, tuple)):
            e_text = [e_text] * batch
        img_len = max(1 if e is None else len(e) for e in e_image)
        txt_len = max(1 if e is None else len(e) for e in e_text)
        rows = [
            torch.cat(
                [
                    self._embed_one(ei, self.null_image, img_len),
                    self._embed_one(et, self.null_text, txt_len),
                ],
                dim=0,
            )
            for ei, et in zip(e_image, e_text)
        ]
        # token positions: image tokens form a row-major grid over the glyph
        # render; text tokens sweep left to right at mid-height, offset in x
        # so the two condition streams stay distinguishable
        txt_pos = torch.stack(
            [torch.linspace(0, 100, txt_len) + 300.0, torch.full((txt_len,), 50.0)],
            dim=-1,
        )
        pos = torch.cat([grid_positions(img_len, IMAGE_TOKEN_ROWS), txt_pos])
        return torch.stack(rows), pos

    def forward(
        self,
        p_t: torch.Tensor,
        p_back: torch.Tensor,
        m_line: torch.Tensor,
        m_word: torch.Tensor,
        t: torch.Tensor,
        e_image=None,
        e_text=None,
    ) -> torch.Tensor:
        """Predict the noise added to the ground-truth region."""
        n = p_t.shape[0]
        if m_line.ndim == 3:
            m_line = m_line.unsqueeze(1)
        if m_word.ndim == 3:
            m_word = m_word.unsqueeze(1)
        x = torch.cat([p_t, p_back, m_line, m_word], dim=1)

        context, context_pos = self._context(e_image, e_text, n)
        pooled = context.mean(dim=1)
        emb = self.time_mlp(
            torch.cat([timestep_embedding(t, self.config.emb_dim), pooled], dim=-1)
        )

        h = self.stem(x)
        skips = []
        for block, attn, down in zip(self.down_blocks, self.down_attns, self.downsamples):
            h = attn(block(h, emb), context, context_pos)
            skips.append(h)
            h = down(h)
        h = self.mid1(h, emb)
        h = self.attn(h, context, context_pos)
        h = self.mid2(h, emb)
        for conv, block, attn in zip(self.up_convs, self.up_blocks, self.up_attns):
            h = conv(nn.functional.interpolate(h, scale_factor=2, mode="nearest"))
            skip = skips.pop()
            h = attn(block(torch.cat([h, skip], dim=1), emb), context, context_pos)
        return self.out_conv(nn.functional.silu(self.out_norm(h)))
