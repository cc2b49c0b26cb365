"""Compact convolutional-recurrent text recognizer.

Provides the frozen feature extractor used by the renderer's foreground loss,
the image/text embedding sequences that condition the diffusion model, the
uniform-font plain-text rendering, and greedy CTC decoding for line-accuracy
evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image, ImageDraw, ImageFont

__all__ = [
    "CharVocab",
    "Recognizer",
    "RecognizerConfig",
    "TrainStats",
    "default_font_path",
    "render_plain_text",
    "train_recognizer",
    "save_recognizer",
    "load_recognizer",
]

PRINTABLE_ASCII = "".join(chr(c) for c in range(32, 127))

# Height bands kept in image-embedding tokens (see Recognizer.embed_image).
IMAGE_TOKEN_ROWS = 4

_FONT_CANDIDATES = (
    "/usr/share/fonts/truetype/dejavu/DejaVuSansMono.ttf",
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
)


def default_font_path() -> str:
    for cand in _FONT_CANDIDATES:
        if Path(cand).exists():
            return cand
    try:  # matplotlib bundles the same family
        import matplotlib

        ttf = Path(matplotlib.__file__).parent / "mpl-data" / "fonts" / "ttf"
        mono = ttf / "DejaVuSansMono.ttf"
        if mono.exists():
            return str(mono)
    except ImportError:
        pass
    raise FileNotFoundError("no usable TTF font found; pass font_path explicitly")


class CharVocab:
    """Ordered character set; CTC blank is index 0 and is not encodable."""

    def __init__(self, chars: str = PRINTABLE_ASCII):
        if len(set(chars)) != len(chars):
            raise ValueError("duplicate characters in vocab")
        self.chars = chars
        self._index = {c: i + 1 for i, c in enumerate(chars)}

    def __len__(self) -> int:
        return len(self.chars)

    @property
    def blank(self) -> int:
        return 0

    @property
    def num_classes(self) -> int:
        return len(self.chars) + 1

    def __contains__(self, char: str) -> bool:
        return char in self._index

    def encode(self, text: str) -> list[int]:
        try:
            return [self._index[c] for c in text]
        except KeyError as exc:
            raise ValueError(f"character {exc.args[0]!r} not in vocab") from None

    def decode(self, indices: Sequence[int]) -> str:
        """Greedy CTC collapse: merge repeats, drop blanks."""
        out = []
        prev = None
        for i in indices:
            if i != prev and i != self.blank:
                out.append(self.chars[i - 1])
            prev = i
        return "".join(out)


@dataclass
class RecognizerConfig:
    dim: int = 64
    vocab_chars: str = PRINTABLE_ASCII
    font_path: str | None = None


class Recognizer(nn.Module):
    def __init__(self, config: RecognizerConfig | None = None):
        super().__init__()
        self.config = config or RecognizerConfig()
        self.vocab = CharVocab(self.config.vocab_chars)
        d = self.config.dim
        self.conv = nn.Sequential(
            nn.Conv2d(3, 32, 3, padding=1),
            nn.GroupNorm(8, 32),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(32, 64, 3, padding=1),
            nn.GroupNorm(8, 64),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(64, d, 3, padding=1),
            nn.GroupNorm(8, d),
            nn.ReLU(),
        )
        self.rnn = nn.GRU(d, d // 2, batch_first=True, bidirectional=True)
        self.head = nn.Linear(d, self.vocab.num_classes)
        self.char_table = nn.Embedding(self.vocab.num_classes, d)
        self._frozen = False

    @property
    def frozen(self) -> bool:
        return self._frozen

    def freeze(self) -> "Recognizer":
        self._frozen = True
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        return self

    def _to_batch(self, image) -> torch.Tensor:
        if isinstance(image, torch.Tensor):
            t = image
        else:
            t = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32))
            if t.ndim == 3 and t.shape[-1] == 3:
                t = t.permute(2, 0, 1)
        if t.ndim == 3:
            t = t.unsqueeze(0)
        return t.to(next(self.parameters()).dtype)

    def features(self, image) -> torch.Tensor:
        """Spatial feature map (N, dim, H/4, W/4); differentiable wrt input."""
        return self.conv(self._to_batch(image))

    def visual_sequence(self, image) -> torch.Tensor:
        """Height-pooled feature sequence (N, W/4, dim)."""
        fmap = self.features(image)
        return fmap.mean(dim=2).permute(0, 2, 1)

    def embed_image(self, plain_image) -> np.ndarray:
        """Embedding sequence of a uniform-font render, shape (S, dim).

        Tokens form a coarse row-major grid over the render (height pooled
        to four bands) rather than a single height-averaged row, so the
        sequence keeps the vertical stroke structure a renderer needs to
        reproduce glyph shapes, not just which character sits in a column.
        """
        with torch.no_grad():
            fmap = self.features(plain_image)  # (1, d, H/4, W/4)
            if fmap.shape[2] > IMAGE_TOKEN_ROWS:
                fmap = F.adaptive_avg_pool2d(
                    fmap, (IMAGE_TOKEN_ROWS, fmap.shape[3])
                )
            # row-major: token index = row * W' + col
            return fmap[0].permute(1, 2, 0).reshape(-1, fmap.shape[1]).numpy()

    def embed_text(self, text: str) -> np.ndarray:
        """Embedding-table lookup sequence, shape (len(text), dim)."""
        idx = torch.tensor(self.vocab.encode(text), dtype=torch.long)
        with torch.no_grad():
            return self.char_table(idx).numpy()

    def logits(self, image) -> torch.Tensor:
        seq = self.visual_sequence(image)
        out, _ = self.rnn(seq)
        return self.head(out)

    def recognize(self, image) -> str:
        with torch.no_grad():
            logits = self.logits(image)
        return self.vocab.decode(logits[0].argmax(dim=-1).tolist())


# ---------------------------------------------------------------------------
# Plain-text rendering

def render_plain_text(
    text: str,
    target: tuple[int, int],
    vocab: CharVocab | None = None,
    font_path: str | None = None,
) -> np.ndarray:
    """Deterministic black-on-white render stretched to fill the target.

    target is (height, width); returns float32 HWC in [-1, 1]. The glyphs are
    rasterized at their natural size and then resized to span the whole
    target, so column i of the render corresponds to the same horizontal
    fraction of the text regardless of string length — the property the
    renderer's positional cross-attention relies on to line the glyph
    embedding sequence up with region columns.
    """
    if not text:
        raise ValueError("cannot render empty text")
    vocab = vocab or CharVocab()
    for c in text:
        if c not in vocab:
            raise ValueError(f"character {c!r} not in vocab")
    h, w = target
    font = ImageFont.truetype(font_path or default_font_path(), size=max(8, int(h * 0.7)))
    probe = ImageDraw.Draw(Image.new("RGB", (1, 1)))
    x0, y0, x1, y1 = probe.textbbox((0, 0), text, font=font)
    tw, th = max(1, x1 - x0), max(1, y1 - y0)
    img = Image.new("RGB", (tw, th), (255, 255, 255))
    ImageDraw.Draw(img).text((-x0, -y0), text, fill=(0, 0, 0), font=font)
    img = img.resize((w, h), Image.LANCZOS)
    return np.asarray(img, dtype=np.float32) / 127.5 - 1.0


# ---------------------------------------------------------------------------
# Training

@dataclass
class TrainStats:
    losses: list[float]


def train_recognizer(
    dataset: Sequence[tuple[np.ndarray, str]],
    model: Recognizer | None = None,
    steps: int = 500,
    batch_size: int = 16,
    lr: float = 2e-3,
    seed: int = 0,
) -> tuple[Recognizer, TrainStats]:
    """CTC training, deterministic under the seed."""
    model = model or Recognizer()
    if model.frozen:
        raise RuntimeError("recognizer is frozen; training is not allowed")
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    ctc = nn.CTCLoss(blank=model.vocab.blank, zero_infinity=True)

    images = [model._to_batch(img)[0] for img, _ in dataset]
    targets = [torch.tensor(model.vocab.encode(t), dtype=torch.long) for _, t in dataset]

    losses = []
    model.train()
    for step in range(steps):
        idx = rng.choice(len(dataset), size=min(batch_size, len(dataset)), replace=False)
        batch = torch.stack([images[i] for i in idx])
        logits = model.logits(batch)  # (N, S, C)
        log_probs = F.log_softmax(logits, dim=-1).permute(1, 0, 2)
        tgt = torch.cat([targets[i] for i in idx])
        in_lens = torch.full((len(idx),), logits.shape[1], dtype=torch.long)
        tgt_lens = torch.tensor([len(targets[i]) for i in idx], dtype=torch.long)
        loss = ctc(log_probs, tgt, in_lens, tgt_lens)
        if not torch.isfinite(loss):
            raise RuntimeError(f"non-finite CTC loss at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
    model.eval()
    return model, TrainStats(losses)


def save_recognizer(model: Recognizer, path) -> None:
    torch.save(
        {
            "state": model.state_dict(),
            "dim": model.config.dim,
            "vocab_chars": model.vocab.chars,
            "font_path": model.config.font_path,
        },
        path,
    )


def load_recognizer(path) -> Recognizer:
    blob = torch.load(path, map_location="cpu", weights_only=True)
    model = Recognizer(
        RecognizerConfig(dim=blob["dim"], vocab_chars=blob["vocab_chars"], font_path=blob["font_path"])
    )
    model.load_state_dict(blob["state"])
    model.eval()
    return model
