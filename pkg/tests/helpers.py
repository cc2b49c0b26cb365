"""Shared builders for synthetic scenes used by pipeline and acceptance tests."""

from __future__ import annotations

import numpy as np
import torch

from vistext.datapipe import LineAnnotation, SceneRecord
from vistext.geometry import AxisBox, BezierRegion, TextLine
from vistext.recognizer import Recognizer, render_plain_text
from vistext.renderer.conditions import save_image

WORDS = ("OPEN", "CAFE", "EXIT", "PARK", "FRESH", "BOOKS", "HOTEL", "NORTH")


def synthetic_background(h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    """Smooth colour gradient plus soft blobs; stands in for a photo."""
    y, x = np.mgrid[0:h, 0:w].astype(np.float32)
    base = np.stack(
        [
            0.4 * np.sin(x / w * np.pi * rng.uniform(0.5, 2.0)),
            0.4 * np.cos(y / h * np.pi * rng.uniform(0.5, 2.0)),
            0.2 * np.sin((x + y) / (w + h) * np.pi * rng.uniform(0.5, 2.0)),
        ],
        axis=-1,
    )
    for _ in range(3):
        cx, cy = rng.uniform(0, w), rng.uniform(0, h)
        r = rng.uniform(min(h, w) / 4, min(h, w))
        blob = np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * r * r))
        base += 0.25 * blob[..., None] * rng.uniform(-1, 1, 3).astype(np.float32)
    return np.clip(base, -1, 1).astype(np.float32)


def make_scene_pair(
    rng: np.random.Generator,
    vocab,
    font_path: str,
    size: tuple[int, int] = (128, 64),
    words: tuple[str, ...] = WORDS,
) -> tuple[np.ndarray, np.ndarray, TextLine]:
    """One background + the same background with one rendered text line."""
    w, h = size
    erased = synthetic_background(h, w, rng)
    text = words[int(rng.integers(len(words)))]
    box_h = int(rng.integers(18, 25))
    box_w = min(w - 8, 8 * len(text) + int(rng.integers(8, 20)))
    x0 = int(rng.integers(2, w - box_w - 1))
    y0 = int(rng.integers(2, h - box_h - 1))
    region = BezierRegion.from_rect(AxisBox(x0, y0, x0 + box_w, y0 + box_h))

    glyphs = render_plain_text(text, (box_h, box_w), vocab=vocab,
                               font_path=font_path)
    ink = glyphs.mean(axis=-1) < 0.0  # dark glyph pixels
    original = erased.copy()
    patch = original[y0:y0 + box_h, x0:x0 + box_w]
    # pick a text colour that contrasts with the local background
    level = -0.95 if patch.mean() > 0 else 0.95
    colour = np.clip(level + rng.uniform(-0.05, 0.05, 3), -1, 1).astype(np.float32)
    patch[ink] = colour
    return original, erased, TextLine(region=region, content=text)


def build_corpus(
    out_dir,
    n: int,
    seed: int,
    vocab,
    font_path: str,
    size: tuple[int, int] = (128, 64),
    words: tuple[str, ...] = WORDS,
) -> list[SceneRecord]:
    """Write n original/erased scene pairs plus records referencing them."""
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n):
        original, erased, line = make_scene_pair(rng, vocab, font_path,
                                                 size=size, words=words)
        o_name, e_name = f"orig_{i:05d}.png", f"erased_{i:05d}.png"
        save_image(original, out_dir / o_name)
        save_image(erased, out_dir / e_name)
        records.append(SceneRecord(
            original=o_name, erased=e_name, size=size,
            lines=[LineAnnotation(line=line, uncertain=False)],
        ))
    return records


def quick_recognizer(seed: int = 0, dim: int = 32) -> Recognizer:
    from vistext.recognizer import RecognizerConfig

    torch.manual_seed(seed)
    return Recognizer(RecognizerConfig(dim=dim))
