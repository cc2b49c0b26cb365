"""Condition construction for one text line: cropped regions, masks,
embeddings, and the invertible transform used to paste results back.

Images are float32 HWC arrays in [-1, 1]; masks are float32 HW in {0, 1}.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, replace

import numpy as np
from PIL import Image

from ..geometry import (
    AxisBox,
    QuadPolygon,
    TextLine,
    axis_bbox,
    extend_box,
    line_to_word_boxes,
    rasterize_polygons,
    region_polygon,
)

__all__ = [
    "RegionTransform",
    "ConditionPack",
    "build_condition_pack",
    "apply_condition_dropout",
    "crop_region",
    "paste_back",
]

EXTEND_RATIO = 0.10


@dataclass(frozen=True)
class RegionTransform:
    """Maps an extended, clamped source box onto the fixed target frame.

    The scale preserves aspect; unused target area is edge-replicated padding
    on the right (and, for very wide sources, the bottom).
    """

    source_box: tuple[int, int, int, int]  # x0, y0, x1, y1 in image pixels
    target_h: int
    target_w: int
    scale: float
    pad_right: int
    pad_bottom: int = 0

    @property
    def content_w(self) -> int:
        return self.target_w - self.pad_right

    @property
    def content_h(self) -> int:
        return self.target_h - self.pad_bottom

    @classmethod
    def fit(cls, box: AxisBox, target: tuple[int, int]) -> "RegionTransform":
        th, tw = target
        x0, y0 = int(np.floor(box.x0)), int(np.floor(box.y0))
        x1, y1 = int(np.ceil(box.x1)), int(np.ceil(box.y1))
        w, h = x1 - x0, y1 - y0
        if w < 2 or h < 2:
            raise ValueError(f"degenerate region box {x0, y0, x1, y1}")
        scale = th / h
        content_w = int(round(w * scale))
        if content_w > tw:  # very wide line: width-limited, pad bottom instead
            scale = tw / w
            content_w = tw
        content_h = min(th, int(round(h * scale)))
        return cls(
            (x0, y0, x1, y1),
            th,
            tw,
            scale,
            pad_right=tw - content_w,
            pad_bottom=th - content_h,
        )

    def to_target(self, pts: np.ndarray) -> np.ndarray:
        """Image coordinates -> target-frame coordinates."""
        x0, y0, _, _ = self.source_box
        return (np.asarray(pts, dtype=float) - (x0, y0)) * self.scale


def _resize(arr: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of an HWC [-1, 1] array to (height, width)."""
    h, w = size
    if arr.shape[:2] == (h, w):
        return arr.copy()
    img = Image.fromarray(np.clip((arr + 1.0) * 127.5, 0, 255).astype(np.uint8))
    out = np.asarray(img.resize((w, h), Image.BILINEAR), dtype=np.float32)
    return out / 127.5 - 1.0


def crop_region(image: np.ndarray, transform: RegionTransform) -> np.ndarray:
    """Crop the source box and warp it into the target frame."""
    x0, y0, x1, y1 = transform.source_box
    crop = np.asarray(image, dtype=np.float32)[y0:y1, x0:x1]
    content = _resize(crop, (transform.content_h, transform.content_w))
    return np.pad(
        content,
        ((0, transform.pad_bottom), (0, transform.pad_right), (0, 0)),
        mode="edge",
    )


def paste_back(
    background: np.ndarray, region: np.ndarray, transform: RegionTransform
) -> np.ndarray:
    """Inverse-warp the unpadded region onto the source box.

    Every pixel outside the box is bit-identical to the input background.
    """
    bg = np.asarray(background, dtype=np.float32)
    x0, y0, x1, y1 = transform.source_box
    if not (0 <= x0 < x1 <= bg.shape[1] and 0 <= y0 < y1 <= bg.shape[0]):
        raise ValueError(f"transform box {transform.source_box} outside background")
    if region.shape[:2] != (transform.target_h, transform.target_w):
        raise ValueError(
            f"region shape {region.shape[:2]} does not match target "
            f"{(transform.target_h, transform.target_w)}"
        )
    content = region[: transform.content_h, : transform.content_w]
    out = bg.copy()
    out[y0:y1, x0:x1] = _resize(content, (y1 - y0, x1 - x0))
    return out


@dataclass
class ConditionPack:
    p_back: np.ndarray  # (H, W, 3) in [-1, 1]
    m_line: np.ndarray  # (H, W) in {0, 1}
    m_word: np.ndarray  # (H, W) in {0, 1}
    e_image: np.ndarray | None  # (S, dim); None means the null embedding
    e_text: np.ndarray | None
    transform: RegionTransform
    valid_mask: np.ndarray  # (H, W); 0 over padding
    text: str = ""


def build_condition_pack(
    scene,
    line: TextLine,
    recognizer,
    target: tuple[int, int] = (64, 512),
    extend_ratio: float = EXTEND_RATIO,
    original_image: np.ndarray | None = None,
    erased_image: np.ndarray | None = None,
) -> tuple[ConditionPack, np.ndarray]:
    """Crop conditions and ground truth for one line of a scene record.

    Returns (pack, p0) where p0 is the ground-truth region in the target
    frame. Images may be passed directly to avoid re-reading from disk.
    """
    original = original_image if original_image is not None else load_image(scene.original)
    erased = erased_image if erased_image is not None else load_image(scene.erased)
    h, w = original.shape[:2]

    box = extend_box(axis_bbox(line.region), extend_ratio).clamp(w, h)
    transform = RegionTransform.fit(box, target)

    p0 = crop_region(original, transform)
    p_back = crop_region(erased, transform)

    th, tw = target
    line_poly = QuadPolygon.from_array(
        transform.to_target(region_polygon(line.region, 16).as_array())
    )
    word_polys = [
        QuadPolygon.from_array(transform.to_target(b.as_array()))
        for b in (line.word_boxes or line_to_word_boxes(line))
    ]
    m_line = rasterize_polygons([line_poly], (0, 0), 1.0, (tw, th)).astype(np.float32)
    m_word = rasterize_polygons(word_polys, (0, 0), 1.0, (tw, th)).astype(np.float32)
    m_word = m_word * m_line  # containment by construction

    from ..recognizer import render_plain_text

    # render the plain glyphs into the line mask's bounding box so their
    # columns line up with the region's own glyph columns; everywhere else
    # stays white, matching the crop's glyph-free margins and padding
    i_plain = np.ones((th, tw, 3), dtype=np.float32)
    ys, xs = np.nonzero(m_line)
    if len(ys) == 0:
        ys, xs = np.arange(th), np.arange(tw)
    y0, y1, x0, x1 = ys.min(), ys.max() + 1, xs.min(), xs.max() + 1
    content = render_plain_text(
        line.content, (int(y1 - y0), int(x1 - x0)),
        vocab=recognizer.vocab, font_path=recognizer.config.font_path,
    )
    i_plain[y0:y1, x0:x1] = content
    pack = ConditionPack(
        p_back=p_back,
        m_line=m_line,
        m_word=m_word,
        e_image=recognizer.embed_image(i_plain),
        e_text=recognizer.embed_text(line.content),
        transform=transform,
        valid_mask=_valid_mask(transform),
        text=line.content,
    )
    return pack, p0


def _valid_mask(transform: RegionTransform) -> np.ndarray:
    mask = np.zeros((transform.target_h, transform.target_w), dtype=np.float32)
    mask[: transform.content_h, : transform.content_w] = 1.0
    return mask


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 127.5 - 1.0


def save_image(arr: np.ndarray, path) -> None:
    Image.fromarray(np.clip((arr + 1.0) * 127.5, 0, 255).astype(np.uint8)).save(path)


def apply_condition_dropout(
    pack: ConditionPack,
    rng: random.Random,
    drop_image: float = 0.5,
    drop_text: float = 0.2,
) -> ConditionPack:
    """Independently null the embedding conditions; image-level ones stay."""
    e_image = None if rng.random() < drop_image else pack.e_image
    e_text = None if rng.random() < drop_text else pack.e_text
    return replace(pack, e_image=e_image, e_text=e_text)
