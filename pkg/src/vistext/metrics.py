"""Evaluation metrics: FID, region-cropped FID, region-set IoU, edge-overlap
score, CLIP-style content score, detection F-score, line accuracy.

Images are float32 HWC arrays in [-1, 1]. All metrics are pure given frozen
backends; the default backends are small, seeded and hermetic so tests do not
depend on large pretrained networks.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np
import scipy.linalg
import torch
from PIL import Image

from .geometry import QuadPolygon, rasterize_polygons

__all__ = [
    "MetricReport",
    "FeatureExtractorSpec",
    "EdgeDetectorSpec",
    "SmallConvEmbedder",
    "gradient_edge_map",
    "fid",
    "fid_region",
    "region_set_iou",
    "pd_edge",
    "clip_score",
    "det_fscore",
    "line_accuracy",
]


@dataclass
class MetricReport:
    name: str
    value: float
    counts: dict = field(default_factory=dict)
    fingerprint: str = ""

    def __post_init__(self) -> None:
        if not np.isfinite(self.value):
            raise ValueError(f"non-finite metric value for {self.name}")

    @staticmethod
    def fingerprint_of(config: dict) -> str:
        blob = json.dumps(config, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


class FeatureExtractorSpec(Protocol):
    name: str
    dim: int
    input_size: tuple[int, int]

    def __call__(self, images: Sequence[np.ndarray]) -> np.ndarray: ...


class EdgeDetectorSpec(Protocol):
    name: str

    def __call__(self, image: np.ndarray) -> np.ndarray: ...


class SmallConvEmbedder:
    """Fixed, seeded convolutional embedder for hermetic FID runs."""

    def __init__(self, dim: int = 16, seed: int = 7):
        self.name = f"small-conv-{dim}-s{seed}"
        self.dim = dim
        self.input_size = (32, 32)
        gen = torch.Generator().manual_seed(seed)
        self._net = torch.nn.Sequential(
            torch.nn.Conv2d(3, 16, 3, stride=2, padding=1),
            torch.nn.ReLU(),
            torch.nn.Conv2d(16, 32, 3, stride=2, padding=1),
            torch.nn.ReLU(),
            torch.nn.Conv2d(32, dim, 3, stride=2, padding=1),
            torch.nn.AdaptiveAvgPool2d(1),
        )
        for p in self._net.parameters():
            torch.nn.init.normal_(p, std=0.3, generator=gen)
        self._net.eval()
        for p in self._net.parameters():
            p.requires_grad_(False)

    def __call__(self, images: Sequence[np.ndarray]) -> np.ndarray:
        batch = []
        for img in images:
            arr = np.asarray(img, dtype=np.float32)
            if arr.ndim == 2:
                arr = np.repeat(arr[..., None], 3, axis=-1)
            pil = Image.fromarray(
                np.clip((arr + 1.0) * 127.5, 0, 255).astype(np.uint8)
            ).resize(self.input_size, Image.BILINEAR)
            arr = np.asarray(pil, dtype=np.float32) / 127.5 - 1.0
            batch.append(torch.from_numpy(arr).permute(2, 0, 1))
        with torch.no_grad():
            out = self._net(torch.stack(batch)).flatten(1)
        return out.numpy().astype(np.float64)


def to_grayscale(image: np.ndarray) -> np.ndarray:
    """[-1, 1] HWC or HW -> [0, 1] HW."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr.mean(axis=-1)
    return (arr + 1.0) / 2.0


def gradient_edge_map(image: np.ndarray) -> np.ndarray:
    """Sobel gradient magnitude, normalized to [0, 1]."""
    gray = to_grayscale(image)
    pad = np.pad(gray, 1, mode="edge")
    kx = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
    ky = kx.T
    h, w = gray.shape
    windows = np.lib.stride_tricks.sliding_window_view(pad, (3, 3))
    gx = (windows * kx).sum(axis=(-2, -1))
    gy = (windows * ky).sum(axis=(-2, -1))
    mag = np.hypot(gx, gy)
    return np.clip(mag / (4.0 * np.sqrt(2.0)), 0.0, 1.0)


gradient_edge_map.name = "sobel"


# ---------------------------------------------------------------------------
# FID

def fid(features_a: np.ndarray, features_b: np.ndarray) -> float:
    """Frechet distance between two Gaussian fits of embedding sets."""
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    dim = a.shape[1]
    if len(a) <= dim or len(b) <= dim:
        warnings.warn(
            f"sample counts ({len(a)}, {len(b)}) not larger than embedding "
            f"dim {dim}; covariance estimate is unstable",
            stacklevel=2,
        )
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    cov_a = np.cov(a, rowvar=False)
    cov_b = np.cov(b, rowvar=False)
    cov_a = (cov_a + cov_a.T) / 2.0
    cov_b = (cov_b + cov_b.T) / 2.0
    for name, cov in (("a", cov_a), ("b", cov_b)):
        eigs = np.linalg.eigvalsh(cov)
        if eigs.min() < -1e-8 * max(1.0, abs(eigs.max())):
            raise ValueError(f"covariance of set {name} is not PSD after symmetrization")
    covmean, _ = scipy.linalg.sqrtm(cov_a @ cov_b, disp=False)
    if np.iscomplexobj(covmean):
        if np.abs(covmean.imag).max() > 1e-3:
            raise ValueError("covariance square root has significant imaginary part")
        covmean = covmean.real
    diff = mu_a - mu_b
    value = diff @ diff + np.trace(cov_a + cov_b - 2.0 * covmean)
    return float(max(value, 0.0))


def fid_region(
    images_a: Sequence[np.ndarray],
    regions_a: Sequence[Sequence[QuadPolygon]],
    images_b: Sequence[np.ndarray],
    regions_b: Sequence[Sequence[QuadPolygon]],
    extractor: FeatureExtractorSpec,
) -> float:
    """FID over per-region axis-box crops instead of whole images."""
    crops_a = _region_crops(images_a, regions_a)
    crops_b = _region_crops(images_b, regions_b)
    if not crops_a or not crops_b:
        raise ValueError("empty region set")
    return fid(extractor(crops_a), extractor(crops_b))


def _region_crops(images, regions_per_image) -> list[np.ndarray]:
    crops = []
    for img, regions in zip(images, regions_per_image):
        h, w = np.asarray(img).shape[:2]
        for poly in regions:
            bb = poly.bbox()
            x0, y0 = max(0, int(bb.x0)), max(0, int(bb.y0))
            x1 = min(w, int(np.ceil(bb.x1)))
            y1 = min(h, int(np.ceil(bb.y1)))
            if x1 <= x0 or y1 <= y0:
                raise ValueError(f"region {poly.vertices[:1]} invalid in {w}x{h} image")
            crops.append(np.asarray(img)[y0:y1, x0:x1])
    return crops


# ---------------------------------------------------------------------------
# Region metrics

def region_set_iou(
    pred: Sequence[QuadPolygon],
    gt: Sequence[QuadPolygon],
    canvas: tuple[int, int],
) -> float:
    """IoU between the unions of two polygon sets on the native canvas."""
    w, h = canvas
    mask_p = rasterize_polygons(list(pred), (0, 0), 1.0, (w, h)) if pred else np.zeros((h, w), bool)
    mask_g = rasterize_polygons(list(gt), (0, 0), 1.0, (w, h)) if gt else np.zeros((h, w), bool)
    union = np.logical_or(mask_p, mask_g).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(mask_p, mask_g).sum()) / float(union)


def pd_edge(
    image: np.ndarray,
    regions: Sequence[QuadPolygon],
    detector: EdgeDetectorSpec = gradient_edge_map,
) -> float:
    """Mean edge strength under the union of the given regions. Lower is better."""
    if not regions:
        raise ValueError("no regions given")
    edges = detector(image)
    h, w = edges.shape
    mask = rasterize_polygons(list(regions), (0, 0), 1.0, (w, h))
    if mask.sum() == 0:
        raise ValueError("region union is empty on this canvas")
    return float(edges[mask].mean())


def clip_score(texts: Sequence[str], image: np.ndarray, embedder) -> float:
    """Mean over texts of max(0, cos(text, image)) * 100."""
    if not texts:
        raise ValueError("no texts given")
    img_vec = np.asarray(embedder.embed_image(image), dtype=np.float64)
    scores = []
    for text in texts:
        txt_vec = np.asarray(embedder.embed_text(text), dtype=np.float64)
        denom = np.linalg.norm(img_vec) * np.linalg.norm(txt_vec)
        cos = float(img_vec @ txt_vec / denom) if denom > 0 else 0.0
        scores.append(max(0.0, cos) * 100.0)
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# Detection / recognition metrics

def det_fscore(
    pred: Sequence[QuadPolygon],
    gt: Sequence[QuadPolygon],
    iou_threshold: float = 0.5,
) -> tuple[float, float, float]:
    """Greedy one-to-one matching at the IoU threshold; returns (P, R, F)."""
    from .geometry import polygon_iou

    pairs = []
    for pi, p in enumerate(pred):
        for gi, g in enumerate(gt):
            iou = polygon_iou(p, g)
            if iou >= iou_threshold:
                pairs.append((-iou, pi, gi))
    pairs.sort()
    used_p: set[int] = set()
    used_g: set[int] = set()
    matches = 0
    for _, pi, gi in pairs:
        if pi in used_p or gi in used_g:
            continue
        used_p.add(pi)
        used_g.add(gi)
        matches += 1
    precision = matches / len(pred) if pred else 0.0
    recall = matches / len(gt) if gt else 0.0
    f = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f


def line_accuracy(pred: Sequence[str], gt: Sequence[str]) -> float:
    """Exact-match proportion, case-sensitive, outer whitespace trimmed."""
    if len(pred) != len(gt):
        raise ValueError(f"length mismatch: {len(pred)} vs {len(gt)}")
    if not gt:
        return 0.0
    hits = sum(1 for p, g in zip(pred, gt) if p.strip() == g.strip())
    return hits / len(gt)
