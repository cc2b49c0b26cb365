"""Cubic-Bezier text regions, quad polygons and box math.

Curved text lines are bounded by two cubic Bezier curves: the top curve runs
left to right and the bottom curve right to left, so walking all eight control
points traces the region boundary counterclockwise starting at the top-left
corner. Regions serialize as flat lists of 16 numbers (x, y interleaved).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from PIL import Image, ImageDraw

__all__ = [
    "Point",
    "AxisBox",
    "QuadPolygon",
    "BezierRegion",
    "TextLine",
    "bezier_point",
    "bernstein_basis",
    "region_polygon",
    "fit_bezier",
    "polygon_iou",
    "polygon_area",
    "rasterize_polygons",
    "extend_box",
    "axis_bbox",
    "line_to_word_boxes",
]


@dataclass(frozen=True)
class Point:
    x: float
    y: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"non-finite point ({self.x}, {self.y})")

    def as_tuple(self) -> tuple[float, float]:
        return (self.x, self.y)


@dataclass(frozen=True)
class AxisBox:
    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self) -> None:
        if self.x1 < self.x0 or self.y1 < self.y0:
            raise ValueError(f"inverted box {self}")

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    def clamp(self, width: float, height: float) -> "AxisBox":
        """Clip to image bounds [0, width] x [0, height]."""
        return AxisBox(
            min(max(self.x0, 0.0), width),
            min(max(self.y0, 0.0), height),
            min(max(self.x1, 0.0), width),
            min(max(self.y1, 0.0), height),
        )


@dataclass(frozen=True)
class QuadPolygon:
    """Simple polygon, >= 4 vertices, counterclockwise from top-left."""

    vertices: tuple[tuple[float, float], ...]

    def __post_init__(self) -> None:
        if len(self.vertices) < 4:
            raise ValueError("polygon needs at least 4 vertices")

    @classmethod
    def from_array(cls, pts: np.ndarray | Sequence[Sequence[float]]) -> "QuadPolygon":
        arr = np.asarray(pts, dtype=float)
        return cls(tuple((float(x), float(y)) for x, y in arr))

    def as_array(self) -> np.ndarray:
        return np.asarray(self.vertices, dtype=float)

    def bbox(self) -> AxisBox:
        arr = self.as_array()
        return AxisBox(arr[:, 0].min(), arr[:, 1].min(), arr[:, 0].max(), arr[:, 1].max())


@dataclass(frozen=True)
class BezierRegion:
    """Eight control points: top curve left->right, bottom curve right->left."""

    top: tuple[tuple[float, float], ...]
    bottom: tuple[tuple[float, float], ...]

    def __post_init__(self) -> None:
        if len(self.top) != 4 or len(self.bottom) != 4:
            raise ValueError("each curve needs exactly 4 control points")

    @classmethod
    def from_flat(cls, values: Sequence[float]) -> "BezierRegion":
        vals = [float(v) for v in values]
        if len(vals) != 16:
            raise ValueError(f"expected 16 numbers, got {len(vals)}")
        pts = [(vals[i], vals[i + 1]) for i in range(0, 16, 2)]
        return cls(tuple(pts[:4]), tuple(pts[4:]))

    @classmethod
    def from_rect(cls, box: AxisBox) -> "BezierRegion":
        """Axis-aligned rectangle as degenerate Beziers."""
        x0, y0, x1, y1 = box.x0, box.y0, box.x1, box.y1
        top = [(x0 + (x1 - x0) * i / 3.0, y0) for i in range(4)]
        bottom = [(x1 - (x1 - x0) * i / 3.0, y1) for i in range(4)]
        return cls(tuple(top), tuple(bottom))

    def as_flat(self) -> list[float]:
        out: list[float] = []
        for x, y in (*self.top, *self.bottom):
            out.extend((float(x), float(y)))
        return out

    def translated(self, dx: float, dy: float) -> "BezierRegion":
        return BezierRegion(
            tuple((x + dx, y + dy) for x, y in self.top),
            tuple((x + dx, y + dy) for x, y in self.bottom),
        )

    def scaled(self, sx: float, sy: float) -> "BezierRegion":
        return BezierRegion(
            tuple((x * sx, y * sy) for x, y in self.top),
            tuple((x * sx, y * sy) for x, y in self.bottom),
        )


@dataclass
class TextLine:
    """One text line: curved region plus its content string."""

    region: BezierRegion
    content: str
    word_boxes: list[QuadPolygon] | None = None

    def __post_init__(self) -> None:
        if not self.content.strip():
            raise ValueError("text line content is empty")
        if self.word_boxes is not None:
            n_words = len(self.content.split())
            if len(self.word_boxes) != n_words:
                raise ValueError(
                    f"{len(self.word_boxes)} word boxes for {n_words} words"
                )


# ---------------------------------------------------------------------------
# Bezier evaluation

_BINOM3 = (1.0, 3.0, 3.0, 1.0)


def bernstein_basis(t: float | np.ndarray) -> np.ndarray:
    """Cubic Bernstein basis values B_{i,3}(t), shape (..., 4)."""
    t = np.asarray(t, dtype=float)
    u = 1.0 - t
    return np.stack(
        [_BINOM3[i] * t**i * u ** (3 - i) for i in range(4)], axis=-1
    )


def _ctrl_array(controls: Iterable) -> np.ndarray:
    pts = []
    for p in controls:
        if isinstance(p, Point):
            pts.append((p.x, p.y))
        else:
            pts.append((float(p[0]), float(p[1])))
    arr = np.asarray(pts, dtype=float)
    if arr.shape != (4, 2):
        raise ValueError(f"expected 4 control points, got shape {arr.shape}")
    return arr


def bezier_point(controls: Iterable, t: float) -> Point:
    """Evaluate a cubic Bezier at parameter t in [0, 1]."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"parameter t={t} outside [0, 1]")
    arr = _ctrl_array(controls)
    basis = bernstein_basis(t)
    x, y = basis @ arr
    return Point(float(x), float(y))


def _sample_curve(controls: Iterable, ts: np.ndarray) -> np.ndarray:
    arr = _ctrl_array(controls)
    return bernstein_basis(ts) @ arr


def region_polygon(region: BezierRegion, samples_per_curve: int = 16) -> QuadPolygon:
    """Sample both curves into a counterclockwise boundary polygon."""
    if samples_per_curve < 2:
        raise ValueError("samples_per_curve must be >= 2")
    ts = np.linspace(0.0, 1.0, samples_per_curve)
    top = _sample_curve(region.top, ts)
    bottom = _sample_curve(region.bottom, ts)
    return QuadPolygon.from_array(np.vstack([top, bottom]))


# ---------------------------------------------------------------------------
# Fitting

def _chord_params(points: np.ndarray) -> np.ndarray:
    d = np.linalg.norm(np.diff(points, axis=0), axis=1)
    total = d.sum()
    if total <= 0:
        raise ValueError("degenerate (zero-length) polyline")
    return np.concatenate([[0.0], np.cumsum(d) / total])


def _fit_curve(points: np.ndarray, refine_iters: int = 20) -> np.ndarray:
    """Cubic fit with pinned endpoints: Gauss-Newton over inner controls
    and the chord-length-initialized point parameters jointly."""
    n = len(points)
    if n < 2:
        raise ValueError("polyline needs at least 2 points")
    b0, b3 = points[0], points[-1]
    if n == 2:
        return np.array([b0, b0 + (b3 - b0) / 3.0, b0 + 2.0 * (b3 - b0) / 3.0, b3])

    ts = _chord_params(points)
    basis = bernstein_basis(ts)
    rhs = points - np.outer(basis[:, 0], b0) - np.outer(basis[:, 3], b3)
    sol, *_ = np.linalg.lstsq(basis[:, 1:3], rhs, rcond=None)
    b1, b2 = sol

    m = n - 2  # free parameters (endpoints stay at t=0, t=1)
    for _ in range(refine_iters):
        ctrl = np.array([b0, b1, b2, b3])
        basis = bernstein_basis(ts)
        residual = (basis @ ctrl - points).reshape(-1)
        d1 = 3.0 * np.diff(ctrl, axis=0)
        u = 1.0 - ts
        dc = np.stack([u**2, 2 * u * ts, ts**2], axis=-1) @ d1
        jac = np.zeros((2 * n, 4 + m))
        jac[0::2, 0] = basis[:, 1]
        jac[1::2, 1] = basis[:, 1]
        jac[0::2, 2] = basis[:, 2]
        jac[1::2, 3] = basis[:, 2]
        for k in range(m):
            jac[2 * (k + 1), 4 + k] = dc[k + 1, 0]
            jac[2 * (k + 1) + 1, 4 + k] = dc[k + 1, 1]
        step, *_ = np.linalg.lstsq(jac, -residual, rcond=None)
        b1 = b1 + step[0:2]
        b2 = b2 + step[2:4]
        ts[1:-1] = np.clip(ts[1:-1] + step[4:], 0.0, 1.0)
        if np.abs(step).max() < 1e-13:
            break
    return np.array([b0, b1, b2, b3])


def fit_bezier(
    top_polyline: Sequence[Sequence[float]],
    bottom_polyline: Sequence[Sequence[float]],
) -> BezierRegion:
    """Fit one cubic per boundary polyline, endpoints pinned."""
    top = np.asarray(top_polyline, dtype=float)
    bottom = np.asarray(bottom_polyline, dtype=float)
    for pl in (top, bottom):
        if pl.ndim != 2 or pl.shape[0] < 2 or pl.shape[1] != 2:
            raise ValueError("each polyline needs >= 2 two-dimensional points")
        _chord_params(pl)  # raises on zero length
    top_ctrl = _fit_curve(top)
    bot_ctrl = _fit_curve(bottom)
    return BezierRegion(
        tuple(map(tuple, top_ctrl)), tuple(map(tuple, bot_ctrl))
    )


# ---------------------------------------------------------------------------
# Areas / IoU via rasterization

MIN_RASTER_SIDE = 1024


def polygon_area(poly: QuadPolygon) -> float:
    """Shoelace area (absolute)."""
    arr = poly.as_array()
    x, y = arr[:, 0], arr[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def rasterize_polygons(
    polys: Sequence[QuadPolygon],
    origin: tuple[float, float],
    scale: float,
    size: tuple[int, int],
) -> np.ndarray:
    """Union mask of polygons on a pixel-center grid. size is (width, height)."""
    img = Image.new("1", size, 0)
    draw = ImageDraw.Draw(img)
    ox, oy = origin
    for poly in polys:
        pts = [((x - ox) * scale - 0.5, (y - oy) * scale - 0.5) for x, y in poly.vertices]
        draw.polygon(pts, fill=1)
    return np.asarray(img, dtype=bool)


def polygon_iou(a: QuadPolygon, b: QuadPolygon) -> float:
    """Intersection over union via high-resolution rasterization."""
    boxes = [a.bbox(), b.bbox()]
    x0 = min(bx.x0 for bx in boxes)
    y0 = min(bx.y0 for bx in boxes)
    x1 = max(bx.x1 for bx in boxes)
    y1 = max(bx.y1 for bx in boxes)
    extent = max(x1 - x0, y1 - y0)
    if extent <= 0:
        return 0.0
    scale = max(MIN_RASTER_SIDE, 4.0 * extent) / extent
    w = max(2, int(math.ceil((x1 - x0) * scale)))
    h = max(2, int(math.ceil((y1 - y0) * scale)))
    ma = rasterize_polygons([a], (x0, y0), scale, (w, h))
    mb = rasterize_polygons([b], (x0, y0), scale, (w, h))
    union = np.logical_or(ma, mb).sum()
    if union == 0:
        return 0.0
    inter = np.logical_and(ma, mb).sum()
    return float(inter) / float(union)


# ---------------------------------------------------------------------------
# Boxes

def extend_box(box: AxisBox, ratio: float = 0.10) -> AxisBox:
    """Push each side outward by ratio x the corresponding dimension."""
    if ratio < 0:
        raise ValueError(f"negative extension ratio {ratio}")
    dx = box.width * ratio
    dy = box.height * ratio
    return AxisBox(box.x0 - dx, box.y0 - dy, box.x1 + dx, box.y1 + dy)


def axis_bbox(region: BezierRegion, samples_per_curve: int = 64) -> AxisBox:
    """Horizontal bounding rectangle of the sampled region boundary."""
    return region_polygon(region, samples_per_curve).bbox()


# ---------------------------------------------------------------------------
# Word boxes

def _arc_table(controls: Iterable, n: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """(ts, normalized cumulative arc length) lookup along a curve."""
    ts = np.linspace(0.0, 1.0, n)
    pts = _sample_curve(controls, ts)
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    if total <= 0:
        return ts, ts  # degenerate curve: fall back to parameter space
    return ts, cum / total


def _t_at_fraction(table: tuple[np.ndarray, np.ndarray], frac: np.ndarray) -> np.ndarray:
    ts, cum = table
    return np.interp(frac, cum, ts)


def word_spans(content: str) -> list[tuple[float, float]]:
    """Arc-length fraction [start, end] per word.

    Each word gets a span proportional to its character count; inter-word
    gaps count as single spaces. Spans plus gaps exactly cover [0, 1].
    """
    words = content.split()
    if not words:
        raise ValueError("content has no non-whitespace characters")
    units = sum(len(w) for w in words) + (len(words) - 1)
    spans = []
    pos = 0
    for w in words:
        spans.append((pos / units, (pos + len(w)) / units))
        pos += len(w) + 1
    return spans


def line_to_word_boxes(line: TextLine, samples_per_curve: int = 8) -> list[QuadPolygon]:
    """One polygon per whitespace-delimited word, following the line curves."""
    spans = word_spans(line.content)
    top_table = _arc_table(line.region.top)
    # bottom control points are stored right->left; reverse for left->right walk
    bottom_lr = tuple(reversed(line.region.bottom))
    bot_table = _arc_table(bottom_lr)

    boxes = []
    for f0, f1 in spans:
        fr = np.linspace(f0, f1, samples_per_curve)
        top_pts = _sample_curve(line.region.top, _t_at_fraction(top_table, fr))
        bot_pts = _sample_curve(bottom_lr, _t_at_fraction(bot_table, fr))
        boxes.append(QuadPolygon.from_array(np.vstack([top_pts, bot_pts[::-1]])))
    return boxes


def line_height(region: BezierRegion) -> float:
    """Mean top-to-bottom chord length at t in {0, 0.5, 1}."""
    bottom_lr = tuple(reversed(region.bottom))
    ts = np.array([0.0, 0.5, 1.0])
    top = _sample_curve(region.top, ts)
    bot = _sample_curve(bottom_lr, ts)
    return float(np.linalg.norm(top - bot, axis=1).mean())
