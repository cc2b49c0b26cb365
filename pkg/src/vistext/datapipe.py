"""Dataset construction: image pairing, 4K tiling, filtering, manifests.

A dataset record pairs an original scene-text image with its text-erased
background and carries line-level annotations. Two filtered subsets are
derived from the same records: a planner subset with record-level limits
and a renderer subset filtered line by line only.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import (
    BezierRegion,
    QuadPolygon,
    TextLine,
    line_height,
    polygon_iou,
    region_polygon,
)

__all__ = [
    "LineAnnotation",
    "SceneRecord",
    "FilterReport",
    "ManifestError",
    "pair_images",
    "tile_4k",
    "filter_trcg",
    "filter_lvtr",
    "write_manifest",
    "read_manifest",
]

MAX_LINES_PER_IMAGE = 12
MAX_IMAGE_SIDE = 2048
TILE_SIZE = 2048
MIN_LINE_HEIGHT = 8.0
MAX_LINE_CHARS = 64
MIN_FIT_IOU = 0.8


class ManifestError(ValueError):
    pass


@dataclass
class LineAnnotation:
    line: TextLine
    uncertain: bool = False
    source_polygon: QuadPolygon | None = None

    def translated(self, dx: float, dy: float) -> "LineAnnotation":
        line = TextLine(
            self.line.region.translated(dx, dy), self.line.content, self.line.word_boxes
        )
        poly = None
        if self.source_polygon is not None:
            poly = QuadPolygon(
                tuple((x + dx, y + dy) for x, y in self.source_polygon.vertices)
            )
        return LineAnnotation(line, self.uncertain, poly)


@dataclass
class SceneRecord:
    original: str
    erased: str
    size: tuple[int, int]  # (width, height)
    lines: list[LineAnnotation] = field(default_factory=list)


@dataclass
class FilterReport:
    kept: bool
    rule: str | None = None
    detail: str = ""
    dropped_lines: list[tuple[int, str]] = field(default_factory=list)


# ---------------------------------------------------------------------------
# Pairing

def pair_images(original_dir, erased_dir, annotations: dict) -> list[SceneRecord]:
    """Match originals with erased counterparts by file name.

    annotations maps file name -> list of line dicts with keys
    "bezier" (16 numbers), "text", optional "uncertain" and "polygon".
    """
    original_dir, erased_dir = Path(original_dir), Path(erased_dir)
    records = []
    for orig in sorted(original_dir.iterdir()):
        if not orig.is_file():
            continue
        erased = erased_dir / orig.name
        if not erased.exists():
            raise FileNotFoundError(f"no erased counterpart for {orig.name}")
        with Image.open(orig) as a, Image.open(erased) as b:
            if a.size != b.size:
                raise ValueError(
                    f"size mismatch for {orig.name}: {a.size} vs {b.size}"
                )
            size = a.size
        lines = [_line_from_dict(d) for d in annotations.get(orig.name, [])]
        records.append(SceneRecord(str(orig), str(erased), size, lines))
    return records


def _line_from_dict(d: dict) -> LineAnnotation:
    poly = None
    if d.get("polygon"):
        poly = QuadPolygon(tuple(map(tuple, d["polygon"])))
    return LineAnnotation(
        line=TextLine(BezierRegion.from_flat(d["bezier"]), d["text"]),
        uncertain=bool(d.get("uncertain", False)),
        source_polygon=poly,
    )


# ---------------------------------------------------------------------------
# Tiling

def tile_4k(record: SceneRecord, out_dir=None) -> list[SceneRecord]:
    """Split an oversized record into four corner tiles.

    Lines are reassigned to the first tile that fully contains them;
    straddling lines are dropped. Records already within bounds pass
    through unchanged.
    """
    w, h = record.size
    if w <= TILE_SIZE and h <= TILE_SIZE:
        return [record]

    xs = sorted({0, max(0, w - TILE_SIZE)})
    ys = sorted({0, max(0, h - TILE_SIZE)})
    origins = [(x, y) for y in ys for x in xs]

    out_dir = Path(out_dir) if out_dir is not None else Path(record.original).parent
    out_dir.mkdir(parents=True, exist_ok=True)

    tiles: list[SceneRecord] = []
    assigned: set[int] = set()
    for idx, (ox, oy) in enumerate(origins):
        tw, th = min(TILE_SIZE, w - ox), min(TILE_SIZE, h - oy)
        lines = []
        for li, ann in enumerate(record.lines):
            if li in assigned:
                continue
            bb = region_polygon(ann.line.region, 32).bbox()
            if bb.x0 >= ox and bb.y0 >= oy and bb.x1 <= ox + tw and bb.y1 <= oy + th:
                lines.append(ann.translated(-ox, -oy))
                assigned.add(li)
        paths = []
        for src in (record.original, record.erased):
            stem = Path(src).stem
            dst = out_dir / f"{stem}_tile{idx}{Path(src).suffix or '.png'}"
            with Image.open(src) as im:
                im.crop((ox, oy, ox + tw, oy + th)).save(dst)
            paths.append(str(dst))
        tiles.append(SceneRecord(paths[0], paths[1], (tw, th), lines))
    return tiles


# ---------------------------------------------------------------------------
# Filtering

def _line_rule(ann: LineAnnotation) -> tuple[str, str] | None:
    """First violated line-level rule, or None. Order is documented."""
    h = line_height(ann.line.region)
    if h < MIN_LINE_HEIGHT:
        return "min-height", f"height {h:.2f}px < {MIN_LINE_HEIGHT}"
    if len(ann.line.content) > MAX_LINE_CHARS:
        return "max-chars", f"{len(ann.line.content)} chars > {MAX_LINE_CHARS}"
    if ann.uncertain:
        return "uncertain", "uncertain character in annotation"
    return None


def _fit_rule(ann: LineAnnotation) -> tuple[str, str] | None:
    if ann.source_polygon is None:
        return None
    fitted = region_polygon(ann.line.region, 16)
    iou = polygon_iou(fitted, ann.source_polygon)
    if iou <= MIN_FIT_IOU:
        return "fit-iou", f"curve fit IoU {iou:.3f} <= {MIN_FIT_IOU}"
    return None


def filter_trcg(record: SceneRecord) -> tuple[FilterReport, SceneRecord | None]:
    """Record-level limits, then per-line rules; dropped lines keep the record."""
    if len(record.lines) > MAX_LINES_PER_IMAGE:
        return (
            FilterReport(False, "line-count", f"{len(record.lines)} lines > {MAX_LINES_PER_IMAGE}"),
            None,
        )
    w, h = record.size
    if w > MAX_IMAGE_SIDE or h > MAX_IMAGE_SIDE:
        return (
            FilterReport(False, "max-dimension", f"{w}x{h} exceeds {MAX_IMAGE_SIDE}"),
            None,
        )
    kept_lines = []
    dropped = []
    for i, ann in enumerate(record.lines):
        violation = _line_rule(ann) or _fit_rule(ann)
        if violation:
            dropped.append((i, violation[0]))
        else:
            kept_lines.append(ann)
    filtered = replace(record, lines=kept_lines)
    return FilterReport(True, None, "", dropped), filtered


def filter_lvtr(ann: LineAnnotation, image_size: tuple[int, int] | None = None) -> FilterReport:
    """Line-level rules only; no record-level limits apply here."""
    violation = _line_rule(ann)
    if violation:
        return FilterReport(False, violation[0], violation[1])
    return FilterReport(True)


# ---------------------------------------------------------------------------
# Manifests

def _line_to_dict(ann: LineAnnotation) -> dict:
    d: dict = {
        "bezier": ann.line.region.as_flat(),
        "text": ann.line.content,
        "uncertain": ann.uncertain,
    }
    if ann.source_polygon is not None:
        d["polygon"] = [list(v) for v in ann.source_polygon.vertices]
    if ann.line.word_boxes is not None:
        d["word_boxes"] = [[list(v) for v in b.vertices] for b in ann.line.word_boxes]
    return d


def _record_to_dict(record: SceneRecord) -> dict:
    return {
        "original": record.original,
        "erased": record.erased,
        "size": list(record.size),
        "lines": [_line_to_dict(ann) for ann in record.lines],
    }


def _record_from_dict(d: dict) -> SceneRecord:
    lines = []
    for ld in d["lines"]:
        ann = _line_from_dict(ld)
        if ld.get("word_boxes"):
            ann.line.word_boxes = [
                QuadPolygon(tuple(map(tuple, b))) for b in ld["word_boxes"]
            ]
        lines.append(ann)
    return SceneRecord(d["original"], d["erased"], tuple(d["size"]), lines)


def write_manifest(records: list[SceneRecord], path) -> None:
    path = Path(path)
    with path.open("w") as fh:
        for record in records:
            fh.write(json.dumps(_record_to_dict(record)) + "\n")


def read_manifest(path) -> list[SceneRecord]:
    records = []
    with Path(path).open() as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                records.append(_record_from_dict(json.loads(raw)))
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise ManifestError(f"manifest line {lineno}: {exc}") from exc
    return records
