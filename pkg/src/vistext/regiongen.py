"""Layout planner: two-step prompt protocol, output parsing and validation,
pluggable backends, and fine-tune data export.

Step one asks the backend for key points and text contents; step two asks for
curved regions as 16-number control-point lists. Both answers are JSON arrays.
The schema keys are fixed: "point"/"text" for step one, "layout"/"text" for
step two.
"""

from __future__ import annotations

import json
import os
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .geometry import (
    AxisBox,
    BezierRegion,
    Point,
    axis_bbox,
    polygon_iou,
    region_polygon,
)

__all__ = [
    "LayoutPoint",
    "LayoutProposal",
    "ValidationReport",
    "FinetuneRecord",
    "ParseError",
    "SchemaError",
    "BackendError",
    "ExhaustedRetries",
    "PlannerBackend",
    "ScriptedBackend",
    "RemoteBackend",
    "step1_prompt",
    "step2_prompt",
    "parse_step1",
    "parse_step2",
    "serialize_proposal",
    "validate_proposal",
    "generate_layout",
    "heuristic_propose",
    "export_finetune_records",
    "finetune_config",
]

CANVAS_SIZE = 512
MAX_ENTRIES = 12
OVERLAP_IOU_MAX = 0.05
DEFAULT_RETRIES = 3

_STEP1_PROMPT = (
    "Given a background image that will be written with text, plan the text "
    "and location of the visual text for the image. The planned locations are "
    "represented by the coordinates of the points, and they should be located "
    "in suitable areas of the image for writing text. The size of the image "
    "is 512*512. Therefore, none of the properties of the positions should "
    "exceed 512. The planned texts should be related to each other and fit to "
    "appear in the location represented by the corresponding point. The "
    "location and text of the planned visual text need to be represented in "
    "JSON format."
)

_STEP2_PROMPT = (
    "Based on the point and text planned above, plan the layout of the visual "
    "text for the image. Point guide where the layout should be and the "
    "planned layout should be located near the point. Layouts are represented "
    "in the form of Bezier curve control point coordinates, representing an "
    "area on an image suitable for writing visual text. Each box consists of "
    "eight vertices, starting at the top left corner in counterclockwise "
    "order. The appropriate layouts should not overlap each other. The aspect "
    "ratio of the layout boxes needs to consider the number of characters in "
    "the texts, the more characters, the larger the aspect ratio. The layout "
    "and text of the planned visual text need to be represented in JSON "
    "format too."
)


class ParseError(ValueError):
    pass


class SchemaError(ValueError):
    pass


class BackendError(RuntimeError):
    pass


class ExhaustedRetries(RuntimeError):
    def __init__(self, step: str, attempts: int):
        super().__init__(f"{step} failed after {attempts} attempts")
        self.step = step
        self.attempts = attempts


@dataclass(frozen=True)
class LayoutPoint:
    point: Point
    text: str


@dataclass
class LayoutProposal:
    entries: list[tuple[BezierRegion, str]]
    canvas_size: int = CANVAS_SIZE


@dataclass
class ValidationReport:
    ok: bool
    violations: list[tuple[str, int, str]] = field(default_factory=list)
    warnings: list[tuple[str, int, str]] = field(default_factory=list)


@dataclass
class FinetuneRecord:
    image: str
    conversations: list[dict]


def step1_prompt() -> str:
    return _STEP1_PROMPT


def step2_prompt() -> str:
    return _STEP2_PROMPT


# ---------------------------------------------------------------------------
# Parsing

def _first_json_array(raw: str):
    """First JSON array embedded anywhere in the string."""
    decoder = json.JSONDecoder()
    for i, ch in enumerate(raw):
        if ch != "[":
            continue
        try:
            value, _ = decoder.raw_decode(raw, i)
        except json.JSONDecodeError:
            continue
        if isinstance(value, list):
            return value
    raise ParseError("no parseable JSON array in backend output")


def parse_step1(raw: str) -> list[LayoutPoint]:
    items = _first_json_array(raw)
    points = []
    for i, item in enumerate(items):
        if not isinstance(item, dict) or "point" not in item or "text" not in item:
            raise SchemaError(f"entry {i}: expected keys 'point' and 'text'")
        pt = item["point"]
        if not isinstance(pt, (list, tuple)) or len(pt) != 2:
            raise SchemaError(f"entry {i}: point must be [x, y], got {pt!r}")
        points.append(LayoutPoint(Point(float(pt[0]), float(pt[1])), str(item["text"]).strip()))
    return points


def parse_step2(raw: str, canvas_size: int = CANVAS_SIZE) -> LayoutProposal:
    items = _first_json_array(raw)
    entries = []
    for i, item in enumerate(items):
        if not isinstance(item, dict) or "layout" not in item or "text" not in item:
            raise SchemaError(f"entry {i}: expected keys 'layout' and 'text'")
        layout = item["layout"]
        if not isinstance(layout, (list, tuple)) or len(layout) != 16:
            n = len(layout) if isinstance(layout, (list, tuple)) else "non-list"
            raise SchemaError(f"entry {i}: layout must have 16 numbers, got {n}")
        entries.append((BezierRegion.from_flat(layout), str(item["text"]).strip()))
    return LayoutProposal(entries, canvas_size)


def serialize_proposal(proposal: LayoutProposal) -> str:
    return json.dumps(
        [{"layout": region.as_flat(), "text": text} for region, text in proposal.entries]
    )


def serialize_points(points: Sequence[LayoutPoint]) -> str:
    return json.dumps(
        [{"point": [p.point.x, p.point.y], "text": p.text} for p in points]
    )


# ---------------------------------------------------------------------------
# Validation

def validate_proposal(proposal: LayoutProposal) -> ValidationReport:
    report = ValidationReport(ok=True)
    canvas = proposal.canvas_size

    if len(proposal.entries) > MAX_ENTRIES:
        report.violations.append(
            ("count", -1, f"{len(proposal.entries)} entries > {MAX_ENTRIES}")
        )

    polys = []
    aspects = []
    for i, (region, text) in enumerate(proposal.entries):
        flat = region.as_flat()
        if any(v < 0 or v > canvas for v in flat):
            bad = next(v for v in flat if v < 0 or v > canvas)
            report.violations.append(
                ("bounds", i, f"coordinate {bad} outside [0, {canvas}]")
            )
        polys.append(region_polygon(region, 16))
        bb = axis_bbox(region)
        aspects.append(bb.width / bb.height if bb.height > 0 else float("inf"))

    for i in range(len(polys)):
        for j in range(i + 1, len(polys)):
            iou = polygon_iou(polys[i], polys[j])
            if iou > OVERLAP_IOU_MAX:
                report.violations.append(
                    ("overlap", j, f"regions {i} and {j} overlap (IoU {iou:.3f})")
                )

    # Aspect-ratio growth with character count is advisory: the prompt states
    # a tendency, not a hard constraint.
    for i, (_, text_i) in enumerate(proposal.entries):
        for j, (_, text_j) in enumerate(proposal.entries):
            if len(text_i) > len(text_j) and aspects[i] < aspects[j] * 0.75:
                report.warnings.append(
                    ("aspect", i, f"longer text {i} has smaller aspect than {j}")
                )

    report.ok = not report.violations
    return report


# ---------------------------------------------------------------------------
# Backends

class PlannerBackend(Protocol):
    def send(self, turns: list[dict], image: str | None) -> str: ...


class ScriptedBackend:
    """Replays canned responses in order; for tests and offline pipelines."""

    def __init__(self, responses: Sequence[str]):
        self._responses = list(responses)
        self.calls = 0

    def send(self, turns: list[dict], image=None) -> str:
        if self.calls >= len(self._responses):
            raise BackendError("scripted backend ran out of responses")
        out = self._responses[self.calls]
        self.calls += 1
        return out


class RemoteBackend:
    """HTTP client for a hosted planner model.

    Reads endpoint/credentials/timeout from constructor arguments or the
    environment (VISTEXT_PLANNER_ENDPOINT, VISTEXT_PLANNER_TOKEN,
    VISTEXT_PLANNER_TIMEOUT).
    """

    def __init__(self, endpoint: str | None = None, token: str | None = None,
                 timeout: float | None = None):
        self.endpoint = endpoint or os.environ.get("VISTEXT_PLANNER_ENDPOINT")
        self.token = token or os.environ.get("VISTEXT_PLANNER_TOKEN")
        self.timeout = timeout or float(os.environ.get("VISTEXT_PLANNER_TIMEOUT", "60"))
        if not self.endpoint:
            raise BackendError("no planner endpoint configured")

    def send(self, turns: list[dict], image=None) -> str:
        import requests

        payload = {"conversations": turns}
        if image is not None:
            payload["image"] = str(image)
        headers = {}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        try:
            resp = requests.post(
                self.endpoint, json=payload, headers=headers, timeout=self.timeout
            )
            resp.raise_for_status()
        except Exception as exc:  # transport failures surface uniformly
            raise BackendError(str(exc)) from exc
        return resp.text


# ---------------------------------------------------------------------------
# Orchestration

def generate_layout(
    backend: PlannerBackend,
    image: str | None,
    retries: int = DEFAULT_RETRIES,
    canvas_size: int = CANVAS_SIZE,
) -> LayoutProposal:
    """Run both steps in one conversation; retry each step on bad output."""
    points_raw = None
    for attempt in range(retries):
        turns = [{"from": "human", "value": step1_prompt()}]
        raw = backend.send(turns, image)
        try:
            parse_step1(raw)
        except (ParseError, SchemaError):
            continue
        points_raw = raw
        break
    if points_raw is None:
        raise ExhaustedRetries("step1", retries)

    for attempt in range(retries):
        turns = [
            {"from": "human", "value": step1_prompt()},
            {"from": "gpt", "value": points_raw},
            {"from": "human", "value": step2_prompt()},
        ]
        raw = backend.send(turns, image)
        try:
            proposal = parse_step2(raw, canvas_size)
        except (ParseError, SchemaError):
            continue
        if validate_proposal(proposal).ok:
            return proposal
    raise ExhaustedRetries("step2", retries)


DEFAULT_CORPUS = (
    "OPEN", "CAFE", "MARKET", "EXIT", "WELCOME", "FRESH", "BOOKS",
    "HOTEL", "PARK", "STATION", "NORTH", "BAKERY",
)


def heuristic_propose(
    image: np.ndarray,
    k: int,
    corpus: Sequence[str] = DEFAULT_CORPUS,
    edge_threshold: float = 0.08,
    rng: random.Random | None = None,
    canvas_size: int = CANVAS_SIZE,
) -> LayoutProposal:
    """Offline planner stand-in: horizontal regions on low-edge patches.

    Candidates whose mean edge strength exceeds either the threshold or the
    global image mean are discarded, so accepted proposals always sit on
    smoother-than-average ground.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    from .metrics import gradient_edge_map

    rng = rng or random.Random(0)
    edges = gradient_edge_map(image)
    h, w = edges.shape
    global_mean = float(edges.mean())

    # integral image for O(1) box sums
    integ = np.zeros((h + 1, w + 1))
    integ[1:, 1:] = edges.cumsum(0).cumsum(1)

    def box_mean(x0, y0, bw, bh):
        s = integ[y0 + bh, x0 + bw] - integ[y0, x0 + bw] - integ[y0 + bh, x0] + integ[y0, x0]
        return s / (bw * bh)

    box_h = max(10, h // 12)
    candidates = []
    texts = list(corpus)
    rng.shuffle(texts)
    step = max(4, box_h // 2)
    for y0 in range(0, h - box_h, step):
        for x0 in range(0, w - box_h, step):
            text = texts[(y0 * w + x0) % len(texts)]
            box_w = min(int(box_h * 0.7 * len(text)), w - x0 - 1)
            if box_w < box_h:
                continue
            score = box_mean(x0, y0, box_w, box_h)
            if score <= min(edge_threshold, global_mean):
                candidates.append((score, x0, y0, box_w, box_h, text))

    candidates.sort(key=lambda c: (c[0], c[2], c[1]))
    chosen: list[tuple[int, int, int, int, str]] = []
    for score, x0, y0, bw, bh, text in candidates:
        if len(chosen) >= k:
            break
        clash = any(
            not (x0 + bw <= cx or cx + cw <= x0 or y0 + bh <= cy or cy + ch <= y0)
            for cx, cy, cw, ch, _ in chosen
        )
        if not clash:
            chosen.append((x0, y0, bw, bh, text))

    sx, sy = canvas_size / w, canvas_size / h
    entries = [
        (
            BezierRegion.from_rect(AxisBox(x0, y0, x0 + bw, y0 + bh)).scaled(sx, sy),
            text,
        )
        for x0, y0, bw, bh, text in chosen
    ]
    return LayoutProposal(entries, canvas_size)


# ---------------------------------------------------------------------------
# Fine-tune export

def finetune_config() -> dict:
    """Training configuration for the planner backend fine-tune."""
    return {
        "method": "lora",
        "lora_rank": 128,
        "lora_alpha": 256,
        "learning_rate": 2e-5,
        "epochs": 16,
        "batch_size": 16,
        "tune_vision_encoder": True,
        "tune_projection_layer": True,
    }


def export_finetune_records(records, canvas: int = CANVAS_SIZE):
    """Yield two-turn conversations whose answers are ground-truth layouts.

    Records must already have passed the planner-subset filter; annotations
    are rescaled to the square canvas.
    """
    from .datapipe import filter_trcg

    for record in records:
        report, filtered = filter_trcg(record)
        if not report.kept or report.dropped_lines:
            raise ValueError(
                f"record {record.original} has not passed the planner filter"
            )
        w, h = record.size
        sx, sy = canvas / w, canvas / h
        points = []
        entries = []
        for ann in record.lines:
            region = ann.line.region.scaled(sx, sy)
            bb = axis_bbox(region)
            center = Point((bb.x0 + bb.x1) / 2, (bb.y0 + bb.y1) / 2)
            points.append(LayoutPoint(center, ann.line.content))
            entries.append((region, ann.line.content))
        proposal = LayoutProposal(entries, canvas)
        yield FinetuneRecord(
            image=record.original,
            conversations=[
                {"from": "human", "value": "<image>\n" + step1_prompt()},
                {"from": "gpt", "value": serialize_points(points)},
                {"from": "human", "value": step2_prompt()},
                {"from": "gpt", "value": serialize_proposal(proposal)},
            ],
        )


def write_finetune_jsonl(records, path, canvas: int = CANVAS_SIZE) -> dict:
    """Persist the conversation stream; returns the training config document."""
    path = Path(path)
    with path.open("w") as fh:
        for i, rec in enumerate(export_finetune_records(records, canvas)):
            fh.write(
                json.dumps(
                    {"id": i, "image": rec.image, "conversations": rec.conversations}
                )
                + "\n"
            )
    config = finetune_config()
    config_path = path.with_suffix(".config.json")
    config_path.write_text(json.dumps(config, indent=2))
    return config
