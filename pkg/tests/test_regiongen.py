import json

import numpy as np
import pytest

from vistext.datapipe import LineAnnotation, SceneRecord
from vistext.geometry import AxisBox, BezierRegion, TextLine
from vistext.regiongen import (
    BackendError,
    ExhaustedRetries,
    LayoutProposal,
    ParseError,
    SchemaError,
    ScriptedBackend,
    finetune_config,
    export_finetune_records,
    generate_layout,
    heuristic_propose,
    parse_step1,
    parse_step2,
    serialize_proposal,
    step1_prompt,
    step2_prompt,
    validate_proposal,
    write_finetune_jsonl,
)


def rect_region(x0, y0, x1, y1):
    return BezierRegion.from_rect(AxisBox(x0, y0, x1, y1))


def entry_json(region, text):
    return {"layout": region.as_flat(), "text": text}


class TestPrompts:
    def test_step1_contents(self):
        p = step1_prompt()
        assert "The size of the image is 512*512" in p
        assert "represented in JSON format" in p

    def test_step2_contents(self):
        p = step2_prompt()
        assert "Bezier curve control point coordinates" in p
        assert "should not overlap each other" in p
        assert "the more characters, the larger the aspect ratio" in p

    def test_constant(self):
        assert step1_prompt() == step1_prompt()
        assert step2_prompt() == step2_prompt()


class TestParseStep1:
    def test_basic(self):
        pts = parse_step1('[{"point":[100,200],"text":"OPEN"}]')
        assert len(pts) == 1
        assert pts[0].point.as_tuple() == (100.0, 200.0)
        assert pts[0].text == "OPEN"

    def test_empty_array(self):
        assert parse_step1("[]") == []

    def test_wrapped_in_prose(self):
        payload = '[{"point":[10,20],"text":"HI"}]'
        wrappers = [
            "Sure! Here is the plan:\n```json\n{}\n```",
            "The answer [in my view] is {} as requested.",
            "{}\nLet me know if you need more.",
        ]
        want = parse_step1(payload)
        for w in wrappers:
            assert parse_step1(w.format(payload)) == want

    def test_no_json(self):
        with pytest.raises(ParseError):
            parse_step1("there is no json here")

    def test_bad_point_arity(self):
        with pytest.raises(SchemaError):
            parse_step1('[{"point":[1,2,3],"text":"X"}]')


class TestParseStep2:
    def test_rectangle_entry(self):
        raw = json.dumps([entry_json(rect_region(10, 10, 100, 40), "OPEN")])
        prop = parse_step2(raw)
        assert len(prop.entries) == 1
        assert prop.entries[0][0] == rect_region(10, 10, 100, 40)
        assert prop.entries[0][1] == "OPEN"

    def test_arity_error_names_entry(self):
        raw = json.dumps(
            [entry_json(rect_region(0, 0, 10, 5), "A"), {"layout": [0.0] * 15, "text": "B"}]
        )
        with pytest.raises(SchemaError, match="entry 1"):
            parse_step2(raw)

    def test_round_trip(self):
        prop = LayoutProposal(
            [(rect_region(5, 5, 80, 25), "HELLO"), (rect_region(5, 40, 120, 65), "WORLD CUP")]
        )
        assert parse_step2(serialize_proposal(prop)).entries == prop.entries

    def test_random_round_trips(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            n = rng.integers(0, 5)
            entries = []
            y = 5.0
            for _ in range(n):
                h = float(rng.uniform(8, 20))
                w = float(rng.uniform(30, 120))
                x = float(rng.uniform(0, 380))
                entries.append((rect_region(x, y, x + w, y + h), "T" * int(rng.integers(1, 8))))
                y += h + 10
            prop = LayoutProposal(entries)
            assert parse_step2(serialize_proposal(prop)).entries == prop.entries


class TestValidateProposal:
    def test_bounds(self):
        prop = LayoutProposal([(rect_region(500, 10, 600, 40), "X")])
        report = validate_proposal(prop)
        assert not report.ok
        assert report.violations[0][0] == "bounds"

    def test_overlap(self):
        r = rect_region(10, 10, 100, 40)
        report = validate_proposal(LayoutProposal([(r, "A"), (r, "B")]))
        assert not report.ok
        assert any(v[0] == "overlap" for v in report.violations)

    def test_count(self):
        entries = [(rect_region(10, 10 + 35 * i, 100, 30 + 35 * i), "X") for i in range(13)]
        report = validate_proposal(LayoutProposal(entries))
        assert any(v[0] == "count" for v in report.violations)

    def test_well_formed(self):
        prop = LayoutProposal(
            [(rect_region(10, 10, 110, 35), "SHOP"), (rect_region(10, 60, 200, 85), "GROCERIES")]
        )
        report = validate_proposal(prop)
        assert report.ok and not report.violations

    def test_aspect_advisory_not_rejecting(self):
        # longer text in a squarer box: warning, still ok
        prop = LayoutProposal(
            [
                (rect_region(10, 10, 40, 35), "LONGTEXTHERE"),
                (rect_region(10, 60, 300, 85), "A"),
            ]
        )
        report = validate_proposal(prop)
        assert report.ok
        assert any(w[0] == "aspect" for w in report.warnings)

    def test_rule_matrix(self):
        cases = {
            "bounds": LayoutProposal([(rect_region(0, 0, 513, 20), "A")]),
            "overlap": LayoutProposal(
                [(rect_region(0, 0, 100, 20), "A"), (rect_region(50, 0, 150, 20), "B")]
            ),
            "count": LayoutProposal(
                [(rect_region(10, 5 + 40 * i, 100, 25 + 40 * i), "X") for i in range(13)]
            ),
        }
        for rule, prop in cases.items():
            report = validate_proposal(prop)
            assert any(v[0] == rule for v in report.violations), rule


def step1_json():
    return '[{"point":[100,100],"text":"OPEN"}]'


def step2_json():
    return json.dumps([entry_json(rect_region(60, 80, 160, 110), "OPEN")])


class TestGenerateLayout:
    def test_identity_through_pipeline(self):
        backend = ScriptedBackend([step1_json(), step2_json()])
        prop = generate_layout(backend, None)
        assert prop.entries == parse_step2(step2_json()).entries

    def test_retry_contract(self):
        backend = ScriptedBackend(["garbage", "nope", step1_json(), step2_json()])
        prop = generate_layout(backend, None, retries=3)
        assert backend.calls == 4
        assert len(prop.entries) == 1

    def test_exhausted_retries(self):
        backend = ScriptedBackend(["bad"] * 10)
        with pytest.raises(ExhaustedRetries):
            generate_layout(backend, None, retries=3)
        assert backend.calls == 3  # step1 never succeeded; step2 never called

    def test_step2_exhaustion_counts_calls(self):
        backend = ScriptedBackend([step1_json()] + ["bad"] * 10)
        with pytest.raises(ExhaustedRetries, match="step2"):
            generate_layout(backend, None, retries=3)
        assert backend.calls == 4  # 1 for step1 + 3 for step2

    def test_never_returns_invalid(self):
        # first step-2 answer is out of bounds; second is valid
        bad = json.dumps([entry_json(rect_region(500, 10, 600, 40), "X")])
        backend = ScriptedBackend([step1_json(), bad, step2_json()])
        prop = generate_layout(backend, None, retries=3)
        assert validate_proposal(prop).ok

    def test_backend_error_propagates(self):
        class Failing:
            def send(self, turns, image=None):
                raise BackendError("down")

        with pytest.raises(BackendError):
            generate_layout(Failing(), None)


class TestHeuristicPropose:
    def test_uniform_image(self):
        img = np.zeros((256, 256, 3), dtype=np.float32)
        prop = heuristic_propose(img, k=3)
        assert len(prop.entries) == 3
        assert validate_proposal(prop).ok

    def test_noise_image_empty(self):
        rng = np.random.default_rng(1)
        img = rng.choice([-1.0, 1.0], size=(256, 256, 3)).astype(np.float32)
        prop = heuristic_propose(img, k=3, edge_threshold=0.01)
        assert prop.entries == []

    def test_selection_below_global_mean(self):
        rng = np.random.default_rng(2)
        # smooth gradient plus a noisy band
        img = np.tile(np.linspace(-1, 1, 256)[None, :, None], (256, 1, 3)).astype(np.float32)
        img[100:150] += rng.normal(0, 0.5, size=(50, 256, 3)).astype(np.float32)
        prop = heuristic_propose(img, k=2, edge_threshold=1.0)
        from vistext.metrics import gradient_edge_map
        from vistext.geometry import rasterize_polygons, region_polygon

        edges = gradient_edge_map(img)
        for region, _ in prop.entries:
            # regions come back in canvas coords; map to image coords
            r = region.scaled(256 / prop.canvas_size, 256 / prop.canvas_size)
            mask = rasterize_polygons([region_polygon(r, 8)], (0, 0), 1.0, (256, 256))
            assert edges[mask].mean() <= edges.mean() + 1e-9

    def test_k_precondition(self):
        with pytest.raises(ValueError):
            heuristic_propose(np.zeros((64, 64, 3)), k=0)


def make_record(size=(1024, 1024), n_lines=2):
    lines = [
        LineAnnotation(
            TextLine(rect_region(50, 60 + 120 * i, 450, 120 + 120 * i), f"LINE{i}")
        )
        for i in range(n_lines)
    ]
    return SceneRecord("bg.png", "bg_erased.png", size, lines)


class TestFinetuneExport:
    def test_answers_parse_back(self):
        record = make_record()
        (ft,) = export_finetune_records([record])
        answer = ft.conversations[3]["value"]
        prop = parse_step2(answer)
        assert len(prop.entries) == 2
        # 1024 canvas rescaled to 512 halves all coordinates
        expect = record.lines[0].line.region.scaled(0.5, 0.5)
        assert prop.entries[0][0] == expect
        assert prop.entries[0][1] == "LINE0"

    def test_two_turn_structure(self):
        (ft,) = export_finetune_records([make_record()])
        roles = [c["from"] for c in ft.conversations]
        assert roles == ["human", "gpt", "human", "gpt"]
        assert "512*512" in ft.conversations[0]["value"]

    def test_unfiltered_record_rejected(self):
        bad = make_record(n_lines=13)
        with pytest.raises(ValueError, match="filter"):
            list(export_finetune_records([bad]))

    def test_config_values(self, tmp_path):
        config = write_finetune_jsonl([make_record()], tmp_path / "ft.jsonl")
        assert config["epochs"] == 16
        assert config["batch_size"] == 16
        assert config["lora_rank"] == 128
        assert config["lora_alpha"] == 256
        assert config["learning_rate"] == 2e-5
        assert (tmp_path / "ft.config.json").exists()
        lines = (tmp_path / "ft.jsonl").read_text().splitlines()
        assert len(lines) == 1
        rec = json.loads(lines[0])
        assert rec["image"] == "bg.png"

    def test_config_document_values_match(self):
        assert finetune_config()["epochs"] == 16
