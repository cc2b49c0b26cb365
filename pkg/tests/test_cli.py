import json
from pathlib import Path

import numpy as np
import pytest
import torch
from click.testing import CliRunner

from helpers import build_corpus, quick_recognizer, synthetic_background
from vistext.cli import main
from vistext.datapipe import write_manifest
from vistext.geometry import AxisBox, BezierRegion, Point
from vistext.recognizer import save_recognizer
from vistext.regiongen import (
    LayoutPoint,
    LayoutProposal,
    parse_step2,
    serialize_points,
    serialize_proposal,
)
from vistext.renderer.conditions import save_image
from vistext.renderer.losses import TrainConfig
from vistext.renderer.training import save_checkpoint
from vistext.renderer.unet import SmallUNet, UNetConfig


@pytest.fixture()
def runner():
    return CliRunner()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    rec = quick_recognizer(dim=32)
    save_recognizer(rec, root / "rec.pt")

    records = build_corpus(root, 4, seed=2, vocab=rec.vocab,
                           font_path=rec.config.font_path)
    write_manifest(records, root / "manifest.jsonl")

    torch.manual_seed(0)
    model = SmallUNet(UNetConfig(base_channels=8, channel_mults=(1, 2),
                                 emb_dim=16, cond_dim=32, cond_input_dim=32))
    cfg = TrainConfig(epochs=1, timesteps=50, seed=0, target_size=(16, 64))
    save_checkpoint(model, cfg, root / "lvtr.pt")

    rng = np.random.default_rng(9)
    save_image(synthetic_background(128, 128, rng), root / "bg.png")

    script = [
        serialize_points([LayoutPoint(Point(120, 100), "OPEN")]),
        serialize_proposal(LayoutProposal(
            [(BezierRegion.from_rect(AxisBox(60, 80, 220, 130)), "OPEN")]
        )),
    ]
    (root / "script.json").write_text(json.dumps(script))
    return root


class TestHelp:
    def test_group_lists_subcommands(self, runner):
        result = runner.invoke(main, ["--help"])
        assert result.exit_code == 0
        for cmd in ("prepare-data", "trcg-export", "generate-layout",
                    "train-recognizer", "train-lvtr", "render", "generate",
                    "evaluate"):
            assert cmd in result.output

    def test_seed_mandatory_for_generate(self, runner, workspace):
        result = runner.invoke(main, [
            "generate", "--background", str(workspace / "bg.png"),
            "--checkpoint", str(workspace / "lvtr.pt"),
            "--recognizer", str(workspace / "rec.pt"),
            "--out", "x", "--script", str(workspace / "script.json"),
        ])
        assert result.exit_code != 0
        assert "--seed" in result.output

    def test_seed_mandatory_for_train(self, runner, workspace):
        result = runner.invoke(main, [
            "train-lvtr", "--manifest", str(workspace / "manifest.jsonl"),
            "--recognizer", str(workspace / "rec.pt"), "--out", "x",
        ])
        assert result.exit_code != 0
        assert "--seed" in result.output


class TestGenerateLayout:
    def test_writes_parseable_layout(self, runner, workspace, tmp_path):
        out = tmp_path / "layout.json"
        result = runner.invoke(main, [
            "generate-layout", "--image", str(workspace / "bg.png"),
            "--out", str(out), "--lines", "2", "--seed", "1",
        ])
        assert result.exit_code == 0, result.output
        proposal = parse_step2(out.read_text())
        assert 1 <= len(proposal.entries) <= 2


class TestGenerate:
    def test_end_to_end_scripted(self, runner, workspace, tmp_path):
        out = tmp_path / "gen"
        result = runner.invoke(main, [
            "generate", "--background", str(workspace / "bg.png"),
            "--checkpoint", str(workspace / "lvtr.pt"),
            "--recognizer", str(workspace / "rec.pt"),
            "--out", str(out), "--script", str(workspace / "script.json"),
            "--steps", "4", "--seed", "0",
        ])
        assert result.exit_code == 0, result.output
        assert (out / "bg.png").exists()
        assert (out / "bg.layout.json").exists()
        assert (out / "report.json").exists()


class TestRender:
    def test_layout_to_image(self, runner, workspace, tmp_path):
        layout = tmp_path / "layout.json"
        layout.write_text(serialize_proposal(LayoutProposal(
            [(BezierRegion.from_rect(AxisBox(60, 80, 220, 130)), "OPEN")]
        )))
        out = tmp_path / "rendered.png"
        result = runner.invoke(main, [
            "render", "--background", str(workspace / "bg.png"),
            "--layout", str(layout),
            "--checkpoint", str(workspace / "lvtr.pt"),
            "--recognizer", str(workspace / "rec.pt"),
            "--out", str(out), "--steps", "4", "--seed", "0",
        ])
        assert result.exit_code == 0, result.output
        assert out.exists()


class TestEvaluate:
    def test_identity_metrics(self, runner, workspace, tmp_path):
        out = tmp_path / "metrics.json"
        result = runner.invoke(main, [
            "evaluate", "--manifest-a", str(workspace / "manifest.jsonl"),
            "--manifest-b", str(workspace / "manifest.jsonl"),
            "--metric", "region_iou", "--metric", "line_accuracy",
            "--out", str(out),
        ])
        assert result.exit_code == 0, result.output
        payload = {e["name"]: e["value"] for e in json.loads(out.read_text())}
        assert payload == {"region_iou": 1.0, "line_accuracy": 1.0}


class TestTrcgExport:
    def test_jsonl_and_config(self, runner, workspace, tmp_path):
        out = tmp_path / "finetune.jsonl"
        result = runner.invoke(main, [
            "trcg-export", "--manifest", str(workspace / "manifest.jsonl"),
            "--out", str(out),
        ])
        assert result.exit_code == 0, result.output
        lines = out.read_text().splitlines()
        assert len(lines) == 4
        first = json.loads(lines[0])
        assert len(first["conversations"]) == 4
        assert out.with_suffix(".config.json").exists()


class TestPrepareData:
    def test_lvtr_subset(self, runner, workspace, tmp_path):
        ann = {}
        for line in (workspace / "manifest.jsonl").read_text().splitlines():
            rec = json.loads(line)
            ann[rec["original"]] = rec["lines"]
        # pair_images expects original/erased dirs; reuse the corpus files
        orig_dir, erased_dir = tmp_path / "orig", tmp_path / "erased"
        orig_dir.mkdir()
        erased_dir.mkdir()
        for line in (workspace / "manifest.jsonl").read_text().splitlines():
            rec = json.loads(line)
            (orig_dir / rec["original"]).write_bytes(
                (workspace / rec["original"]).read_bytes())
            (erased_dir / rec["original"]).write_bytes(
                (workspace / rec["erased"]).read_bytes())
        ann_path = tmp_path / "ann.json"
        ann_path.write_text(json.dumps(ann))
        out = tmp_path / "prepared.jsonl"
        result = runner.invoke(main, [
            "prepare-data", "--original", str(orig_dir),
            "--erased", str(erased_dir), "--ann", str(ann_path),
            "--out", str(out), "--subset", "lvtr",
        ])
        assert result.exit_code == 0, result.output
        assert out.exists()
        assert len(out.read_text().splitlines()) == 4
