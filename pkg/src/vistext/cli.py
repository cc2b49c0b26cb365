"""Command-line entry points for the scene-text generation toolkit."""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from .datapipe import (
    filter_lvtr,
    filter_trcg,
    pair_images,
    read_manifest,
    tile_4k,
    write_manifest,
)
from .pipeline import PipelineConfig, run_evaluate, run_generate, write_metric_reports
from .regiongen import (
    RemoteBackend,
    ScriptedBackend,
    heuristic_propose,
    serialize_proposal,
    write_finetune_jsonl,
)


@click.group()
def main() -> None:
    """Two-stage scene-text generation: plan regions, render text, evaluate."""


@main.command("prepare-data")
@click.option("--original", required=True, type=click.Path(exists=True))
@click.option("--erased", required=True, type=click.Path(exists=True))
@click.option("--ann", required=True, type=click.Path(exists=True),
              help="JSON file mapping filenames to line annotations.")
@click.option("--out", required=True, type=click.Path())
@click.option("--subset", required=True, type=click.Choice(["trcg", "lvtr"]))
def prepare_data(original, erased, ann, out, subset) -> None:
    """Pair originals with erased backgrounds, tile, filter, write a manifest."""
    annotations = json.loads(Path(ann).read_text())
    records = pair_images(original, erased, annotations)

    tiles_dir = Path(out).parent / "tiles"
    tiled = []
    for record in records:
        w, h = record.size
        if max(w, h) > 2048:
            tiles_dir.mkdir(parents=True, exist_ok=True)
            tiled.extend(tile_4k(record, out_dir=tiles_dir))
        else:
            tiled.append(record)

    kept = []
    dropped = 0
    for record in tiled:
        if subset == "trcg":
            report, filtered = filter_trcg(record)
            if report.kept and filtered is not None:
                kept.append(filtered)
            else:
                dropped += 1
        else:
            lines = [a for a in record.lines if filter_lvtr(a, record.size).kept]
            if lines:
                kept.append(type(record)(record.original, record.erased,
                                         record.size, lines))
            else:
                dropped += 1
    write_manifest(kept, out)
    click.echo(f"wrote {len(kept)} records to {out} ({dropped} dropped)")


@main.command("trcg-export")
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
def trcg_export(manifest, out) -> None:
    """Export planner fine-tuning conversations (JSONL) plus training config."""
    records = read_manifest(manifest)
    config = write_finetune_jsonl(records, out)
    click.echo(f"wrote {out} (config sidecar: {Path(out).with_suffix('.config.json')})")
    click.echo(json.dumps(config, indent=1))


@main.command("generate-layout")
@click.option("--image", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--lines", "k", default=3, show_default=True)
@click.option("--seed", required=True, type=int)
def generate_layout_cmd(image, out, k, seed) -> None:
    """Propose text regions and contents for one background (offline planner)."""
    import random

    from .renderer.conditions import load_image

    proposal = heuristic_propose(load_image(image), k, rng=random.Random(seed))
    Path(out).write_text(serialize_proposal(proposal))
    click.echo(f"wrote {len(proposal.entries)} regions to {out}")


@main.command("train-recognizer")
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--steps", default=500, show_default=True)
@click.option("--seed", required=True, type=int)
def train_recognizer_cmd(manifest, out, steps, seed) -> None:
    """Train the toy text recognizer on line crops from a manifest."""
    from .recognizer import Recognizer, save_recognizer, train_recognizer
    from .renderer.conditions import build_condition_pack, load_image

    records = read_manifest(manifest)
    root = Path(manifest).parent
    model = Recognizer()
    dataset = []
    for record in records:
        original = load_image(root / record.original)
        erased = load_image(root / record.erased)
        for ann in record.lines:
            _, p0 = build_condition_pack(
                record, ann.line, model, target=(32, 256),
                original_image=original, erased_image=erased,
            )
            dataset.append((p0, ann.line.content))
    model, stats = train_recognizer(dataset, model, steps=steps, seed=seed)
    save_recognizer(model, out)
    click.echo(f"final loss {stats.losses[-1]:.4f}; saved to {out}")


@main.command("train-lvtr")
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--recognizer", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--epochs", default=10, show_default=True)
@click.option("--timesteps", default=200, show_default=True)
@click.option("--seed", required=True, type=int)
def train_lvtr_cmd(manifest, recognizer, out, epochs, timesteps, seed) -> None:
    """Train the conditional region renderer on a prepared manifest."""
    from .recognizer import load_recognizer
    from .renderer.conditions import build_condition_pack, load_image
    from .renderer.losses import TrainConfig
    from .renderer.training import save_checkpoint, train
    from .renderer.unet import SmallUNet, UNetConfig

    rec_model = load_recognizer(recognizer)
    rec_model.freeze()
    records = read_manifest(manifest)
    root = Path(manifest).parent
    dataset = []
    for record in records:
        original = load_image(root / record.original)
        erased = load_image(root / record.erased)
        for ann in record.lines:
            pack, p0 = build_condition_pack(
                record, ann.line, rec_model, target=(32, 256),
                original_image=original, erased_image=erased,
            )
            dataset.append((p0, pack))

    cfg = TrainConfig(epochs=epochs, timesteps=timesteps, seed=seed,
                      target_size=(32, 256),
                      phase_boundary=max(1, epochs // 2))
    ucfg = UNetConfig(cond_dim=rec_model.config.dim,
                      cond_input_dim=rec_model.config.dim)
    model = SmallUNet(ucfg)
    model, losses = train(dataset, model, cfg, features=rec_model.features)
    save_checkpoint(model, cfg, out)
    click.echo(f"final loss {losses[-1]:.4f}; saved to {out}")


def _backend_from_option(backend: str, script: str | None):
    if backend == "remote":
        return RemoteBackend()
    if script is None:
        raise click.UsageError("--script is required for the scripted backend")
    return ScriptedBackend(json.loads(Path(script).read_text()))


@main.command("render")
@click.option("--background", required=True, type=click.Path(exists=True))
@click.option("--layout", required=True, type=click.Path(exists=True),
              help="Layout JSON as produced by generate-layout.")
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--recognizer", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--steps", default=50, show_default=True)
@click.option("--guidance", default=3.0, show_default=True)
@click.option("--seed", required=True, type=int)
def render_cmd(background, layout, checkpoint, recognizer, out,
               steps, guidance, seed) -> None:
    """Render a pre-computed layout onto one background image."""
    from .pipeline import _proposal_to_lines, render_lines
    from .recognizer import load_recognizer
    from .regiongen import parse_step2
    from .renderer.conditions import load_image, save_image
    from .renderer.training import load_checkpoint

    model, train_cfg, schedule = load_checkpoint(checkpoint)
    rec_model = load_recognizer(recognizer)
    rec_model.freeze()
    bg = load_image(background)
    h, w = bg.shape[:2]
    proposal = parse_step2(Path(layout).read_text())
    lines = _proposal_to_lines(proposal, (w, h))
    rendered = render_lines(bg, lines, model, schedule, rec_model,
                            target=train_cfg.target_size, steps=steps,
                            guidance=guidance, seed=seed)
    save_image(rendered, out)
    click.echo(f"wrote {out}")


@main.command("generate")
@click.option("--background", "backgrounds", multiple=True, required=True,
              type=click.Path(exists=True))
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--recognizer", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--backend", type=click.Choice(["scripted", "remote"]),
              default="scripted", show_default=True)
@click.option("--script", type=click.Path(exists=True),
              help="JSON list of canned planner replies (scripted backend).")
@click.option("--steps", default=50, show_default=True)
@click.option("--guidance", default=3.0, show_default=True)
@click.option("--seed", required=True, type=int)
def generate_cmd(backgrounds, checkpoint, recognizer, out, backend, script,
                 steps, guidance, seed) -> None:
    """Full pipeline: plan layouts, render each line, emit annotated images."""
    config = PipelineConfig(
        output_dir=out, seed=seed, backgrounds=list(backgrounds),
        checkpoint=checkpoint, recognizer=recognizer,
        steps=steps, guidance=guidance,
    )
    results = run_generate(config, _backend_from_option(backend, script))
    failed = [r for r in results if not r.ok]
    for r in results:
        status = "ok" if r.ok else f"FAILED ({r.error})"
        click.echo(f"{r.background}: {status}")
    if failed:
        sys.exit(1)


@main.command("evaluate")
@click.option("--manifest-a", required=True, type=click.Path(exists=True),
              help="Manifest of the set under evaluation.")
@click.option("--manifest-b", required=True, type=click.Path(exists=True),
              help="Manifest of the reference set.")
@click.option("--metric", "metric_list", multiple=True,
              help="Metric names; defaults to all.")
@click.option("--out", required=True, type=click.Path())
@click.option("--seed", default=0, show_default=True, type=int)
def evaluate_cmd(manifest_a, manifest_b, metric_list, out, seed) -> None:
    """Compute comparison metrics between two annotated manifests."""
    config = PipelineConfig(
        manifest_a=manifest_a, manifest_b=manifest_b, seed=seed,
        **({"metrics": list(metric_list)} if metric_list else {}),
    )
    reports = run_evaluate(config)
    write_metric_reports(reports, out)
    for r in reports:
        click.echo(f"{r.name}: {r.value:.6f}")


if __name__ == "__main__":
    main()
