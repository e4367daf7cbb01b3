"""Command-line interface.

Every subcommand works on a bundle directory (created by ``synth`` or
``ingest``) and the checkpoint files written by ``train``. The global
``--seed`` and ``--config`` options feed a TrainConfig shared by all
training-adjacent commands.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import sys
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

import click
import numpy as np

from .state import TrainConfig

log = logging.getLogger(__name__)

CONFIG_FIELDS = {f.name for f in dataclasses.fields(TrainConfig)}


def _build_config(ctx: click.Context) -> TrainConfig:
    seed = ctx.obj["seed"]
    overrides = dict(ctx.obj["config"])
    unknown = set(overrides) - CONFIG_FIELDS
    if unknown:
        raise click.ClickException(f"unknown config keys: {sorted(unknown)}")
    for key in ("stage_iterations", "grid_resolutions"):
        if key in overrides:
            overrides[key] = tuple(overrides[key])
    cfg = TrainConfig(seed=seed, **overrides)
    cfg.validate()
    return cfg


def _load_engine(checkpoint: str, bundle_dir: str):
    """(engine state, bundle, query engine) for a checkpoint + bundle pair."""
    from . import serviceio
    from .fixtures import DeterministicEmbedder, StaticTextEmbedder
    from .query import QueryEngine
    from .scene import CAPTION_EMBED_DIM
    from .synth import embedders_from_objects_meta

    state = serviceio.load_checkpoint(checkpoint)
    bundle = serviceio.load_bundle(bundle_dir)
    objects_path = Path(bundle_dir) / "synth_objects.json"
    if objects_path.exists():
        static_emb, caption_emb = embedders_from_objects_meta(
            json.loads(objects_path.read_text())
        )
    else:
        static_emb = StaticTextEmbedder()
        caption_emb = DeterministicEmbedder(CAPTION_EMBED_DIM, salt="caption")
    engine = QueryEngine(state, bundle.cameras, static_emb, caption_emb)
    return state, bundle, engine


@click.group()
@click.option("--seed", type=int, default=0, show_default=True, help="Global RNG seed.")
@click.option(
    "--config",
    "config_path",
    type=click.Path(exists=True, dir_okay=False),
    default=None,
    help="TOML file overriding training configuration fields.",
)
@click.option("-v", "--verbose", is_flag=True, help="Enable debug logging.")
@click.pass_context
def main(ctx: click.Context, seed: int, config_path: str | None, verbose: bool):
    """Desk-scale 4D language field engine."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    overrides = {}
    if config_path is not None:
        overrides = tomllib.loads(Path(config_path).read_text())
    ctx.obj = {"seed": seed, "config": overrides}


@main.command()
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--frames", type=int, default=8, show_default=True)
@click.option("--width", type=int, default=128, show_default=True)
@click.option("--height", type=int, default=128, show_default=True)
@click.pass_context
def synth(ctx, out_dir: str, frames: int, width: int, height: int):
    """Generate the deterministic two-object synthetic bundle."""
    from . import serviceio
    from .synth import default_two_object_spec, save_synth_extras, synthesize_scene

    spec = default_two_object_spec(
        width=width, height=height, num_frames=frames, seed=ctx.obj["seed"]
    )
    result = synthesize_scene(spec)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    serviceio.save_bundle(result.bundle, out)
    save_synth_extras(result, out)
    click.echo(
        f"wrote {result.bundle.num_frames} frames "
        f"({width}x{height}, {len(spec.objects)} objects) to {out}"
    )


@main.command()
@click.option("--input", "input_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
def ingest(input_dir: str, out_dir: str):
    """Validate a raw bundle directory and write a normalized copy."""
    from . import serviceio
    from .scene import validate_bundle

    bundle = serviceio.load_bundle(input_dir)
    violations = validate_bundle(bundle)
    if violations:
        for v in violations:
            click.echo(f"violation: {v}", err=True)
        raise click.ClickException(f"bundle has {len(violations)} violation(s)")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    serviceio.save_bundle(bundle, out)
    click.echo(f"ingested {bundle.num_frames} frames, {len(bundle.mask_tracks)} tracks -> {out}")


@main.command()
@click.option("--bundle", "bundle_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--cache", "cache_dir", required=True, type=click.Path(file_okay=False))
@click.option("--caption-endpoint", default=None, help="HTTP captioning service URL.")
@click.option("--embed-endpoint", default=None, help="HTTP embedding service URL.")
@click.option("--fixture", is_flag=True, help="Use the built-in deterministic clients.")
@click.option("--stride", type=int, default=1, show_default=True)
def caption(
    bundle_dir: str,
    cache_dir: str,
    caption_endpoint: str | None,
    embed_endpoint: str | None,
    fixture: bool,
    stride: int,
):
    """Caption every masked object frame and attach the embeddings."""
    from . import serviceio
    from .captions import CaptionPipeline
    from .fixtures import DeterministicEmbedder, image_content_key
    from .remote import HttpCaptionClient, HttpEmbedClient
    from .scene import CAPTION_EMBED_DIM

    bundle = serviceio.load_bundle(bundle_dir)
    if fixture:

        class _HashCaptioner:
            def video_description(self, prompt_images, template):
                return f"object {image_content_key(prompt_images)[:8]} moving through the scene"

            def frame_caption(self, video_description, prompt_image, template, frame):
                return f"object {image_content_key([prompt_image])[:8]} in a steady state"

        caption_client = _HashCaptioner()
        embed_client = DeterministicEmbedder(CAPTION_EMBED_DIM, salt="caption")
    else:
        if not caption_endpoint or not embed_endpoint:
            raise click.ClickException(
                "either pass --fixture or both --caption-endpoint and --embed-endpoint"
            )
        caption_client = HttpCaptionClient(caption_endpoint)
        embed_client = HttpEmbedClient(embed_endpoint)
    pipeline = CaptionPipeline(
        caption_client, embed_client, cache_dir, frame_stride=stride
    )
    bundle.caption_records = pipeline.run(bundle)
    serviceio.save_bundle(bundle, bundle_dir)
    click.echo(f"captioned {len(bundle.caption_records)} (object, frame) pairs")


@main.command()
@click.option("--bundle", "bundle_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.option("--steps", type=int, default=None, help="Override autoencoder training steps.")
@click.pass_context
def compress(ctx, bundle_dir: str, out_path: str, steps: int | None):
    """Train the 512->3 and 4096->6 embedding autoencoders."""
    from . import serviceio
    from .trainer import fit_compressors

    config = _build_config(ctx)
    bundle = serviceio.load_bundle(bundle_dir)
    static_ae, caption_ae = fit_compressors(bundle, config, steps=steps)
    serviceio.save_autoencoders(out_path, static_ae, caption_ae)
    click.echo(
        f"static 512->3 cosine {static_ae.final_losses['mean_cosine']:.4f}, "
        f"caption 4096->6 cosine {caption_ae.final_losses['mean_cosine']:.4f} -> {out_path}"
    )


@main.command()
@click.option("--bundle", "bundle_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--autoencoders", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--iteration-scale", type=float, default=None, help="Scale all stage lengths.")
@click.option("--compressor-steps", type=int, default=None)
@click.pass_context
def train(
    ctx,
    bundle_dir: str,
    out_dir: str,
    autoencoders: str | None,
    iteration_scale: float | None,
    compressor_steps: int | None,
):
    """Run the four-stage schedule and write per-stage checkpoints."""
    from . import serviceio
    from .synth import load_synth_extras
    from .trainer import FieldTrainer

    config = _build_config(ctx)
    if iteration_scale is not None:
        config = dataclasses.replace(config, iteration_scale=iteration_scale)
    bundle = serviceio.load_bundle(bundle_dir)
    init_path = Path(bundle_dir) / "synth_init.npz"
    if not init_path.exists():
        raise click.ClickException(
            f"no initialization data ({init_path}); run `dynafield synth` "
            "or provide synth_init.npz alongside the bundle"
        )
    init_positions, init_colors, aabb_min, aabb_max, _ = load_synth_extras(bundle_dir)
    static_ae = caption_ae = None
    if autoencoders is not None:
        static_ae, caption_ae = serviceio.load_autoencoders(autoencoders)
    out = Path(out_dir)
    trainer = FieldTrainer(
        bundle,
        config,
        init_positions,
        init_colors,
        aabb_min,
        aabb_max,
        static_ae=static_ae,
        caption_ae=caption_ae,
        checkpoint_dir=out,
        compressor_steps=compressor_steps,
    )
    trainer.run_all()
    serviceio.save_checkpoint(trainer.engine_state(), out / "final.ckpt")
    trainer.write_loss_csv(out / "losses.csv")
    for stage, result in sorted(trainer.stage_results.items()):
        click.echo(
            f"stage {stage}: {len(result.losses)} iterations, "
            f"final loss {result.final_loss:.6f}"
        )
    click.echo(f"checkpoint -> {out / 'final.ckpt'}")


@main.command()
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--bundle", "bundle_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--text", required=True)
@click.option(
    "--mode",
    type=click.Choice(["timeAgnostic", "timeSensitive"]),
    default="timeSensitive",
    show_default=True,
)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), default=None,
              help="Write the full result (RLE masks included) as JSON.")
def query(checkpoint: str, bundle_dir: str, text: str, mode: str, out_path: str | None):
    """Answer one open-vocabulary query against a trained checkpoint."""
    from .serviceio import rle_encode

    _, _, engine = _load_engine(checkpoint, bundle_dir)
    request = engine.build_request(text, mode)
    try:
        result = engine.query(request)
    except ValueError as exc:
        raise click.ClickException(str(exc))
    payload = {
        "text": text,
        "mode": result.mode,
        "level": result.level,
        "threshold": result.threshold,
        "selectedFrames": result.selected_frames,
        "scores": [result.scores[f] for f in request.frames],
        "maskAreas": [int(result.masks[f].sum()) for f in request.frames],
    }
    if out_path is not None:
        payload["masks"] = [rle_encode(result.masks[f]) for f in request.frames]
        Path(out_path).write_text(json.dumps(payload))
        click.echo(f"result -> {out_path}")
    click.echo(json.dumps({k: v for k, v in payload.items() if k != "masks"}, indent=2))


@main.command(name="eval")
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--bundle", "bundle_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", "out_path", type=click.Path(dir_okay=False), default=None)
def eval_cmd(checkpoint: str, bundle_dir: str, out_path: str | None):
    """Score the checkpoint against the bundle's ground-truth queries."""
    from .metrics import evaluate_queries, format_report, write_report_csv

    _, bundle, engine = _load_engine(checkpoint, bundle_dir)
    report = evaluate_queries(engine, bundle)
    click.echo(format_report(report))
    if out_path is not None:
        write_report_csv(report, out_path)
        click.echo(f"report -> {out_path}")


@main.command()
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--bundle", "bundle_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8000, show_default=True)
def serve(checkpoint: str, bundle_dir: str, host: str, port: int):
    """Serve the HTTP query API for a trained checkpoint."""
    import uvicorn

    from .server import make_app

    _, bundle, engine = _load_engine(checkpoint, bundle_dir)
    app = make_app(engine, bundle)
    click.echo(f"serving on http://{host}:{port}")
    uvicorn.run(app, host=host, port=port)


@main.command(name="export-pca")
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--bundle", "bundle_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
def export_pca(checkpoint: str, bundle_dir: str, out_dir: str):
    """Write shared-basis PCA visualizations of the dynamic features."""
    from PIL import Image

    _, _, engine = _load_engine(checkpoint, bundle_dir)
    images = engine.export_pca_visualization()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for f, image in enumerate(images):
        Image.fromarray(image).save(out / f"{f:05d}.png")
    click.echo(f"wrote {len(images)} PCA frames to {out}")


if __name__ == "__main__":
    sys.exit(main())
