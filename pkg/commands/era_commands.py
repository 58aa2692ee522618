"""
era - Localize affective regions and train the region decoder
"""

import os

import click
from flask.cli import AppGroup

from services.backbone import BackboneClient
from services.errors import EmoKgError
from services.image_io import load_image
from services.pipeline_service import build_resources
from services.region_service import LayerSet, localize, synthetic_blob_dataset, train_decoder

from .common import backend_choice, config_option, pipeline_config

era_cli = AppGroup("era", help="Emotion region localization commands.")


@era_cli.command("localize")
@click.argument("image", type=click.Path(exists=True, dir_okay=False), required=False)
@click.option("--image", "image_option", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Same as the IMAGE argument.")
@click.option("--backbone", default=None,
              help="'tiny', a backbone service URL, or a TOML config file with [era]/[clients] settings.")
@click.option("--out", type=click.Path(dir_okay=False), required=True, help="Mask PNG path.")
@click.option("--decoder", type=click.Path(exists=True, dir_okay=False), default=None, help="Decoder .npz file.")
@click.option("--threshold", type=float, default=None)
@click.option("--layers", "num_layers", type=int, default=None, help="Number of final layers to aggregate.")
@config_option
def localize_command(image, image_option, backbone, out, decoder, threshold, num_layers, config_path):
    """Write the binary affective mask of IMAGE to --out (plus a JSON sidecar)."""
    image = image or image_option
    if image is None:
        raise click.UsageError("Give an IMAGE or --image.")
    if backbone == "tiny":
        backbone = None
    backbone_file, overrides = backend_choice(backbone, "--backbone", "clients.backbone_endpoint")
    config = pipeline_config(backbone_file or config_path, **overrides, **{
        "era.decoder_path": os.path.abspath(decoder) if decoder else None,
        "era.threshold": threshold, "era.num_layers": num_layers,
    })
    try:
        config.validate()
        resources = build_resources(config)
        pixels = load_image(image)
        backbone_input = image if isinstance(resources.backbone, BackboneClient) else pixels
        mask = localize(backbone_input, resources.backbone, resources.decoder, resources.layers,
                        config.era.threshold, out_shape=pixels.shape[:2])
        mask.save(out)
    except EmoKgError as e:
        raise click.ClickException(str(e)) from e
    if mask.is_empty:
        click.echo("No region above threshold; mask is empty.")
    else:
        click.echo(f"box={list(mask.box)} pixels={int(mask.binary.sum())}")


@era_cli.command("train")
@click.option("--out", type=click.Path(dir_okay=False), required=True, help="Decoder .npz path.")
@click.option("--samples", type=int, default=32, show_default=True, help="Synthetic blob samples.")
@click.option("--steps", type=int, default=200, show_default=True)
@click.option("--lr", type=float, default=0.5, show_default=True)
@click.option("--hidden", type=int, default=16, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@config_option
def train(out, samples, steps, lr, hidden, seed, config_path):
    """Train a decoder on synthetic blob masks and save it to --out.

    Samples carry era.backbone_dim feature channels so the decoder loads
    straight into `era localize`.
    """
    config = pipeline_config(config_path)
    dataset = synthetic_blob_dataset(samples, dim=config.era.backbone_dim, seed=seed)
    try:
        params, trace = train_decoder(dataset, LayerSet((0,)), steps, lr, hidden=hidden, seed=seed)
    except EmoKgError as e:
        raise click.ClickException(str(e)) from e
    params.save(out)
    click.echo(f"loss {trace[0]:.6f} -> {trace[-1]:.6f} over {steps} steps")
