"""
edit - Mask-guided dual-path editing
"""

import os

import click
from flask.cli import AppGroup

from database import read_json
from services.cue_service import EmotionPrompt
from services.dsee_service import EditConfig, edit
from services.errors import EmoKgError
from services.image_io import load_image, save_image
from services.pipeline_service import build_resources
from services.region_service import AffectiveMask

from .common import backend_choice, config_option, pipeline_config

edit_cli = AppGroup("edit", help="Image editing commands.")


@edit_cli.command("run")
@click.argument("image", type=click.Path(exists=True, dir_okay=False), required=False)
@click.option("--image", "image_option", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Same as the IMAGE argument.")
@click.option("--mask", "mask_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--prompt", "prompt_text", default=None,
              help="Editing prompt text, or a prompt JSON file.")
@click.option("--prompt-file", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Prompt JSON written by 'cues select' or a pipeline run.")
@click.option("--out", type=click.Path(dir_okay=False), required=True, help="Edited image path.")
@click.option("--dump-trajectory", "--trajectories", "trajectories", type=click.Path(file_okay=False),
              default=None, help="Directory for the latent trajectory dumps.")
@click.option("--steps", type=int, default=None)
@click.option("--w", "--guidance", "guidance", type=float, default=None, help="Classifier-free guidance scale.")
@click.option("--lambda-att", type=float, default=None)
@click.option("--harmonize", type=int, default=None)
@click.option("--backend", default=None,
              help="zero, gaussian, client, a denoiser service URL, or a TOML config file.")
@config_option
def run(image, image_option, mask_path, prompt_text, prompt_file, out, trajectories, steps, guidance,
        lambda_att, harmonize, backend, config_path):
    """Edit IMAGE inside the mask and keep everything outside it."""
    image = image or image_option
    if image is None:
        raise click.UsageError("Give an IMAGE or --image.")
    if prompt_text and os.path.isfile(prompt_text):
        prompt_file, prompt_text = prompt_text, None
    if prompt_file:
        data = read_json(prompt_file)
        prompt = EmotionPrompt.from_dict(data.get("prompt", data))
    else:
        prompt = prompt_text
    backend_file, overrides = backend_choice(
        backend, "--backend", "clients.denoiser_endpoint", ("zero", "gaussian", "client"), "dsee.backend"
    )
    config = pipeline_config(backend_file or config_path, **overrides, **{
        "dsee.steps": steps, "dsee.guidance_scale": guidance, "dsee.lambda_att": lambda_att,
        "dsee.harmonize_steps": harmonize,
    })
    try:
        config.validate()
        resources = build_resources(config)
        pixels = load_image(image)
        edit_config = EditConfig(
            guidance_scale=config.dsee.guidance_scale, lambda_att=config.dsee.lambda_att,
            harmonize_steps=config.dsee.harmonize_steps, soft_mask=config.dsee.soft_mask,
        )
        result = edit(resources.codec.encode(pixels), prompt, AffectiveMask.load(mask_path),
                      resources.denoiser, resources.schedule, edit_config)
    except EmoKgError as e:
        raise click.ClickException(str(e)) from e
    save_image(out, resources.codec.decode(result.final, pixels.shape[:2]))
    if trajectories:
        result.save_trajectories(trajectories)
    click.echo(f"Wrote {out}")
