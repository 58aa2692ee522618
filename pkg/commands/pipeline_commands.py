"""
pipeline - End-to-end runs, batches and replays
"""

import click
from flask.cli import AppGroup

from config import ABLATIONS
from database import read_json
from services.cue_service import SceneStructure
from services.errors import EmoKgError, StageError
from services.pipeline_service import replay, run_batch, run_single

from .common import config_option, echo_json, pipeline_config

pipeline_cli = AppGroup("pipeline", help="End-to-end pipeline commands.")

seed_option = click.option("--seed", type=int, default=None)
output_option = click.option("--output-dir", type=click.Path(file_okay=False), default=None)
no_dsee_option = click.option("--no-dsee", is_flag=True, help="Stop after prompt compilation.")
ablation_option = click.option("--ablation", type=click.Choice(ABLATIONS), default=None,
                               help="Pipeline variant (default: full).")


@pipeline_cli.command("run")
@click.argument("image", type=click.Path(exists=True, dir_okay=False))
@click.option("--target", "targets", multiple=True, required=True, help="Target emotion (repeatable).")
@click.option("--scene", "scene_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--run-name", default=None)
@seed_option
@output_option
@no_dsee_option
@ablation_option
@config_option
def run(image, targets, scene_path, run_name, seed, output_dir, no_dsee, ablation, config_path):
    """Localize, retrieve, compile and edit one IMAGE."""
    config = pipeline_config(config_path, **{
        "run.seed": seed, "run.output_dir": output_dir, "run.run_name": run_name, "run.ablation": ablation,
    })
    try:
        scene = SceneStructure.from_dict(read_json(scene_path))
        record = run_single(image, targets, config, scene, run_dsee=not no_dsee)
    except StageError as e:
        raise click.ClickException(f"{e.stage}: {e.cause}") from e
    except (EmoKgError, ValueError, KeyError) as e:
        raise click.ClickException(str(e)) from e
    echo_json(record.to_dict())


@pipeline_cli.command("batch")
@click.argument("manifest", type=click.Path(exists=True, dir_okay=False))
@click.option("--run-name", default=None)
@click.option("--workers", type=int, default=None)
@seed_option
@output_option
@no_dsee_option
@ablation_option
@config_option
def batch(manifest, run_name, workers, seed, output_dir, no_dsee, ablation, config_path):
    """Run every row of MANIFEST; exits with status 1 when any item fails."""
    config = pipeline_config(config_path, **{
        "run.seed": seed, "run.output_dir": output_dir, "run.run_name": run_name, "run.workers": workers,
        "run.ablation": ablation,
    })
    try:
        result = run_batch(manifest, config, run_dsee=not no_dsee, progress=True)
    except EmoKgError as e:
        raise click.ClickException(str(e)) from e
    summary = result.summary
    click.echo(f"{summary['succeeded']}/{summary['total']} succeeded; artifacts in {result.run_dir}")
    for failure in result.failures:
        click.echo(f"FAILED {failure['name']}: {failure['error']}", err=True)
    if result.exit_code:
        click.get_current_context().exit(result.exit_code)


@pipeline_cli.command("replay")
@click.argument("record", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "item_dir", type=click.Path(file_okay=False), default=None)
@config_option
def replay_command(record, item_dir, config_path):
    """Re-run a stored RECORD with its stored settings."""
    config = pipeline_config(config_path)
    try:
        new_record = replay(record, config, item_dir=item_dir)
    except StageError as e:
        raise click.ClickException(f"{e.stage}: {e.cause}") from e
    except EmoKgError as e:
        raise click.ClickException(str(e)) from e
    echo_json(new_record.to_dict())
