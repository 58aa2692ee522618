"""
eval - Evaluation reports
"""

import click
from flask.cli import AppGroup

from services.errors import EmoKgError
from services.metrics_service import report
from services.providers import ScoreProvider, make_classifier, make_embedding_provider

from .common import backend_choice, config_option, pipeline_config

eval_cli = AppGroup("eval", help="Evaluation commands.")


@eval_cli.command("report")
@click.option("--manifest", type=click.Path(exists=True, dir_okay=False), required=True,
              help="CSV with source_path, edited_path, target_emotion, method.")
@click.option("--out", type=click.Path(file_okay=False), required=True, help="Report directory.")
@click.option("--provider", default=None,
              help="'hash', an embedding service URL, or a TOML config file with [clients] endpoints.")
@click.option("--workers", type=int, default=None)
@config_option
def report_command(manifest, out, provider, workers, config_path):
    """Score every manifest row and write items.csv and report.md to --out.

    An optional ablation column splits each method into its variants.
    """
    if provider == "hash":
        provider = None
    provider_file, overrides = backend_choice(provider, "--provider", "clients.embedding_endpoint")
    config = pipeline_config(provider_file or config_path, **overrides, **{"run.workers": workers})
    clients = config.clients
    provider = make_embedding_provider(clients.embedding_endpoint, dim=config.kg.dim, seed=config.run.seed)
    classifier = make_classifier(clients.classifier_endpoint, provider, config.kg.emotion_labels)
    scores = ScoreProvider(clients.score_endpoint, clients.timeout) if clients.score_endpoint else None
    try:
        result = report(manifest, provider, classifier, out_dir=out, score_provider=scores,
                        labels=config.kg.emotion_labels, workers=config.run.workers, progress=True)
    except EmoKgError as e:
        raise click.ClickException(str(e)) from e
    click.echo(result.to_markdown())
