"""
kg - Build and query the knowledge graph
"""

import os

import click
from flask.cli import AppGroup

from database import load_graph, read_records, replay_records, save_graph
from services.errors import EmoKgError
from services.providers import make_embedding_provider
from services.retrieval_service import (
    RetrievalQuery, resolve_starts, resolve_targets, retrieve_subgraph, save_subgraph, subgraph_to_dict
)

from .common import config_option, echo_json, pipeline_config, split_values

kg_cli = AppGroup("kg", help="Knowledge graph commands.")


@kg_cli.command("build")
@click.argument("source", type=click.Path(exists=True, dir_okay=False))
@click.argument("output", type=click.Path(dir_okay=False))
@config_option
def build(source, output, config_path):
    """Validate JSONL records from SOURCE and write the canonical graph to OUTPUT.

    Node records without an embedding get one from the embedding provider.
    """
    config = pipeline_config(config_path)
    provider = make_embedding_provider(
        config.clients.embedding_endpoint, dim=config.kg.dim, seed=config.run.seed
    )
    try:
        graph = replay_records(
            read_records(source), emotion_labels=config.kg.emotion_labels,
            fill_embedding=provider.embed_text,
        ).freeze()
        save_graph(graph, output)
    except EmoKgError as e:
        raise click.ClickException(str(e)) from e
    for kind, count in graph.stats().items():
        click.echo(f"{kind}: {count}")


@kg_cli.command("query")
@click.option("--graph", "graph_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Graph JSONL (defaults to kg.graph_path).")
@click.option("--start", "starts", multiple=True, required=True,
              help="Scene/object name or id; repeatable or comma-separated.")
@click.option("--emotion", "--target", "targets", multiple=True, required=True,
              help="Target emotion label; repeatable or comma-separated.")
@click.option("--k", type=int, default=None, help="Neighbours used for path completion.")
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Write the subgraph JSON here.")
@config_option
def query(graph_path, starts, targets, k, out, config_path):
    """Retrieve reasoning paths from the start nodes to the target emotions."""
    config = pipeline_config(config_path, **{
        "kg.k": k, "kg.graph_path": os.path.abspath(graph_path) if graph_path else None,
    })
    try:
        config.validate()
        graph = load_graph(config.graph_path, emotion_labels=config.kg.emotion_labels)
        q = RetrievalQuery(
            tuple(resolve_starts(graph, split_values(starts))), tuple(resolve_targets(graph, split_values(targets))),
            config.kg.k,
        )
        subgraph = retrieve_subgraph(graph, q)
    except EmoKgError as e:
        raise click.ClickException(str(e)) from e
    if out:
        save_subgraph(graph, subgraph, out)
        click.echo(f"Wrote {len(subgraph)} paths to {out}")
    else:
        echo_json(subgraph_to_dict(graph, subgraph))
