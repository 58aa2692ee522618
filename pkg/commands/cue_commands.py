"""
cues - Select emotion cues and compile the editing prompt
"""

import click
from flask.cli import AppGroup

from database import read_json, write_json
from services.cue_service import SceneStructure, calibrate, compile_prompt, filter_bank, select_cues
from services.errors import EmoKgError
from services.pipeline_service import build_resources
from services.retrieval_service import (
    RetrievalQuery, load_subgraph, resolve_starts, resolve_targets, retrieve_subgraph
)

from .common import config_option, pipeline_config, read_embedding, split_values

cue_cli = AppGroup("cues", help="Emotion cue commands.")


@cue_cli.command("select")
@click.argument("image", type=click.Path(exists=True, dir_okay=False), required=False)
@click.option("--emotion", "--target", "targets", multiple=True, required=True,
              help="Target emotion; repeatable or comma-separated.")
@click.option("--subgraph", "subgraph_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Subgraph JSON written by 'kg query'; skips retrieval.")
@click.option("--image-emb", "embedding_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Image embedding JSON (a list, or an object with an 'embedding' list).")
@click.option("--scene", "scene_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Scene structure JSON; derived from the subgraph starts when omitted.")
@click.option("--lambda", "--lam", "lam", type=float, default=None)
@click.option("--k", "--K", "top_k", type=int, default=None, help="Cues kept after ranking.")
@click.option("--tau", type=float, default=None)
@click.option("--mode", type=click.Choice(["template", "lmm_client"]), default=None)
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Write the cue report JSON here.")
@config_option
def select(image, targets, subgraph_path, embedding_path, scene_path, lam, top_k, tau, mode, out, config_path):
    """Score, filter and compile cues for IMAGE or a precomputed image embedding.

    Without --subgraph the paths are retrieved from the configured graph,
    which needs --scene.
    """
    if image is None and embedding_path is None:
        raise click.UsageError("Give an IMAGE or --image-emb.")
    if subgraph_path is None and scene_path is None:
        raise click.UsageError("Give --subgraph or --scene.")
    targets = split_values(targets)
    config = pipeline_config(config_path, **{
        "cues.lam": lam, "cues.K": top_k, "cues.tau": tau, "cues.mode": mode,
    })
    try:
        config.validate()
        resources = build_resources(config)
        if subgraph_path:
            graph, subgraph = load_subgraph(subgraph_path)
        else:
            graph = resources.graph
        if scene_path:
            scene = SceneStructure.from_dict(read_json(scene_path))
        else:
            scene = SceneStructure.from_subgraph(graph, subgraph)
        if not subgraph_path:
            query = RetrievalQuery(
                tuple(resolve_starts(graph, scene.start_names)), tuple(resolve_targets(graph, targets)), config.kg.k
            )
            subgraph = retrieve_subgraph(graph, query)
        embedding = read_embedding(embedding_path) if embedding_path else resources.provider.embed_image(image)
        pool = select_cues(graph, subgraph, embedding, targets,
                           config.cues.lam, config.cues.K, intensity=resources.intensity,
                           lexicon=resources.lexicon)
        pool = calibrate(pool, scene, resources.rules)
        bank = filter_bank(pool, targets, config.cues.tau, scene, resources.rules)
        prompt = compile_prompt(bank, scene, targets, config.cues.mode, resources.lmm_client)
    except (EmoKgError, ValueError, KeyError) as e:
        raise click.ClickException(str(e)) from e

    payload = {"pool": [c.to_dict() for c in pool.cues], "bank": bank.to_dict(), "prompt": prompt.to_dict()}
    if out:
        write_json(out, payload)
    click.echo(prompt.text)
