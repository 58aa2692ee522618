"""
Tests for the flask CLI groups, through app.test_cli_runner().
"""

import json
import os
from unittest.mock import Mock

import numpy as np
import pytest

from commands import eval_commands
from database import load_graph, read_json, write_json
from services.image_io import save_image
from services.kg_service import MIKELS_EMOTIONS
from services.providers import HashEmbeddingProvider
from services.region_service import AffectiveMask, DecoderParams
from tests.helpers import TOY_GRAPH_PATH


@pytest.fixture
def full_mask_decoder(tmp_path):
    """A decoder whose bias alone clears any threshold."""
    params = DecoderParams.zeros(32, (1, 1))
    params.b2[0] = 10.0
    return params.save(str(tmp_path / "full.npz"))


# --- kg ---

def test_kg_build_fills_missing_embeddings(runner, tmp_path):
    source = tmp_path / "source.jsonl"
    records = [
        {"kind": "node", "id": "forest", "type": "scene", "text": "forest"},
        {"kind": "node", "id": "dog", "type": "object", "text": "dog"},
        {"kind": "edge", "head": "forest", "rel": "CONTAINS", "tail": "dog"},
    ]
    source.write_text("\n".join(json.dumps(r) for r in records) + "\n", encoding="utf-8")
    output = str(tmp_path / "graph.jsonl")

    result = runner.invoke(args=["kg", "build", str(source), output])

    assert result.exit_code == 0, result.output
    assert "scene: 1" in result.output
    assert "CONTAINS: 1" in result.output
    graph = load_graph(output)
    assert graph.dim == 8
    assert len(graph.node("dog").embedding) == 8


def test_kg_build_reports_the_bad_line(runner, tmp_path):
    source = tmp_path / "source.jsonl"
    source.write_text('{"kind": "node", "id": "forest", "type": "scene", "text": "forest"}\nnot json\n',
                      encoding="utf-8")
    result = runner.invoke(args=["kg", "build", str(source), str(tmp_path / "graph.jsonl")])
    assert result.exit_code == 1
    assert "line 2" in result.output


def test_kg_query_prints_the_subgraph(runner):
    result = runner.invoke(args=["kg", "query", "--start", "forest", "--target", "fear"])
    assert result.exit_code == 0, result.output
    data = json.loads(result.output)
    assert len(data["paths"]) == 5
    assert data["dim"] == 8


def test_kg_query_writes_to_file(runner, tmp_path):
    out = str(tmp_path / "subgraph.json")
    result = runner.invoke(args=["kg", "query", "--start", "forest", "--target", "fear", "--out", out])
    assert result.exit_code == 0, result.output
    assert "Wrote 5 paths" in result.output
    assert len(read_json(out)["paths"]) == 5


def test_kg_query_unknown_target(runner):
    result = runner.invoke(args=["kg", "query", "--start", "forest", "--target", "bliss"])
    assert result.exit_code == 1
    assert "Error" in result.output


def test_kg_query_comma_lists_match_repeated_flags(runner, tmp_path):
    listed = str(tmp_path / "listed.json")
    repeated = str(tmp_path / "repeated.json")
    result = runner.invoke(args=["kg", "query", "--graph", TOY_GRAPH_PATH, "--start", "forest,dog",
                                 "--emotion", "fear", "--k", "5", "--out", listed])
    assert result.exit_code == 0, result.output
    runner.invoke(args=["kg", "query", "--start", "forest", "--start", "dog", "--target", "fear", "--out", repeated])

    data = read_json(listed)
    assert data == read_json(repeated)
    starts = {path["nodes"][0] for path in data["paths"]}
    assert {"forest", "dog"} <= starts


def test_kg_query_missing_graph_file(runner, tmp_path):
    result = runner.invoke(args=["kg", "query", "--graph", str(tmp_path / "none.jsonl"),
                                 "--start", "forest", "--emotion", "fear"])
    assert result.exit_code == 2


def test_missing_config_file(runner, tmp_path):
    result = runner.invoke(args=["kg", "query", "--start", "forest", "--target", "fear",
                                 "--config", str(tmp_path / "missing.toml")])
    assert result.exit_code == 1


# --- era ---

def test_era_localize_full_mask(runner, tmp_path, toy_image, full_mask_decoder):
    out = str(tmp_path / "mask.png")
    result = runner.invoke(args=["era", "localize", toy_image, "--out", out, "--decoder", full_mask_decoder])
    assert result.exit_code == 0, result.output
    assert "box=[0, 0, 32, 32] pixels=1024" in result.output
    assert AffectiveMask.load(out).box == (0, 0, 32, 32)


def test_era_train_then_localize(runner, tmp_path, toy_image):
    decoder = str(tmp_path / "decoder.npz")
    result = runner.invoke(args=["era", "train", "--out", decoder, "--samples", "4", "--steps", "5"])
    assert result.exit_code == 0, result.output
    assert "over 5 steps" in result.output
    assert DecoderParams.load(decoder).w1.shape[0] == 32

    result = runner.invoke(args=["era", "localize", toy_image, "--out", str(tmp_path / "mask.png"),
                                 "--decoder", decoder])
    assert result.exit_code == 0, result.output
    assert os.path.exists(tmp_path / "mask.png")


def test_era_localize_rejects_bad_threshold(runner, tmp_path, toy_image):
    result = runner.invoke(args=["era", "localize", toy_image, "--out", str(tmp_path / "mask.png"),
                                 "--threshold", "1.5"])
    assert result.exit_code == 1


def test_era_localize_with_image_and_backbone_flags(runner, tmp_path, toy_image, full_mask_decoder):
    out = str(tmp_path / "mask.png")
    result = runner.invoke(args=["era", "localize", "--image", toy_image, "--backbone", "tiny",
                                 "--threshold", "0.5", "--out", out, "--decoder", full_mask_decoder])
    assert result.exit_code == 0, result.output
    assert AffectiveMask.load(out).box == (0, 0, 32, 32)


def test_era_localize_backbone_from_config_file(runner, tmp_path, toy_image, full_mask_decoder):
    config = tmp_path / "backbone.toml"
    config.write_text(f'[kg]\ngraph_path = "{TOY_GRAPH_PATH}"\ndim = 8\n\n[era]\nthreshold = 0.9\n', encoding="utf-8")
    out = str(tmp_path / "mask.png")
    result = runner.invoke(args=["era", "localize", "--image", toy_image, "--backbone", str(config),
                                 "--out", out, "--decoder", full_mask_decoder])
    assert result.exit_code == 0, result.output
    assert json.loads((tmp_path / "mask.json").read_text(encoding="utf-8"))["threshold"] == 0.9


@pytest.mark.parametrize("args", [
    ["--backbone", "resnet"],
    [],
])
def test_era_localize_usage_errors(runner, tmp_path, toy_image, args):
    image = [] if not args else ["--image", toy_image]
    result = runner.invoke(args=["era", "localize", *image, *args, "--out", str(tmp_path / "mask.png")])
    assert result.exit_code == 2


# --- cues ---

def test_cues_select_prints_the_prompt(runner, tmp_path, toy_image, forest_scene_file):
    out = str(tmp_path / "cues.json")
    result = runner.invoke(args=["cues", "select", toy_image, "--target", "fear",
                                 "--scene", forest_scene_file, "--tau", "0.7", "--out", out])
    assert result.exit_code == 0, result.output
    report = read_json(out)
    assert result.output.strip() == report["prompt"]["text"]
    assert "fear" not in report["prompt"]["text"].lower()
    assert [r["reason"] for r in report["bank"]["rejected"]] == ["below_tau"]


def test_cues_select_unknown_scene_object(runner, tmp_path, toy_image):
    scene = str(tmp_path / "scene.json")
    write_json(scene, {"objects": [{"name": "unicorn"}]})
    result = runner.invoke(args=["cues", "select", toy_image, "--target", "fear", "--scene", scene])
    assert result.exit_code == 1


@pytest.fixture
def stored_inputs(runner, tmp_path, toy_image):
    """A subgraph from 'kg query' and the toy image's embedding, as the offline provider computes it."""
    subgraph = str(tmp_path / "sg.json")
    result = runner.invoke(args=["kg", "query", "--start", "forest,dog,tree", "--emotion", "fear", "--out", subgraph])
    assert result.exit_code == 0, result.output
    embedding = str(tmp_path / "img.json")
    write_json(embedding, HashEmbeddingProvider(dim=8, seed=0).embed_image(toy_image).tolist())
    return subgraph, embedding


def test_cues_select_from_stored_subgraph_matches_live_retrieval(runner, toy_image, forest_scene_file,
                                                                 stored_inputs):
    subgraph, embedding = stored_inputs
    live = runner.invoke(args=["cues", "select", toy_image, "--target", "fear", "--scene", forest_scene_file,
                               "--tau", "0.7"])
    stored = runner.invoke(args=["cues", "select", "--subgraph", subgraph, "--image-emb", embedding,
                                 "--emotion", "fear", "--lambda", "0.5", "--k", "15", "--tau", "0.7",
                                 "--scene", forest_scene_file])
    assert live.exit_code == 0, live.output
    assert stored.exit_code == 0, stored.output
    assert stored.output == live.output


def test_cues_select_derives_the_scene_from_the_subgraph(runner, tmp_path, stored_inputs):
    subgraph, embedding = stored_inputs
    out = str(tmp_path / "cues.json")
    result = runner.invoke(args=["cues", "select", "--subgraph", subgraph, "--image-emb", embedding,
                                 "--emotion", "fear", "--tau", "0.7", "--out", out])
    assert result.exit_code == 0, result.output
    assert "fear" not in read_json(out)["prompt"]["text"].lower()


@pytest.mark.parametrize("args", [
    ["--emotion", "fear"],
    ["--emotion", "fear", "--image-emb", "EMB"],
])
def test_cues_select_usage_errors(runner, stored_inputs, args):
    _, embedding = stored_inputs
    result = runner.invoke(args=["cues", "select", *[embedding if a == "EMB" else a for a in args]])
    assert result.exit_code == 2


def test_cues_select_rejects_a_non_vector_embedding(runner, tmp_path, stored_inputs):
    subgraph, _ = stored_inputs
    embedding = str(tmp_path / "bad.json")
    write_json(embedding, {"embedding": [[1.0, 2.0]]})
    result = runner.invoke(args=["cues", "select", "--subgraph", subgraph, "--image-emb", embedding,
                                 "--emotion", "fear"])
    assert result.exit_code == 1


# --- edit ---

def test_edit_run_from_cue_report(runner, tmp_path, toy_image, forest_scene_file, full_mask_decoder):
    mask = str(tmp_path / "mask.png")
    cues = str(tmp_path / "cues.json")
    edited = str(tmp_path / "edited.png")
    runner.invoke(args=["era", "localize", toy_image, "--out", mask, "--decoder", full_mask_decoder])
    runner.invoke(args=["cues", "select", toy_image, "--target", "fear", "--scene", forest_scene_file,
                        "--out", cues])

    result = runner.invoke(args=["edit", "run", toy_image, "--mask", mask, "--prompt-file", cues,
                                 "--out", edited, "--trajectories", str(tmp_path / "traj")])

    assert result.exit_code == 0, result.output
    assert f"Wrote {edited}" in result.output
    assert os.path.exists(tmp_path / "traj" / "editing.npz")


def test_edit_run_rejects_bad_harmonize(runner, tmp_path, toy_image, full_mask_decoder):
    mask = str(tmp_path / "mask.png")
    runner.invoke(args=["era", "localize", toy_image, "--out", mask, "--decoder", full_mask_decoder])
    result = runner.invoke(args=["edit", "run", toy_image, "--mask", mask, "--prompt", "a dim forest",
                                 "--out", str(tmp_path / "edited.png"), "--harmonize", "99"])
    assert result.exit_code == 1


def test_edit_run_with_documented_flags(runner, tmp_path, toy_image, forest_scene_file, full_mask_decoder):
    mask = str(tmp_path / "mask.png")
    prompt = str(tmp_path / "prompt.json")
    edited = str(tmp_path / "edited.png")
    runner.invoke(args=["era", "localize", toy_image, "--out", mask, "--decoder", full_mask_decoder])
    write_json(prompt, {"text": "a dog under a dim sky", "evidence": [], "target_emotions": ["fear"]})

    result = runner.invoke(args=["edit", "run", "--image", toy_image, "--mask", mask, "--prompt", prompt,
                                 "--backend", "gaussian", "--steps", "4", "--w", "7.5", "--lambda-att", "0.5",
                                 "--out", edited, "--dump-trajectory", str(tmp_path / "traj")])

    assert result.exit_code == 0, result.output
    assert os.path.exists(edited)
    assert os.path.exists(tmp_path / "traj" / "inversion.npz")


def test_edit_run_backend_from_config_file(runner, tmp_path, toy_image, full_mask_decoder):
    mask = str(tmp_path / "mask.png")
    runner.invoke(args=["era", "localize", toy_image, "--out", mask, "--decoder", full_mask_decoder])
    config = tmp_path / "backend.toml"
    config.write_text(f'[kg]\ngraph_path = "{TOY_GRAPH_PATH}"\ndim = 8\n\n[dsee]\nbackend = "zero"\nsteps = 3\n'
                      'harmonize_steps = 1\n', encoding="utf-8")

    result = runner.invoke(args=["edit", "run", "--image", toy_image, "--mask", mask, "--prompt", "a dim forest",
                                 "--backend", str(config), "--out", str(tmp_path / "edited.png")])

    assert result.exit_code == 0, result.output


def test_edit_run_unknown_backend(runner, tmp_path, toy_image, full_mask_decoder):
    mask = str(tmp_path / "mask.png")
    runner.invoke(args=["era", "localize", toy_image, "--out", mask, "--decoder", full_mask_decoder])
    result = runner.invoke(args=["edit", "run", "--image", toy_image, "--mask", mask, "--prompt", "a dim forest",
                                 "--backend", "ddpm", "--out", str(tmp_path / "edited.png")])
    assert result.exit_code == 2
    assert "--backend" in result.output


# --- eval ---

@pytest.fixture
def eval_manifest(tmp_path):
    pixels = np.random.default_rng(0).integers(0, 256, size=(32, 32, 3)).astype(np.uint8)
    save_image(str(tmp_path / "src.png"), pixels)
    save_image(str(tmp_path / "edit.png"), pixels)
    manifest = tmp_path / "manifest.csv"
    manifest.write_text("source_path,edited_path,target_emotion,method\nsrc.png,edit.png,awe,ours\n",
                        encoding="utf-8")
    return str(manifest)


@pytest.fixture
def embedding_factory(mocker):
    provider = Mock()
    provider.embed_text.side_effect = lambda label: np.eye(8)[MIKELS_EMOTIONS.index(label)]
    provider.embed_image.return_value = np.eye(8)[1]
    return mocker.patch.object(eval_commands, "make_embedding_provider", return_value=provider)


def test_eval_report(runner, tmp_path, eval_manifest, embedding_factory):
    result = runner.invoke(args=["eval", "report", "--manifest", eval_manifest, "--out", str(tmp_path / "out")])

    assert result.exit_code == 0, result.output
    assert "ours" in result.output
    assert os.path.exists(tmp_path / "out" / "report.md")


@pytest.mark.parametrize("provider, endpoint", [
    ("hash", None),
    ("http://embeddings.local/embed", "http://embeddings.local/embed"),
])
def test_eval_report_provider_flag(runner, tmp_path, eval_manifest, embedding_factory, provider, endpoint):
    result = runner.invoke(args=["eval", "report", "--manifest", eval_manifest, "--provider", provider,
                                 "--out", str(tmp_path / "out")])
    assert result.exit_code == 0, result.output
    assert embedding_factory.call_args[0][0] == endpoint


def test_eval_report_provider_from_config_file(runner, tmp_path, eval_manifest, embedding_factory):
    config = tmp_path / "provider.toml"
    config.write_text('[kg]\ndim = 8\n\n[clients]\nembedding_endpoint = "http://from-file/embed"\n', encoding="utf-8")
    result = runner.invoke(args=["eval", "report", "--manifest", eval_manifest, "--provider", str(config),
                                 "--out", str(tmp_path / "out")])
    assert result.exit_code == 0, result.output
    assert embedding_factory.call_args[0][0] == "http://from-file/embed"


# --- pipeline ---

def test_pipeline_run_prints_the_record(runner, toy_image, forest_scene_file):
    result = runner.invoke(args=["pipeline", "run", toy_image, "--target", "fear",
                                 "--scene", forest_scene_file, "--run-name", "cli", "--no-dsee"])
    assert result.exit_code == 0, result.output
    record = json.loads(result.output)
    assert record["status"] == "ok"
    assert record["edit"] is None


def test_pipeline_run_stage_failure(runner, tmp_path, toy_image):
    scene = str(tmp_path / "scene.json")
    write_json(scene, {"objects": [{"name": "unicorn"}]})
    result = runner.invoke(args=["pipeline", "run", toy_image, "--target", "fear", "--scene", scene])
    assert result.exit_code == 1
    assert "retrieval" in result.output


def test_pipeline_batch_exit_code(runner, tmp_path, toy_image, forest_scene_file):
    manifest = tmp_path / "batch.csv"
    manifest.write_text(
        "name,image_path,target_emotions,scene_path\n"
        "first,toy.png,fear,forest_scene.json\n"
        "missing,ghost.png,fear,forest_scene.json\n",
        encoding="utf-8",
    )
    result = runner.invoke(args=["pipeline", "batch", str(manifest), "--no-dsee", "--run-name", "cli"])
    assert result.exit_code == 1
    assert "1/2 succeeded" in result.output
    assert "FAILED missing" in result.output


def test_pipeline_replay(runner, tmp_path, toy_image, forest_scene_file):
    first = runner.invoke(args=["pipeline", "run", toy_image, "--target", "fear",
                                "--scene", forest_scene_file, "--no-dsee"])
    assert first.exit_code == 0, first.output
    runs = tmp_path / "runs"
    (run_dir,) = [os.path.join(runs, d) for d in os.listdir(runs)]

    result = runner.invoke(args=["pipeline", "replay", os.path.join(run_dir, "record.json"),
                                 "--out", str(tmp_path / "replayed")])

    assert result.exit_code == 0, result.output
    assert json.loads(result.output)["prompt"] == json.loads(first.output)["prompt"]


def test_pipeline_run_ablation_flag(runner, toy_image, forest_scene_file):
    result = runner.invoke(args=["pipeline", "run", toy_image, "--target", "fear", "--scene", forest_scene_file,
                                 "--ablation", "no_kg", "--no-dsee"])
    assert result.exit_code == 0, result.output
    record = json.loads(result.output)
    assert record["settings"]["ablation"] == "no_kg"
    assert record["retrieval"] is None
    assert record["prompt"]["text"] == "a dog and a tree in a forest"


def test_pipeline_run_unknown_ablation(runner, toy_image, forest_scene_file):
    result = runner.invoke(args=["pipeline", "run", toy_image, "--target", "fear", "--scene", forest_scene_file,
                                 "--ablation", "no_dsee"])
    assert result.exit_code == 2
