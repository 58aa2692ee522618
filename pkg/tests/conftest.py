import os, sys

PROJECT_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if PROJECT_ROOT not in sys.path:
    sys.path.insert(0, PROJECT_ROOT)

import numpy as np
import pytest

from config import PipelineConfig
from database import load_graph, write_json
from services.image_io import save_image
from services.kg_service import KnowledgeGraph
from tests.helpers import TOY_GRAPH_PATH, make_edge, make_node


@pytest.fixture
def forest_graph():
    """forest -CONTAINS-> dog -HAS_ATTR-> snarling -LEADS_TO-> fear, 2-d embeddings."""
    graph = KnowledgeGraph(dim=2)
    graph.add_node(make_node("forest", "scene", (1.0, 0.0)))
    graph.add_node(make_node("dog", "object", (0.0, 1.0)))
    graph.add_node(make_node("snarling", "attribute", (1.0, 1.0), prototype=(0.6, 0.8)))
    graph.add_node(make_node("fear", "emotion", (-1.0, 0.5)))
    graph.add_node(make_node("amusement", "emotion", (0.5, -1.0)))
    graph.add_edge(make_edge("forest", "CONTAINS", "dog"))
    graph.add_edge(make_edge("dog", "HAS_ATTR", "snarling", 0.9))
    graph.add_edge(make_edge("snarling", "LEADS_TO", "fear", 0.9))
    return graph


@pytest.fixture(scope="session")
def toy_graph():
    return load_graph(TOY_GRAPH_PATH)


@pytest.fixture
def toy_image(tmp_path):
    """A 32x32 RGB image: dark background with a bright 12x12 square."""
    rng = np.random.default_rng(7)
    pixels = rng.integers(20, 60, size=(32, 32, 3)).astype(np.uint8)
    pixels[10:22, 10:22] = 220
    path = tmp_path / "toy.png"
    save_image(str(path), pixels)
    return str(path)


@pytest.fixture
def forest_scene_file(tmp_path):
    path = tmp_path / "forest_scene.json"
    write_json(str(path), {
        "objects": [{"name": "dog", "attributes": []}, {"name": "tree", "attributes": []}],
        "scene": "forest",
        "o_prompt": "a dog and a tree in a forest",
    })
    return str(path)


@pytest.fixture
def offline_config(tmp_path):
    """Toy graph, analytic backends and a short schedule; artifacts under tmp_path."""
    return PipelineConfig().with_overrides(**{
        "kg.graph_path": TOY_GRAPH_PATH,
        "kg.dim": 8,
        "dsee.steps": 6,
        "dsee.harmonize_steps": 1,
        "dsee.latent_scale": 4,
        "run.output_dir": str(tmp_path / "runs"),
    })


@pytest.fixture
def app(offline_config):
    from app import create_app

    app = create_app(offline_config)
    app.config.update(TESTING=True)
    return app


@pytest.fixture
def client(app):
    return app.test_client()


@pytest.fixture
def runner(app):
    return app.test_cli_runner()
