"""
Stubbing & Mocking tests for the external transports:
- services.lmm_client (HTTP and subprocess)
- services.providers (embedding, classifier, intensity and score clients)
"""

import json
import subprocess
from unittest.mock import Mock

import numpy as np
import pytest
import requests

from services import lmm_client as lmm
from services import providers
from services.errors import ClientError, ProviderError
from services.lmm_client import LmmClient, SubprocessLmmClient, make_lmm_client
from services.providers import (
    ClassifierClient, EmbeddingClient, HashEmbeddingProvider, IntensityClient, ScoreProvider,
    ZeroShotClassifier
)


def stub_response(payload):
    response = Mock()
    response.json.return_value = payload
    return response


# --- LmmClient ---

def test_lmm_client_posts_system_and_user(mocker):
    """
    Should send both messages as JSON and return the 'text' field.
    """
    post = mocker.patch.object(lmm.requests, "post", return_value=stub_response({"text": "a dim forest"}))

    client = LmmClient("http://lmm.local/v1", timeout=5, api_key="k")
    assert client.complete("sys", "usr") == "a dim forest"

    post.assert_called_once_with(
        "http://lmm.local/v1",
        json={"system": "sys", "user": "usr"},
        headers={"Authorization": "Bearer k"},
        timeout=5,
    )


def test_lmm_client_transport_failure(mocker):
    mocker.patch.object(lmm.requests, "post", side_effect=requests.ConnectionError("refused"))
    with pytest.raises(ClientError):
        LmmClient("http://lmm.local/v1").complete("sys", "usr")


def test_lmm_client_http_error(mocker):
    response = stub_response({})
    response.raise_for_status.side_effect = requests.HTTPError("503")
    mocker.patch.object(lmm.requests, "post", return_value=response)
    with pytest.raises(ClientError):
        LmmClient("http://lmm.local/v1").complete("sys", "usr")


def test_lmm_client_missing_text_field(mocker):
    mocker.patch.object(lmm.requests, "post", return_value=stub_response({"choices": []}))
    with pytest.raises(ClientError):
        LmmClient("http://lmm.local/v1").complete("sys", "usr")


# --- SubprocessLmmClient ---

def test_subprocess_client_writes_one_json_line(mocker):
    run = mocker.patch.object(lmm.subprocess, "run", return_value=Mock(stdout='{"text": "a pale cat"}\n'))

    client = SubprocessLmmClient(["lmm-server", "--stdio"], timeout=7)
    assert client.complete("sys", "usr") == "a pale cat"

    args, kwargs = run.call_args
    assert args == (["lmm-server", "--stdio"],)
    assert json.loads(kwargs["input"]) == {"system": "sys", "user": "usr"}
    assert kwargs["timeout"] == 7


@pytest.mark.parametrize("outcome", [
    {"side_effect": subprocess.TimeoutExpired("lmm-server", 7)},
    {"side_effect": FileNotFoundError("lmm-server")},
    {"return_value": Mock(stdout="")},
    {"return_value": Mock(stdout="not json\n")},
    {"return_value": Mock(stdout='{"label": "x"}\n')},
])
def test_subprocess_client_failures(mocker, outcome):
    mocker.patch.object(lmm.subprocess, "run", **outcome)
    with pytest.raises(ClientError):
        SubprocessLmmClient(["lmm-server"]).complete("sys", "usr")


def test_make_lmm_client_prefers_command():
    assert isinstance(make_lmm_client("http://x", ["cmd"]), SubprocessLmmClient)
    assert isinstance(make_lmm_client("http://x"), LmmClient)
    assert make_lmm_client(None) is None


# --- Provider clients ---

def test_embedding_client_text_and_image(mocker):
    post = mocker.patch.object(providers.requests, "post", return_value=stub_response({"embedding": [0.5, 1.5]}))
    client = EmbeddingClient("http://embed.local")

    assert np.array_equal(client.embed_text("dog"), np.array([0.5, 1.5]))
    assert np.array_equal(client.embed_image("/img.png"), np.array([0.5, 1.5]))
    assert [c.kwargs["json"] for c in post.call_args_list] == [{"text": "dog"}, {"image_path": "/img.png"}]


def test_embedding_client_needs_image_path():
    with pytest.raises(ProviderError):
        EmbeddingClient("http://embed.local").embed_image(np.zeros((4, 4, 3)))


def test_classifier_client(mocker):
    mocker.patch.object(providers.requests, "post", return_value=stub_response({"label": "fear", "scores": {}}))
    assert ClassifierClient("http://cls.local").classify("/img.png") == "fear"


def test_classifier_client_malformed_reply(mocker):
    mocker.patch.object(providers.requests, "post", return_value=stub_response({"scores": {}}))
    with pytest.raises(ProviderError):
        ClassifierClient("http://cls.local").classify("/img.png")


def test_intensity_client(mocker):
    post = mocker.patch.object(providers.requests, "post", return_value=stub_response({"confidence": 0.73}))
    assert IntensityClient("http://int.local").intensity("snarling", "fear") == 0.73
    assert post.call_args.kwargs["json"] == {"cue": "snarling", "emotion": "fear"}


def test_intensity_client_timeout(mocker):
    mocker.patch.object(providers.requests, "post", side_effect=requests.Timeout("slow"))
    with pytest.raises(ProviderError):
        IntensityClient("http://int.local").intensity("snarling", "fear")


def test_score_provider_keeps_known_columns(mocker):
    mocker.patch.object(providers.requests, "post",
                        return_value=stub_response({"aes_score": 5.5, "semantic_c": 0.8, "other": 1}))
    assert ScoreProvider("http://score.local").score("/img.png") == {"aes_score": 5.5, "semantic_c": 0.8}


# --- Offline stand-ins ---

def test_hash_embeddings_are_deterministic():
    a, b = HashEmbeddingProvider(dim=8), HashEmbeddingProvider(dim=8)
    assert np.array_equal(a.embed_text("Snarling "), b.embed_text("snarling"))
    assert not np.array_equal(a.embed_text("snarling"), a.embed_text("dim"))
    assert a.embed_image(np.full((20, 20, 3), 128, dtype=np.uint8)).shape == (8,)


def test_hash_image_embedding_tracks_similarity():
    provider = HashEmbeddingProvider(dim=16)
    rng = np.random.default_rng(0)
    base = rng.integers(0, 256, size=(32, 32, 3)).astype(np.uint8)
    close = np.clip(base.astype(int) + 3, 0, 255).astype(np.uint8)
    far = rng.integers(0, 256, size=(32, 32, 3)).astype(np.uint8)
    z = provider.embed_image(base)
    assert np.linalg.norm(z - provider.embed_image(close)) < np.linalg.norm(z - provider.embed_image(far))


def test_zero_shot_classifier_picks_most_similar_label():
    provider = Mock()
    provider.embed_text.side_effect = lambda label: {"fear": np.array([1.0, 0.0]),
                                                     "awe": np.array([0.0, 1.0])}[label]
    provider.embed_image.return_value = np.array([0.2, 0.9])

    classifier = ZeroShotClassifier(provider, labels=("fear", "awe"))

    assert classifier.classify("/img.png") == "awe"
    classifier.classify("/img.png")
    assert provider.embed_text.call_count == 2


def test_zero_shot_classifier_zero_image():
    provider = Mock()
    provider.embed_text.return_value = np.ones(2)
    provider.embed_image.return_value = np.zeros(2)
    with pytest.raises(ProviderError):
        ZeroShotClassifier(provider, labels=("fear",)).scores("/img.png")
