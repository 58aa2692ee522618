"""
Tests for services.dsee_service and services.denoisers: DDIM inversion and
sampling, guidance, masked fusion, attention injection and the editing loop.
"""

from unittest.mock import Mock

import numpy as np
import pytest

from services import denoisers as denoiser_module
from services.denoisers import DenoiserClient, GaussianDenoiser, PixelCodec, ZeroDenoiser
from services.dsee_service import (
    AttentionInjection, EditConfig, LatentTrajectory, NoiseSchedule, ddim_step, edit, fuse,
    guided_eps, inject_attention, invert, mask_to_latent, sample
)
from services.errors import (
    LayerOutOfRange, NonFiniteLatent, OutOfRange, ShapeMismatch, StepOutOfRange
)


@pytest.fixture
def schedule():
    return NoiseSchedule.scaled_linear(T=10)


def left_half_mask(shape=(8, 8)):
    mask = np.zeros(shape)
    mask[:, : shape[1] // 2] = 1.0
    return mask


# --- Schedule and DDIM primitives ---

def test_scaled_linear_schedule(schedule):
    assert schedule.T == 10
    assert schedule.alphas_bar[0] == 1.0
    assert list(schedule.alphas_bar) == sorted(schedule.alphas_bar, reverse=True)
    assert schedule.timesteps[:3] == (0, 1, 101)
    assert schedule.alpha_bar_at(101) == schedule.alphas_bar[2]
    with pytest.raises(StepOutOfRange):
        schedule.alpha_bar_at(5)


@pytest.mark.parametrize("T, first, last", [(1, 1, 1), (999, 1, 999), (1000, 0, 999)])
def test_scaled_linear_stays_inside_training_range(T, first, last):
    schedule = NoiseSchedule.scaled_linear(T)
    assert schedule.T == T
    assert schedule.timesteps[1] == first
    assert schedule.timesteps[-1] == last
    assert len(set(schedule.timesteps)) == T + 1
    assert schedule.alpha_bar_at(schedule.timesteps[0]) == 1.0
    assert list(schedule.alphas_bar) == sorted(schedule.alphas_bar, reverse=True)


def test_scaled_linear_rejects_more_steps_than_training():
    with pytest.raises(StepOutOfRange):
        NoiseSchedule.scaled_linear(1001)


@pytest.mark.parametrize("alphas", [(0.9, 0.5), (1.0, 0.5, 0.7), (1.0, 0.0)])
def test_schedule_validation(alphas):
    with pytest.raises(OutOfRange):
        NoiseSchedule(alphas)


def test_ddim_step_bounds(schedule):
    x = np.ones((1, 2, 2))
    with pytest.raises(StepOutOfRange):
        ddim_step(x, x, 0, schedule, "denoise")
    with pytest.raises(StepOutOfRange):
        ddim_step(x, x, schedule.T, schedule, "invert")
    with pytest.raises(ShapeMismatch):
        ddim_step(x, np.ones((1, 2, 3)), 1, schedule)


def test_zero_denoiser_round_trip(schedule):
    """
    With a zero noise prediction, inversion followed by sampling returns x_0.
    """
    for seed in range(20):
        x_0 = np.random.default_rng(seed).normal(size=(4, 8, 8))
        inversion = invert(x_0, ZeroDenoiser(), schedule)
        assert len(inversion) == schedule.T + 1
        assert np.allclose(inversion.xT, np.sqrt(schedule.alphas_bar[-1]) * x_0, atol=1e-12)
        assert np.allclose(sample(inversion.xT, ZeroDenoiser(), schedule).x0, x_0, atol=1e-9)


def test_gaussian_round_trip_shrinks_by_closed_form(schedule):
    """
    For unit-variance data every step rotates by the angle between noise
    levels, so a round trip scales x_0 by the product of squared cosines.
    """
    denoiser = GaussianDenoiser(schedule, std=1.0)
    x_0 = np.random.default_rng(0).normal(size=(4, 8, 8))

    result = sample(invert(x_0, denoiser, schedule).xT, denoiser, schedule).x0

    phi = np.arccos(np.sqrt(schedule.alphas_bar))
    rho = np.prod(np.cos(np.diff(phi)) ** 2)
    assert np.allclose(result, rho * x_0, rtol=1e-9, atol=1e-12)


def test_broad_gaussian_round_trip_is_nearly_exact(schedule):
    denoiser = GaussianDenoiser(schedule, std=1e3)
    x_0 = np.random.default_rng(1).normal(size=(4, 8, 8))
    result = sample(invert(x_0, denoiser, schedule).xT, denoiser, schedule).x0
    assert np.linalg.norm(result - x_0) / np.linalg.norm(x_0) < 1e-3


def test_broad_gaussian_round_trip_on_random_instances(schedule):
    denoiser = GaussianDenoiser(schedule, std=1e3)
    rng = np.random.default_rng(21)
    for _ in range(20):
        shape = (int(rng.integers(1, 5)), int(rng.integers(2, 9)), int(rng.integers(2, 9)))
        x_0 = rng.normal(scale=float(rng.uniform(0.1, 10.0)), size=shape)
        result = sample(invert(x_0, denoiser, schedule).xT, denoiser, schedule).x0
        assert np.linalg.norm(result - x_0) / np.linalg.norm(x_0) < 1e-3


def test_non_finite_latent_reports_step(schedule):
    x_0 = np.zeros((1, 2, 2))
    x_0[0, 0, 0] = np.nan
    with pytest.raises(NonFiniteLatent) as exc:
        invert(x_0, ZeroDenoiser(), schedule)
    assert exc.value.t == 0


# --- Guidance ---

def test_guidance_cases(schedule):
    denoiser = GaussianDenoiser(schedule)
    x = np.random.default_rng(2).normal(size=(3, 4, 4))
    t = schedule.timesteps[5]
    empty = denoiser.predict(x, t, None).eps
    conditional = denoiser.predict(x, t, "a dim forest").eps

    assert np.array_equal(guided_eps(denoiser, x, t, "a dim forest", 0.0), empty)
    assert np.array_equal(guided_eps(denoiser, x, t, "", 7.5), empty)
    assert np.array_equal(guided_eps(denoiser, x, t, "a dim forest", 1.0), conditional)
    assert np.allclose(guided_eps(denoiser, x, t, "a dim forest", 3.0), empty + 3.0 * (conditional - empty))
    with pytest.raises(OutOfRange):
        guided_eps(denoiser, x, t, "a dim forest", -1.0)


# --- Fusion and injection ---

def test_fuse_selects_by_mask():
    edit_raw, rec_raw = np.full((2, 2, 2), 5.0), np.full((2, 2, 2), -1.0)
    mask = np.array([[1.0, 0.0], [0.0, 1.0]])
    fused = fuse(edit_raw, rec_raw, mask)
    assert fused[:, 0, 0].tolist() == [5.0, 5.0]
    assert fused[:, 0, 1].tolist() == [-1.0, -1.0]
    with pytest.raises(ShapeMismatch):
        fuse(edit_raw, rec_raw, np.ones((3, 3)))


def test_injection_identity_and_doubling():
    features = {0: np.random.default_rng(3).normal(size=(3, 4, 4))}
    assert inject_attention({0: np.ones((4, 4))}, 0.0, [0], features) is features
    doubled = inject_attention({0: np.ones((8, 8))}, 1.0, [0], features)
    assert np.allclose(doubled[0], 2.0 * features[0])
    with pytest.raises(LayerOutOfRange):
        inject_attention({0: np.ones((4, 4))}, 1.0, [3], features)


def test_mask_to_latent_binary_and_soft():
    mask = np.zeros((4, 4))
    mask[0, 0] = 1.0
    assert mask_to_latent(mask, (2, 2)).tolist() == [[0.0, 0.0], [0.0, 0.0]]
    assert mask_to_latent(mask, (2, 2), soft=True)[0, 0] == pytest.approx(0.25)


# --- edit ---

def test_background_follows_reconstruction_at_every_step(schedule):
    denoiser = GaussianDenoiser(schedule)
    x_0 = np.random.default_rng(4).normal(size=(4, 8, 8))
    mask = left_half_mask()
    config = EditConfig(guidance_scale=7.5, lambda_att=0.5, harmonize_steps=2)

    result = edit(x_0, "a snarling dog", mask, denoiser, schedule, config)

    outside = mask == 0
    for i in range(config.harmonize_steps, schedule.T + 1):
        rec, ed = result.reconstruction.states[i], result.editing.states[i]
        assert np.max(np.abs(ed[:, outside] - rec[:, outside])) <= 1e-7, i
    assert not np.allclose(result.final[:, ~outside], result.reconstruction.x0[:, ~outside])


def test_background_preserved_for_random_masks_and_denoisers(schedule):
    """
    Outside a binary mask the editing path equals the reconstruction path
    exactly, from x_T down to the first harmonization step.
    """
    rng = np.random.default_rng(13)
    for trial in range(10):
        mask = (rng.random((8, 8)) < rng.uniform(0.2, 0.8)).astype(float)
        denoisers = [
            ZeroDenoiser(),
            GaussianDenoiser(schedule, std=float(rng.uniform(0.5, 2.0)), shift=float(rng.uniform(0.5, 3.0))),
        ]
        config = EditConfig(guidance_scale=float(rng.uniform(1.0, 9.0)), lambda_att=float(rng.uniform(0.0, 1.0)),
                            harmonize_steps=int(rng.integers(0, 4)))
        x_0 = rng.normal(size=(3, 8, 8))
        outside = mask == 0
        for denoiser in denoisers:
            result = edit(x_0, "a snarling dog", mask, denoiser, schedule, config)
            for i in range(config.harmonize_steps, schedule.T + 1):
                rec, ed = result.reconstruction.states[i], result.editing.states[i]
                assert np.array_equal(ed[:, outside], rec[:, outside]), (trial, type(denoiser).__name__, i)


def test_zero_injection_strength_matches_no_injection_layers(schedule):
    denoiser = GaussianDenoiser(schedule)
    x_0 = np.random.default_rng(8).normal(size=(2, 8, 8))
    mask = left_half_mask()
    off = edit(x_0, "a dim forest", mask, denoiser, schedule, EditConfig(lambda_att=0.0, harmonize_steps=2))
    no_layers = edit(x_0, "a dim forest", mask, denoiser, schedule,
                     EditConfig(lambda_att=0.5, harmonize_steps=2, injection_layers=()))
    on = edit(x_0, "a dim forest", mask, denoiser, schedule, EditConfig(lambda_att=0.5, harmonize_steps=2))
    assert np.array_equal(off.final, no_layers.final)
    for a, b in zip(off.editing.states, no_layers.editing.states):
        assert np.array_equal(a, b)
    assert not np.array_equal(off.final, on.final)


def test_empty_mask_returns_reconstruction(schedule):
    denoiser = GaussianDenoiser(schedule)
    x_0 = np.random.default_rng(5).normal(size=(4, 8, 8))
    result = edit(x_0, "a snarling dog", np.zeros((8, 8)), denoiser, schedule, EditConfig(harmonize_steps=0))
    assert np.array_equal(result.final, result.reconstruction.x0)


def test_full_mask_without_injection_reduces_to_sampling(schedule):
    denoiser = GaussianDenoiser(schedule)
    x_0 = np.random.default_rng(6).normal(size=(4, 8, 8))
    config = EditConfig(guidance_scale=5.0, lambda_att=0.0, harmonize_steps=0)

    result = edit(x_0, "a snarling dog", np.ones((8, 8)), denoiser, schedule, config)
    expected = sample(result.inversion.xT, denoiser, schedule, "a snarling dog", 5.0)

    for got, want in zip(result.editing.states, expected.states):
        assert np.allclose(got, want, atol=1e-12)


def test_edit_accepts_prompt_objects(schedule):
    prompt = Mock()
    prompt.text = "a snarling dog"
    denoiser = GaussianDenoiser(schedule)
    x_0 = np.random.default_rng(7).normal(size=(2, 8, 8))
    a = edit(x_0, prompt, left_half_mask(), denoiser, schedule, EditConfig(harmonize_steps=1))
    b = edit(x_0, "a snarling dog", left_half_mask(), denoiser, schedule, EditConfig(harmonize_steps=1))
    assert np.array_equal(a.final, b.final)


@pytest.mark.parametrize("config", [
    EditConfig(harmonize_steps=10),
    EditConfig(guidance_scale=-1.0),
    EditConfig(lambda_att=-0.5),
])
def test_edit_config_validation(schedule, config):
    with pytest.raises(OutOfRange):
        edit(np.zeros((1, 8, 8)), "x", np.ones((8, 8)), ZeroDenoiser(), schedule, config)


def test_trajectories_save_and_load(tmp_path, schedule):
    result = edit(np.ones((2, 4, 4)), "a dim forest", np.ones((4, 4)), GaussianDenoiser(schedule), schedule,
                  EditConfig(harmonize_steps=1))
    paths = result.save_trajectories(str(tmp_path))
    assert [p.rsplit("/", 1)[-1] for p in paths] == ["inversion.npz", "reconstruction.npz", "editing.npz"]
    loaded = LatentTrajectory.load(paths[2])
    assert loaded.path_kind == "editing"
    assert len(loaded) == schedule.T + 1
    assert np.array_equal(loaded.x0, result.final)


def test_edit_config_to_dict():
    assert EditConfig(injection_layers=(1, 2)).to_dict() == {
        "guidance_scale": 7.5, "lambda_att": 0.5, "harmonize_steps": 5,
        "injection_layers": [1, 2], "soft_mask": False,
    }


# --- Codec and remote denoiser ---

def test_pixel_codec_round_trips_flat_images():
    codec = PixelCodec(scale=4)
    image = np.full((32, 32, 3), 100, dtype=np.uint8)
    latent = codec.encode(image)
    assert latent.shape == (3, 8, 8)
    assert np.array_equal(codec.decode(latent, image.shape), image)


def test_denoiser_client_sends_injection(mocker, schedule):
    reply = Mock()
    reply.json.return_value = {"eps": np.zeros((1, 2, 2)).tolist(), "attn": {"0": [[1.0, 0.0], [0.0, 0.0]]}}
    post = mocker.patch.object(denoiser_module.requests, "post", return_value=reply)
    injection = AttentionInjection({0: np.ones((2, 2))}, 0.5, (0,))

    out = DenoiserClient("http://ldm.local").predict(np.ones((1, 2, 2)), 21, "a dim forest", True, injection)

    payload = post.call_args.kwargs["json"]
    assert payload["t"] == 21
    assert payload["inject"] == {"lambda_att": 0.5, "layers": [0], "attn": {"0": [[1.0, 1.0], [1.0, 1.0]]}}
    assert out.attn[0].shape == (2, 2)


def test_denoiser_client_shape_check(mocker):
    reply = Mock()
    reply.json.return_value = {"eps": [[0.0]]}
    mocker.patch.object(denoiser_module.requests, "post", return_value=reply)
    with pytest.raises(ShapeMismatch):
        DenoiserClient("http://ldm.local").predict(np.ones((1, 2, 2)), 1)
