import json
import math

import numpy as np
import pytest

from conftest import make_gbuffer, textured_image
from photoflow.backends import (
    ContractingMockBackend,
    IdentityCodec,
    KeyedRectangleSegmentation,
    MockConfig,
    NaNMockBackend,
)
from photoflow.engine import (
    EngineConfig,
    init_state,
    run_trajectory,
    save_trajectory,
    semantic_intensity,
    should_terminate,
    step,
)
from photoflow.errors import ZeroMask
from photoflow.masks import MaskParams


# ----------------------------------------------------------------------
# oracle

def intensity_oracle(x_next, x_prev, mask, normalized):
    """Triple loop over pixels: mask-weighted mean-channel L1."""
    h, w = x_next.shape[:2]
    total = 0.0
    mass = 0.0
    for r in range(h):
        for c in range(w):
            l1 = 0.0
            for k in range(3):
                l1 += abs(float(x_next[r, c, k]) - float(x_prev[r, c, k]))
            l1 /= 3.0
            weight = 1.0 if mask is None else float(mask[r, c])
            total += weight * l1
            mass += weight
    return total / mass if normalized else total


# ----------------------------------------------------------------------
# init / step

def test_init_state_black_canvas_and_seeded_latent(gbuffer32):
    a = init_state(gbuffer32, seed=5)
    b = init_state(gbuffer32, seed=5)
    c = init_state(gbuffer32, seed=6)
    assert np.all(a.image == 0.0)
    assert a.step == 0
    np.testing.assert_array_equal(a.latent, b.latent)
    assert np.abs(a.latent - c.latent).max() > 0
    assert a.condition.data.shape == (32, 32, 21)
    assert np.all(a.condition.data[:, :, 18:21] == 0.0)


def test_first_step_delta_is_the_output_itself(gbuffer32, contracting_backend):
    backend, target = contracting_backend
    state = init_state(gbuffer32, seed=0)
    nxt, dtv = step(state, backend, IdentityCodec(), gbuffer32)
    assert dtv.step == 0
    np.testing.assert_array_equal(dtv.delta, nxt.image)  # prev image is zero


def test_later_step_delta_is_consecutive_difference(gbuffer32,
                                                    contracting_backend):
    backend, target = contracting_backend
    codec = IdentityCodec()
    state = init_state(gbuffer32, seed=0)
    state, _ = step(state, backend, codec, gbuffer32)
    before = state.image.copy()
    state, dtv = step(state, backend, codec, gbuffer32)
    np.testing.assert_allclose(dtv.delta, state.image - before, atol=1e-7)
    assert dtv.step == 1 and state.step == 2


def test_step_image_clamped_delta_not(gbuffer32):
    class OvershootBackend:
        def generate(self, z, t, condition, mask=None, prompt=None):
            h, w = condition.data.shape[:2]
            return np.full((h, w, 3), 1.5, dtype=np.float32)

    state = init_state(gbuffer32, seed=0)
    nxt, dtv = step(state, OvershootBackend(), IdentityCodec(), gbuffer32)
    assert nxt.image.max() == 1.0
    assert dtv.delta.max() == pytest.approx(1.5)


# ----------------------------------------------------------------------
# semantic intensity

def test_intensity_matches_oracle_random():
    rng = np.random.default_rng(7)
    for _ in range(5):
        a = rng.random((6, 5, 3))
        b = rng.random((6, 5, 3))
        m = rng.random((6, 5))
        for normalized in (True, False):
            got = semantic_intensity(a, b, m, normalized=normalized)
            want = intensity_oracle(a, b, m, normalized)
            assert got == pytest.approx(want, abs=1e-12)


def test_intensity_closed_form_2x2():
    # residual mean-channel L1 is 1 everywhere; mask keeps half the pixels
    a = np.ones((2, 2, 3))
    b = np.zeros((2, 2, 3))
    m = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert semantic_intensity(a, b, m, normalized=False) == pytest.approx(2.0)
    assert semantic_intensity(a, b, m, normalized=True) == pytest.approx(1.0)
    half = np.array([[0.5, 0.0], [0.0, 0.5]])
    assert semantic_intensity(a, b, half, normalized=False) == pytest.approx(1.0)


def test_intensity_no_mask_is_plain_mean():
    a = np.full((4, 4, 3), 0.25)
    b = np.zeros((4, 4, 3))
    assert semantic_intensity(a, b, None) == pytest.approx(0.25)


def test_intensity_zero_mask_raises_when_normalized():
    a = np.ones((2, 2, 3))
    with pytest.raises(ZeroMask):
        semantic_intensity(a, np.zeros_like(a), np.zeros((2, 2)))
    assert semantic_intensity(a, np.zeros_like(a), np.zeros((2, 2)),
                              normalized=False) == 0.0


def test_should_terminate_strict_boundary():
    assert should_terminate(0.01, 0.01, 1, 12) == (False, "continue")
    assert should_terminate(0.0099999, 0.01, 1, 12) == (True, "converged")
    assert should_terminate(0.5, 0.01, 12, 12) == (True, "max_steps")
    with pytest.raises(ValueError):
        should_terminate(0.5, -0.1, 1, 12)


# ----------------------------------------------------------------------
# full trajectories

def geometric_prediction(target_mean, lam, tau, max_steps):
    """Predicted intensities and stop step for the contraction backend."""
    intensities = []
    value = lam * target_mean
    for t in range(max_steps):
        intensities.append(value)
        if value < tau:
            break
        value *= (1 - lam)
    return intensities


def test_trajectory_geometric_convergence(gbuffer32):
    target = textured_image(32, seed=7)
    backend = ContractingMockBackend(MockConfig(target_image=target,
                                                contraction=0.5))
    cfg = EngineConfig(tau_stop=0.001, max_steps=20, seed=0)
    traj = run_trajectory(gbuffer32, backend, IdentityCodec(), config=cfg)
    traj.validate()
    assert traj.termination_reason == "converged"
    ratios = np.array(traj.intensities[1:]) / np.array(traj.intensities[:-1])
    np.testing.assert_allclose(ratios, 0.5, atol=1e-6)
    predicted = geometric_prediction(float(target.mean()), 0.5, 0.001, 20)
    assert len(traj.intensities) == len(predicted)
    np.testing.assert_allclose(traj.intensities, predicted, atol=1e-6)


@pytest.mark.parametrize("tau", [0.3, 0.1, 0.03, 0.01, 0.001])
def test_trajectory_stop_step_matches_prediction(gbuffer32, tau):
    target = textured_image(32, seed=7)
    backend = ContractingMockBackend(MockConfig(target_image=target,
                                                contraction=0.5))
    cfg = EngineConfig(tau_stop=tau, max_steps=30, seed=0)
    traj = run_trajectory(gbuffer32, backend, IdentityCodec(), config=cfg)
    predicted = geometric_prediction(float(target.mean()), 0.5, tau, 30)
    assert len(traj.intensities) == len(predicted)
    assert traj.termination_reason == "converged"


def test_trajectory_reconstruction_identity(gbuffer32, contracting_backend):
    backend, _ = contracting_backend
    cfg = EngineConfig(tau_stop=0.01, max_steps=8, seed=0)
    traj = run_trajectory(gbuffer32, backend, IdentityCodec(), config=cfg)
    for t, dtv in enumerate(traj.dtvs):
        rebuilt = np.clip(traj.states[t].image + dtv.delta, 0.0, 1.0)
        np.testing.assert_allclose(rebuilt, traj.states[t + 1].image,
                                   atol=1e-6)


def test_trajectory_fixed_point_terminates_immediately(gbuffer32):
    # target == black canvas: the very first residual is zero
    backend = ContractingMockBackend(
        MockConfig(target_image=np.zeros((32, 32, 3), dtype=np.float32)))
    traj = run_trajectory(gbuffer32, backend, IdentityCodec(),
                          config=EngineConfig(tau_stop=0.01))
    assert traj.termination_reason == "converged"
    assert len(traj.states) == 2
    assert traj.intensities == [0.0]


def test_trajectory_step_cap(gbuffer32):
    target = np.ones((32, 32, 3), dtype=np.float32)
    backend = ContractingMockBackend(MockConfig(target_image=target,
                                                contraction=0.5))
    cfg = EngineConfig(tau_stop=0.0, max_steps=4, seed=0)
    traj = run_trajectory(gbuffer32, backend, IdentityCodec(), config=cfg)
    assert traj.termination_reason == "max_steps"
    assert len(traj.states) == 5
    assert len(traj.dtvs) == 4


def test_trajectory_deterministic_under_seed(gbuffer32, contracting_backend):
    backend, _ = contracting_backend
    cfg = EngineConfig(tau_stop=0.01, seed=13)
    a = run_trajectory(gbuffer32, backend, IdentityCodec(), config=cfg)
    b = run_trajectory(gbuffer32, backend, IdentityCodec(), config=cfg)
    assert len(a.states) == len(b.states)
    for sa, sb in zip(a.states, b.states):
        np.testing.assert_array_equal(sa.image, sb.image)
    assert a.intensities == b.intensities


def test_trajectory_abort_on_nan(gbuffer32):
    traj = run_trajectory(gbuffer32, NaNMockBackend(), IdentityCodec(),
                          config=EngineConfig(max_steps=5))
    assert traj.termination_reason == "aborted"
    assert "NonFiniteOutput" in traj.error
    traj.validate()  # invariants hold on the partial trajectory
    assert len(traj.states) == 1


def test_trajectory_masked_run_records_masks(gbuffer32, contracting_backend):
    backend, _ = contracting_backend
    seg = KeyedRectangleSegmentation({"plant": (8, 24, 8, 24)})
    cfg = EngineConfig(tau_stop=0.01, max_steps=6, seed=0, mask_mode="auto",
                       mask_params=MaskParams(dilation_radius=1,
                                              gaussian_sigma=0.0))
    traj = run_trajectory(gbuffer32, backend, IdentityCodec(),
                          prompt_source="add a plant", config=cfg,
                          segmentation_backend=seg)
    assert traj.termination_reason in ("converged", "max_steps")
    for state in traj.states[1:]:
        assert state.mask is not None
        assert state.mask.entity == "plant"
        # condition carries the mask in its last channel block
        np.testing.assert_array_equal(state.condition.data[:, :, 18],
                                      state.mask.refined.astype(np.float32))


def test_prompt_source_callable_consulted_each_step(gbuffer32,
                                                    contracting_backend):
    backend, _ = contracting_backend
    seen = []

    def prompts(t, image):
        seen.append(t)
        return f"step {t}"

    cfg = EngineConfig(tau_stop=0.0, max_steps=3, seed=0)
    traj = run_trajectory(gbuffer32, backend, IdentityCodec(),
                          prompt_source=prompts, config=cfg)
    assert [s.prompt for s in traj.states[1:]] == ["step 0", "step 1",
                                                   "step 2"]


# ----------------------------------------------------------------------
# persistence

def test_save_trajectory_artifacts(tmp_path, gbuffer32, contracting_backend):
    backend, _ = contracting_backend
    cfg = EngineConfig(tau_stop=0.01, max_steps=6, seed=0)
    traj = run_trajectory(gbuffer32, backend, IdentityCodec(), config=cfg)
    save_trajectory(traj, tmp_path, config=cfg)

    n = len(traj.states)
    for t in range(n):
        assert (tmp_path / f"step_{t}.png").exists()
    for t in range(n - 1):
        assert (tmp_path / f"dtv_{t}.tif").exists()

    meta = json.loads((tmp_path / "trajectory.json").read_text())
    assert meta["termination_reason"] == "converged"
    assert meta["seed"] == 0
    assert meta["intensities"] == traj.intensities
    assert meta["config"]["tau_stop"] == 0.01


def test_saved_deltas_reconstruct_states(tmp_path, gbuffer32,
                                         contracting_backend):
    from photoflow import imgio

    backend, _ = contracting_backend
    cfg = EngineConfig(tau_stop=0.01, max_steps=6, seed=0)
    traj = run_trajectory(gbuffer32, backend, IdentityCodec(), config=cfg)
    save_trajectory(traj, tmp_path, config=cfg)

    image = imgio.load_image(tmp_path / "step_0.png")
    for t in range(len(traj.states) - 1):
        delta = imgio.load_image(tmp_path / f"dtv_{t}.tif")
        image = np.clip(image + delta, 0.0, 1.0)
        stored = imgio.load_image(tmp_path / f"step_{t + 1}.png")
        # 16-bit quantization of the states is the only loss
        assert np.abs(image - stored).max() < 2.0 / 65535 + 1e-6
