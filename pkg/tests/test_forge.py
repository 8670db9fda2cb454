import json

import numpy as np
import pytest

from conftest import CRITIQUE_RESPONSE, make_gbuffer, textured_image
from photoflow.backends import (
    ContractingMockBackend,
    FixedEmbedder,
    IdentityCodec,
    KeyedRectangleSegmentation,
    MockConfig,
    ScriptedChatClient,
)
from photoflow.errors import EmptyCritiques, UnparseableResponse
from photoflow.forge import (
    ROLES,
    AgentCritique,
    ForgeConfig,
    PairedSample,
    align_pair,
    build_dataset,
    build_trajectory,
    completed_scenes,
    critique,
    filter_sample,
    laplacian_variance,
    role_template,
    synthesize_prompt,
    write_sample,
)
from photoflow.masks import MaskParams, refine_mask


# ----------------------------------------------------------------------
# critique parsing

def test_role_templates_exist_and_differ():
    texts = [role_template(role) for role in ROLES]
    assert all(t.strip() for t in texts)
    assert len(set(texts)) == 3
    with pytest.raises(ValueError):
        role_template("unknown_role")


def test_critique_parses_valid_json():
    client = ScriptedChatClient([CRITIQUE_RESPONSE])
    crit = critique(None, "global_auditor", client)
    assert crit.role == "global_auditor"
    assert crit.findings == "lighting looks flat"
    assert crit.suggestions[0] == ("sofa", "add fabric wrinkles to the sofa")


def test_critique_reprompts_once_on_garbage():
    client = ScriptedChatClient(["not json", CRITIQUE_RESPONSE])
    crit = critique(None, "local_refiner", client)
    assert len(client.calls) == 2
    assert crit.suggestions


def test_critique_fails_after_second_garbage():
    client = ScriptedChatClient(["not json", "still not json"])
    with pytest.raises(UnparseableResponse):
        critique(None, "local_refiner", client)


def test_critique_rejects_empty_suggestions():
    empty = json.dumps({"findings": "fine", "suggestions": []})
    client = ScriptedChatClient([empty, empty])
    with pytest.raises(UnparseableResponse):
        critique(None, "global_auditor", client)


# ----------------------------------------------------------------------
# prompt synthesis

def _crit(role, *pairs):
    return AgentCritique(role=role, findings="", suggestions=list(pairs))


def test_synthesize_priority_and_dedup():
    crits = [
        _crit("local_refiner", ("sofa", "refine the sofa stitching")),
        _crit("global_auditor", ("sofa", "rebalance the sofa shading")),
        _crit("contextual_enricher", ("lamp", "warm up the lamp glow")),
    ]
    prompt = synthesize_prompt(crits, token_budget=32)
    # auditor wins the sofa conflict, refiner's duplicate target is dropped
    assert prompt == "rebalance the sofa shading; warm up the lamp glow"


def test_synthesize_budget_keeps_whole_suggestions():
    crits = [_crit("global_auditor",
                   ("a", "one two three four"),
                   ("b", "five six seven"),
                   ("c", "eight nine"))]
    prompt = synthesize_prompt(crits, token_budget=7)
    assert prompt == "one two three four; five six seven"


def test_synthesize_first_suggestion_survives_tiny_budget():
    crits = [_crit("global_auditor", ("a", "one two three four five"))]
    assert synthesize_prompt(crits, token_budget=2) == "one two three four five"


def test_synthesize_empty_raises():
    with pytest.raises(EmptyCritiques):
        synthesize_prompt([])


# ----------------------------------------------------------------------
# quality filter

def _pair(prev, nxt):
    mask = refine_mask(np.ones(prev.shape[:2]), 0.5, 0, 0.0)
    return PairedSample(x_prev=prev, x_next=nxt, condition=None, prompt="p",
                        mask=mask, step=0, provenance={"scene_id": "s"})


def test_laplacian_variance_flat_is_zero():
    assert laplacian_variance(np.full((16, 16, 3), 0.5)) == pytest.approx(0.0)


def test_laplacian_variance_orders_noise_levels():
    rng = np.random.default_rng(0)
    base = np.clip(0.5 + 0.05 * rng.standard_normal((32, 32, 3)), 0, 1)
    noisy = np.clip(0.5 + 0.25 * rng.standard_normal((32, 32, 3)), 0, 1)
    assert laplacian_variance(noisy) > laplacian_variance(base)


def test_filter_rejects_noise_injection():
    rng = np.random.default_rng(1)
    prev = np.clip(0.5 + 0.02 * rng.standard_normal((32, 32, 3)), 0, 1)
    noise = np.clip(prev + 0.3 * rng.standard_normal((32, 32, 3)), 0, 1)
    config = ForgeConfig(noise_ratio=3.0)
    # sanity: the ratio really crosses the gate
    assert laplacian_variance(noise) / laplacian_variance(prev) > 3.0
    assert filter_sample(_pair(prev, noise), config) == ("reject", "noise")
    assert filter_sample(_pair(prev, prev.copy()), config) == ("keep", None)


def test_filter_rejects_semantic_drift():
    prev = textured_image(16, seed=2)
    nxt = textured_image(16, seed=3)
    # orthogonal embeddings => cosine 0 < 0.6
    embedder = FixedEmbedder([1.0, 0.0])
    embedder.embed_image = lambda image: (
        np.array([1.0, 0.0]) if image is prev else np.array([0.0, 1.0]))
    config = ForgeConfig(noise_ratio=100.0, drift_similarity=0.6)
    assert filter_sample(_pair(prev, nxt), config, embedder) == \
        ("reject", "drift")


def test_filter_keeps_similar_embeddings():
    prev = textured_image(16, seed=2)
    embedder = FixedEmbedder([1.0, 0.0])
    config = ForgeConfig(noise_ratio=100.0, drift_similarity=0.6)
    assert filter_sample(_pair(prev, prev.copy()), config, embedder) == \
        ("keep", None)


# ----------------------------------------------------------------------
# alignment

def align_oracle_shift(size=32, seed=4, shift=(2, -1), max_shift=4):
    from photoflow.forge import _translate

    rng = np.random.default_rng(seed)
    base = rng.random((size, size, 3)).astype(np.float32)
    drifted = _translate(base, *shift)
    return base, drifted


@pytest.mark.parametrize("shift", [(0, 0), (1, 0), (0, -2), (2, -1), (-3, 3),
                                   (4, 4)])
def test_align_recovers_known_shift(shift):
    base, drifted = align_oracle_shift(shift=shift)
    aligned, detected = align_pair(base, drifted, max_shift=4)
    assert detected == shift


def test_align_recovers_25_random_shifts():
    rng = np.random.default_rng(9)
    from photoflow.forge import _translate

    base = rng.random((40, 40, 3)).astype(np.float32)
    for _ in range(25):
        dx, dy = int(rng.integers(-4, 5)), int(rng.integers(-4, 5))
        drifted = _translate(base, dx, dy)
        _, detected = align_pair(base, drifted, max_shift=4)
        assert detected == (dx, dy)


def test_align_shift_beyond_search_range_clips():
    from photoflow.forge import _translate

    rng = np.random.default_rng(10)
    base = rng.random((40, 40, 3)).astype(np.float32)
    drifted = _translate(base, 6, 0)
    _, detected = align_pair(base, drifted, max_shift=4)
    assert abs(detected[0]) <= 4 and abs(detected[1]) <= 4


def test_align_identity_prefers_zero_shift():
    flatish = np.full((32, 32, 3), 0.5, dtype=np.float32)
    _, detected = align_pair(flatish, flatish.copy(), max_shift=4)
    assert detected == (0, 0)


def test_aligned_interior_matches_original():
    from photoflow.forge import _translate

    rng = np.random.default_rng(11)
    base = rng.random((32, 32, 3)).astype(np.float32)
    drifted = _translate(base, 2, -1)
    aligned, _ = align_pair(base, drifted, max_shift=4)
    np.testing.assert_array_equal(aligned[4:-4, 4:-4], base[4:-4, 4:-4])


# ----------------------------------------------------------------------
# trajectories and the dataset layout

def _forge_fixture(scene_id="scene", steps=6, responses=None):
    g = make_gbuffer(32, seed=3, scene_id=scene_id)
    base = textured_image(32, seed=5)
    target = textured_image(32, seed=6)
    backend = ContractingMockBackend(MockConfig(target_image=target,
                                                contraction=0.3))
    client = ScriptedChatClient(responses or [CRITIQUE_RESPONSE] * 100)
    seg = KeyedRectangleSegmentation({"sofa": (4, 20, 4, 20)},
                                     native_resolution=None)
    config = ForgeConfig(steps=steps,
                         mask_params=MaskParams(dilation_radius=1,
                                                gaussian_sigma=0.0))
    return g, base, backend, client, seg, config


def test_build_trajectory_full_length():
    g, base, backend, client, seg, config = _forge_fixture()
    samples, status = build_trajectory(g, base, backend, IdentityCodec(),
                                       client, segmentation_backend=seg,
                                       config=config)
    assert status == "complete"
    assert len(samples) == 6
    assert [s.step for s in samples] == list(range(6))
    # chained: each step starts from the previous kept frame
    for a, b in zip(samples[:-1], samples[1:]):
        np.testing.assert_array_equal(b.x_prev, a.x_next)
    # three roles consulted per step
    assert len(client.calls) == 18
    for s in samples:
        assert "fabric wrinkles" in s.prompt
        assert s.mask.entity == "fabric wrinkles" or s.mask is not None


def test_build_trajectory_single_step():
    g, base, backend, client, seg, config = _forge_fixture(steps=1)
    samples, status = build_trajectory(g, base, backend, IdentityCodec(),
                                       client, segmentation_backend=seg,
                                       config=config)
    assert status == "complete" and len(samples) == 1


def test_build_trajectory_truncates_on_noise():
    class NoiseBackend:
        def generate(self, z, t, condition, mask=None, prompt=None):
            rng = np.random.default_rng(t)
            h, w = condition.data.shape[:2]
            return np.clip(0.5 + 0.4 * rng.standard_normal((h, w, 3)),
                           0, 1).astype(np.float32)

    g, base, _, client, seg, config = _forge_fixture()
    base = np.clip(0.5 + 0.01 * np.random.default_rng(0)
                   .standard_normal((32, 32, 3)), 0, 1).astype(np.float32)
    samples, status = build_trajectory(g, base, NoiseBackend(),
                                       IdentityCodec(), client,
                                       segmentation_backend=seg,
                                       config=config)
    assert status == "truncated:noise"
    assert len(samples) == 0


def test_write_sample_layout(tmp_path):
    g, base, backend, client, seg, config = _forge_fixture(steps=2)
    samples, _ = build_trajectory(g, base, backend, IdentityCodec(), client,
                                  segmentation_backend=seg, config=config)
    record = write_sample(samples[1], tmp_path)
    step_dir = tmp_path / "scene" / "step_1"
    for name in ("prev.png", "next.png", "mask.png", "prompt.txt",
                 "meta.json"):
        assert (step_dir / name).exists()
    assert record["scene_id"] == "scene" and record["step"] == 1
    meta = json.loads((step_dir / "meta.json").read_text())
    assert meta["provenance"]["alignment_shift"] == [0, 0]
    assert set(meta["provenance"]["agent_findings"]) == set(ROLES)


def test_build_dataset_counts_and_manifest(tmp_path):
    scenes = []
    for i in range(3):
        g, base, backend, client, seg, config = _forge_fixture(
            scene_id=f"scene_{i}")
        scenes.append((g, base))
    counts = build_dataset(scenes, tmp_path, backend, IdentityCodec(), client,
                           segmentation_backend=seg, config=config, workers=2)
    assert counts["kept"] == 18  # 3 scenes x 6 steps
    manifest = (tmp_path / "manifest.jsonl").read_text().strip().splitlines()
    assert len(manifest) == 18
    assert completed_scenes(tmp_path / "manifest.jsonl") == \
        {"scene_0", "scene_1", "scene_2"}


def test_build_dataset_resume_skips_done_scenes(tmp_path):
    g0, base, backend, client, seg, config = _forge_fixture(scene_id="s0")
    build_dataset([(g0, base)], tmp_path, backend, IdentityCodec(), client,
                  segmentation_backend=seg, config=config)
    before = (tmp_path / "manifest.jsonl").read_text()

    g1 = make_gbuffer(32, seed=4, scene_id="s1")
    counts = build_dataset([(g0, base), (g1, base)], tmp_path, backend,
                           IdentityCodec(),
                           ScriptedChatClient([CRITIQUE_RESPONSE] * 100),
                           segmentation_backend=seg, config=config)
    assert counts["skipped_scenes"] == 1
    assert counts["kept"] == 6
    after = (tmp_path / "manifest.jsonl").read_text()
    assert after.startswith(before)
    assert len(after.strip().splitlines()) == 12
