"""Command-line surface: synthesis, iterative evolution, editing, dataset
construction, and evaluation.

Exit codes partition error classes: 0 ok, 2 config error, 3 backend error,
4 aborted run, 5 mask guidance needed. Every command echoes its fully
resolved config into the output directory.
"""

from __future__ import annotations

import json
import os
import sys

import click
import numpy as np

from . import engine, forge, imgio, metrics
from .backends import (
    ConstantSegmentation,
    ContractingMockBackend,
    ExternalAdapter,
    HashEmbedder,
    IdentityCodec,
    KeyedRectangleSegmentation,
    MockConfig,
    ScriptedChatClient,
)
from .errors import (
    BackendUnavailable,
    ConfigError,
    NoEntityFound,
    NonFiniteOutput,
    PhotoflowError,
    ProtocolError,
    RemoteError,
)
from .gbuffer import DropoutSpec, discover_manifest, load_gbuffer_set, load_manifest
from .masks import MaskParams, resolve_mask, save_mask

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_BACKEND = 3
EXIT_ABORTED = 4
EXIT_MASK_GUIDANCE = 5

_BACKEND_ERRORS = (BackendUnavailable, NonFiniteOutput, ProtocolError,
                   RemoteError)


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _load_config(path: str | None, overrides: dict) -> dict:
    config = {}
    if path:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path) as fh:
            config = json.load(fh)
    for key, value in overrides.items():
        if value is not None:
            section, _, name = key.partition(".")
            if name:
                config.setdefault(section, {})[name] = value
            else:
                config[key] = value
    return config


def _load_scene(config: dict):
    resolution = int(config.get("resolution", 512))
    if "scene_manifest" in config:
        path = config["scene_manifest"]
        if not os.path.exists(path):
            raise ConfigError(f"scene manifest not found: {path}")
        entry = load_manifest(path)
    elif "scene_dir" in config:
        if not os.path.isdir(config["scene_dir"]):
            raise ConfigError(f"scene dir not found: {config['scene_dir']}")
        entry = discover_manifest(config["scene_dir"])
    else:
        raise ConfigError("config needs scene_manifest or scene_dir")
    return load_gbuffer_set(entry, resolution=resolution)


def _make_backend(config: dict, resolution: int):
    spec = config.get("backend", {})
    kind = spec.get("kind", "mock")
    codec = IdentityCodec()
    if kind == "mock":
        target_path = spec.get("target")
        if target_path:
            if not os.path.exists(target_path):
                raise ConfigError(f"mock target image not found: {target_path}")
            target = imgio.resize(np.clip(imgio.load_image(target_path), 0, 1),
                                  resolution, resolution)
            if target.ndim == 2:
                target = np.repeat(target[:, :, None], 3, axis=2)
        else:
            rng = np.random.default_rng(int(spec.get("target_seed", 0)))
            target = rng.random((resolution, resolution, 3)).astype(np.float32)
        backend = ContractingMockBackend(
            MockConfig(target_image=target,
                       contraction=float(spec.get("contraction", 0.5)),
                       respect_mask=bool(spec.get("respect_mask", True))),
            codec=codec)
    elif kind == "external":
        endpoint = spec.get("endpoint")
        if not endpoint:
            raise ConfigError("external backend needs an endpoint")
        backend = ExternalAdapter(endpoint,
                                  timeout=float(spec.get("timeout", 10.0)),
                                  retries=int(spec.get("retries", 3)))
    else:
        raise ConfigError(f"unknown backend kind {kind!r}")
    return backend, codec


def _mask_params(config: dict) -> MaskParams:
    spec = config.get("mask", {})
    return MaskParams(threshold=float(spec.get("threshold", 0.4)),
                      dilation_radius=int(spec.get("dilation_radius", 5)),
                      gaussian_sigma=float(spec.get("sigma", 3.0)))


def _engine_config(config: dict) -> engine.EngineConfig:
    spec = config.get("engine", {})
    return engine.EngineConfig(
        tau_stop=float(spec.get("tau_stop", engine.DEFAULT_TAU_STOP)),
        max_steps=int(spec.get("max_steps", engine.DEFAULT_MAX_STEPS)),
        seed=int(spec.get("seed", 0)),
        normalized_intensity=bool(spec.get("normalized_intensity", True)),
        mask_mode=config.get("mask", {}).get("mode", "none"),
        mask_params=_mask_params(config))


def _segmentation(config: dict):
    spec = config.get("segmentation", {})
    rects = spec.get("rectangles")
    if rects:
        return KeyedRectangleSegmentation(
            {k: tuple(v) for k, v in rects.items()})
    # no segmentation model configured: treat the whole frame as the region
    return ConstantSegmentation(1.0)


def _echo_config(config: dict, out_dir: str):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w") as fh:
        json.dump(config, fh, indent=2, sort_keys=True)


def _prompt_source(config: dict):
    spec = config.get("prompts", {})
    mode = spec.get("mode", "static")
    if mode == "static":
        return spec.get("text")
    if mode == "agent":
        path = spec.get("responses_file")
        if not path or not os.path.exists(path):
            raise ConfigError("agent prompt mode needs responses_file")
        with open(path) as fh:
            client = ScriptedChatClient(json.load(fh))

        def agent_prompts(t, image):
            if image is None:
                return None
            critiques = [forge.critique(image, role, client)
                         for role in forge.ROLES]
            return forge.synthesize_prompt(critiques)

        return agent_prompts
    raise ConfigError(f"unknown prompt mode {mode!r}")


@click.group()
def main():
    """G-buffer conditioned iterative photorealistic transfer."""


_common = [
    click.option("--config", "config_path", type=str, default=None,
                 help="JSON run config."),
    click.option("--out", "out_dir", type=str, default=None,
                 help="Output directory."),
    click.option("--seed", type=int, default=None),
    click.option("--backend", "backend_kind", type=str, default=None,
                 help="mock or external."),
    click.option("--max-steps", type=int, default=None),
    click.option("--tau-stop", type=float, default=None),
    click.option("--mask", "user_mask_path", type=str, default=None,
                 help="User mask image."),
    click.option("--prompt", type=str, default=None),
    click.option("--workers", type=int, default=None),
]


def common_options(fn):
    for option in reversed(_common):
        fn = option(fn)
    return fn


def _resolve(config_path, **overrides):
    mapped = {
        "out_dir": overrides.get("out_dir"),
        "engine.seed": overrides.get("seed"),
        "backend.kind": overrides.get("backend_kind"),
        "engine.max_steps": overrides.get("max_steps"),
        "engine.tau_stop": overrides.get("tau_stop"),
        "mask.user_mask": overrides.get("user_mask_path"),
        "prompts.text": overrides.get("prompt"),
        "workers": overrides.get("workers"),
    }
    config = _load_config(config_path, mapped)
    if overrides.get("prompt") is not None:
        config.setdefault("prompts", {})["mode"] = "static"
    if not config.get("out_dir"):
        raise ConfigError("no output directory (set --out or out_dir)")
    return config


@main.command()
@common_options
def synth(config_path, **overrides):
    """One pure synthesis step with zero mask; writes step_0 artifacts."""
    try:
        config = _resolve(config_path, **overrides)
        g = _load_scene(config)
        backend, codec = _make_backend(config, g.width)
        eng = _engine_config(config)
        eng.mask_mode = "none"
        eng.max_steps = 1
        eng.tau_stop = 0.0
    except (ConfigError, json.JSONDecodeError, PhotoflowError) as exc:
        _fail(EXIT_CONFIG, str(exc))
    out_dir = config["out_dir"]
    _echo_config(config, out_dir)
    try:
        state0 = engine.init_state(g, seed=eng.seed)
        state1, dtv = engine.step(state0, backend, codec, g, mask_mode="none")
    except _BACKEND_ERRORS as exc:
        _fail(EXIT_BACKEND, str(exc))
    imgio.save_png(os.path.join(out_dir, "step_0.png"), state1.image, 16)
    imgio.save_float(os.path.join(out_dir, "dtv_0.tif"), dtv.delta)
    with open(os.path.join(out_dir, "trajectory.json"), "w") as fh:
        json.dump({"seed": eng.seed, "steps": 1, "prompts": [None]},
                  fh, indent=2, sort_keys=True)
    click.echo(f"wrote {out_dir}/step_0.png")


@main.command()
@common_options
def evolve(config_path, **overrides):
    """Run the full iterative trajectory with adaptive termination."""
    try:
        config = _resolve(config_path, **overrides)
        g = _load_scene(config)
        backend, codec = _make_backend(config, g.width)
        eng = _engine_config(config)
        prompt_source = _prompt_source(config)
        user_mask = None
        mask_path = config.get("mask", {}).get("user_mask")
        if mask_path:
            if not os.path.exists(mask_path):
                raise ConfigError(f"user mask not found: {mask_path}")
            user_mask = imgio.resize(imgio.load_image(mask_path),
                                     g.width, g.height)
            if user_mask.ndim == 3:
                user_mask = user_mask.mean(axis=2)
            eng.mask_mode = "user"
    except (ConfigError, json.JSONDecodeError, PhotoflowError) as exc:
        _fail(EXIT_CONFIG, str(exc))
    out_dir = config["out_dir"]
    _echo_config(config, out_dir)
    try:
        traj = engine.run_trajectory(
            g, backend, codec, prompt_source=prompt_source, config=eng,
            user_mask=user_mask, segmentation_backend=_segmentation(config))
    except _BACKEND_ERRORS as exc:
        _fail(EXIT_BACKEND, str(exc))
    engine.save_trajectory(traj, out_dir, config=eng)
    for i, value in enumerate(traj.intensities):
        click.echo(f"step {i}: intensity {value:.6f}")
    click.echo(f"termination: {traj.termination_reason}")
    if traj.termination_reason == "aborted":
        _fail(EXIT_ABORTED, f"trajectory aborted: {traj.error}")


@main.command()
@click.option("--input", "input_path", type=str, required=True,
              help="Image to edit.")
@common_options
def edit(config_path, input_path, **overrides):
    """Single masked editing step on an existing image."""
    try:
        config = _resolve(config_path, **overrides)
        if not os.path.exists(input_path):
            raise ConfigError(f"input image not found: {input_path}")
        g = _load_scene(config)
        backend, codec = _make_backend(config, g.width)
        params = _mask_params(config)
        prompt = config.get("prompts", {}).get("text")
        mask_path = config.get("mask", {}).get("user_mask")
        if not prompt and not mask_path:
            raise ConfigError("edit needs --prompt or --mask")
    except (ConfigError, json.JSONDecodeError, PhotoflowError) as exc:
        _fail(EXIT_CONFIG, str(exc))
    out_dir = config["out_dir"]
    _echo_config(config, out_dir)

    image = imgio.resize(np.clip(imgio.load_image(input_path), 0, 1),
                         g.width, g.height)
    if image.ndim == 2:
        image = np.repeat(image[:, :, None], 3, axis=2)
    user_mask = None
    mode = "auto"
    if mask_path:
        if not os.path.exists(mask_path):
            _fail(EXIT_CONFIG, f"user mask not found: {mask_path}")
        user_mask = imgio.resize(imgio.load_image(mask_path),
                                 g.width, g.height)
        if user_mask.ndim == 3:
            user_mask = user_mask.mean(axis=2)
        mode = "user"
    try:
        mask = resolve_mask(mode, prompt, user_mask, image, params,
                            _segmentation(config))
    except NoEntityFound as exc:
        _fail(EXIT_MASK_GUIDANCE,
              f"{exc}; supply --mask to define the edit region")
    from .gbuffer import assemble_condition
    condition = assemble_condition(g, mask=mask.refined)
    try:
        out = backend.generate(codec.encode(image), 1, condition,
                               mask=mask.refined, prompt=prompt)
    except _BACKEND_ERRORS as exc:
        _fail(EXIT_BACKEND, str(exc))
    out = np.clip(np.asarray(out, dtype=np.float32), 0, 1)
    imgio.save_png(os.path.join(out_dir, "edit.png"), out, 16)
    save_mask(mask, os.path.join(out_dir, "mask.png"))
    imgio.save_float(os.path.join(out_dir, "dtv.tif"), out - image)
    click.echo(f"wrote {out_dir}/edit.png")


@main.group()
def dataset():
    """Dataset forge commands."""


@dataset.command("build")
@common_options
def dataset_build(config_path, **overrides):
    """Build paired transfer trajectories for the configured scenes."""
    try:
        config = _resolve(config_path, **overrides)
        spec = config.get("dataset", {})
        scene_dirs = spec.get("scene_dirs", [])
        if not scene_dirs:
            raise ConfigError("dataset.scene_dirs is empty")
        responses_file = spec.get("responses_file")
        if not responses_file or not os.path.exists(responses_file):
            raise ConfigError("dataset.responses_file missing")
        resolution = int(config.get("resolution", 512))
        backend, codec = _make_backend(config, resolution)
        with open(responses_file) as fh:
            responses = json.load(fh)
        fconfig = forge.ForgeConfig(
            steps=int(spec.get("steps", forge.DEFAULT_STEPS)),
            noise_ratio=float(spec.get("noise_ratio",
                                       forge.DEFAULT_NOISE_RATIO)),
            drift_similarity=float(spec.get("drift_similarity",
                                            forge.DEFAULT_DRIFT_SIMILARITY)),
            max_shift=int(spec.get("max_shift", forge.DEFAULT_MAX_SHIFT)),
            mask_mode=spec.get("mask_mode", "auto"),
            mask_params=_mask_params(config))
        scenes = []
        for scene_dir in scene_dirs:
            if not os.path.isdir(scene_dir):
                raise ConfigError(f"scene dir not found: {scene_dir}")
            g = load_gbuffer_set(discover_manifest(scene_dir),
                                 resolution=resolution)
            base_path = os.path.join(scene_dir, "render.png")
            if os.path.exists(base_path):
                base = imgio.resize(np.clip(imgio.load_image(base_path), 0, 1),
                                    resolution, resolution)
            else:
                base = g.albedo.copy()
            scenes.append((g, base))
    except (ConfigError, json.JSONDecodeError, PhotoflowError) as exc:
        _fail(EXIT_CONFIG, str(exc))
    out_dir = config["out_dir"]
    _echo_config(config, out_dir)
    try:
        # no semantic embedder is bundled, so the drift filter only runs
        # when one is plugged in programmatically; the noise filter and
        # alignment still apply
        counts = forge.build_dataset(
            scenes, out_dir, backend, codec,
            ScriptedChatClient(responses), embedder=None,
            segmentation_backend=_segmentation(config), config=fconfig,
            workers=int(config.get("workers") or 1))
    except _BACKEND_ERRORS as exc:
        _fail(EXIT_BACKEND, str(exc))
    click.echo(json.dumps(counts, sort_keys=True))


@main.command("eval")
@click.option("--run-dir", type=str, required=True,
              help="A trajectory run directory.")
@click.option("--reference", type=str, default=None,
              help="Reference image (defaults to the run's step_0).")
@common_options
def eval_cmd(config_path, run_dir, reference, **overrides):
    """Score a finished run: pixel metrics, embedding scores, curve."""
    try:
        config = _resolve(config_path, **overrides)
        traj_path = os.path.join(run_dir, "trajectory.json")
        if not os.path.exists(traj_path):
            raise ConfigError(f"no trajectory.json under {run_dir}")
    except (ConfigError, json.JSONDecodeError, PhotoflowError) as exc:
        _fail(EXIT_CONFIG, str(exc))
    out_dir = config["out_dir"]
    _echo_config(config, out_dir)

    with open(traj_path) as fh:
        meta = json.load(fh)
    steps = sorted(
        int(name[len("step_"):-len(".png")])
        for name in os.listdir(run_dir)
        if name.startswith("step_") and name.endswith(".png"))
    final = imgio.load_image(os.path.join(run_dir, f"step_{steps[-1]}.png"))
    ref_path = reference or os.path.join(run_dir, f"step_{steps[0]}.png")
    ref = imgio.load_image(ref_path)
    embedder = HashEmbedder()
    prompt = next((p for p in (meta.get("prompts") or []) if p), "") or ""
    record = metrics.EvalRecord(
        scene_id=os.path.basename(os.path.normpath(run_dir)),
        psnr=metrics.psnr(ref, final),
        ssim=metrics.ssim(ref, final),
        global_clip=metrics.global_clip(final, prompt, embedder),
        delta_clip=metrics.delta_clip(ref, final, prompt, embedder),
        intensity_curve=meta.get("intensities"))
    summary = metrics.write_report([record], out_dir)
    click.echo(json.dumps(summary, sort_keys=True))


if __name__ == "__main__":
    main()
