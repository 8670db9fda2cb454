"""Iterative transfer engine: per-step generation, residual monitoring,
adaptive termination, trajectory persistence.

A trajectory starts from a black canvas and a seeded Gaussian latent. The
first step is pure synthesis (its recorded transfer vector is the output
itself); later steps encode the previous image and record the difference of
consecutive outputs. A mask-weighted residual between consecutive states is
monitored; when it drops below the stop threshold the trajectory has
converged.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from . import imgio
from .errors import NonFiniteOutput, ZeroMask
from .gbuffer import GBufferSet, assemble_condition
from .masks import MaskParams, SemanticMask, resolve_mask, save_mask

DEFAULT_TAU_STOP = 0.01
DEFAULT_MAX_STEPS = 12
TARGET_TRAJECTORY_LENGTH = 6


@dataclass
class RenderState:
    """The evolving image at one step of the trajectory."""

    image: np.ndarray  # H x W x 3 in [0,1]
    step: int
    prompt: str | None = None
    mask: SemanticMask | None = None
    latent: np.ndarray | None = None
    condition: object = None


@dataclass
class TransferVector:
    """Signed per-step image update (unclamped)."""

    delta: np.ndarray
    step: int


@dataclass
class Trajectory:
    states: list = field(default_factory=list)
    dtvs: list = field(default_factory=list)
    intensities: list = field(default_factory=list)
    raw_intensities: list = field(default_factory=list)
    termination_reason: str = ""
    seed: int = 0
    error: str | None = None

    def validate(self) -> None:
        if len(self.dtvs) != len(self.states) - 1:
            raise ValueError("|dtvs| must equal |states| - 1")
        if len(self.intensities) != len(self.dtvs):
            raise ValueError("|intensities| must equal |dtvs|")


@dataclass
class EngineConfig:
    tau_stop: float = DEFAULT_TAU_STOP
    max_steps: int = DEFAULT_MAX_STEPS
    seed: int = 0
    normalized_intensity: bool = True
    mask_mode: str = "none"  # none | user | auto
    mask_params: MaskParams = field(default_factory=MaskParams)
    # Pass the mask into every backend call, not only t=0 (config switch for
    # the alternative where later steps drop it).
    mask_in_every_step: bool = True


def init_state(g: GBufferSet, prompt: str | None = None, seed: int = 0) -> RenderState:
    """Step-0 state: black canvas, seeded Gaussian latent, zero-mask condition."""
    rng = np.random.default_rng(seed)
    latent = rng.standard_normal((g.height, g.width, 3)).astype(np.float32)
    condition = assemble_condition(g, mask=None)
    image = np.zeros((g.height, g.width, 3), dtype=np.float32)
    return RenderState(image=image, step=0, prompt=prompt, mask=None,
                       latent=latent, condition=condition)


def step(
    state: RenderState,
    backend,
    codec,
    g: GBufferSet,
    next_prompt: str | None = None,
    mask_params: MaskParams | None = None,
    mask_mode: str = "none",
    user_mask: np.ndarray | None = None,
    segmentation_backend=None,
    mask_in_call: bool = True,
):
    """Advance the trajectory by one generation.

    Returns ``(next_state, transfer_vector)``. The recorded delta is the
    unclamped difference; the stored image is clamped to [0,1].
    """
    t = state.step
    if mask_mode == "none" or (mask_mode == "auto" and not next_prompt):
        mask = None
    else:
        mask = resolve_mask(mask_mode, next_prompt, user_mask, state.image,
                            mask_params, segmentation_backend)
    mask_channel = mask.refined if mask is not None else None
    condition = assemble_condition(g, mask=mask_channel)

    z = state.latent if t == 0 else codec.encode(state.image)
    call_mask = mask_channel if (mask_in_call or t == 0) else None
    out = np.asarray(
        backend.generate(z, t, condition, mask=call_mask, prompt=next_prompt),
        dtype=np.float32)
    if not np.isfinite(out).all():
        raise NonFiniteOutput(f"backend produced non-finite values at step {t}")

    delta = out - state.image
    next_state = RenderState(image=np.clip(out, 0.0, 1.0), step=t + 1,
                             prompt=next_prompt, mask=mask, latent=z,
                             condition=condition)
    return next_state, TransferVector(delta=delta, step=t)


def semantic_intensity(
    x_next: np.ndarray,
    x_prev: np.ndarray,
    mask: np.ndarray | None = None,
    normalized: bool = True,
) -> float:
    """Mask-weighted residual between consecutive states.

    Per-pixel L1 averaged over the color channels, weighted by the mask
    (ones when absent). Raw mode sums over pixels; normalized mode divides
    by the mask mass so the threshold is resolution-independent.
    """
    if x_next.shape != x_prev.shape:
        raise ValueError(f"shape mismatch {x_next.shape} vs {x_prev.shape}")
    residual = np.abs(x_next.astype(np.float64) - x_prev.astype(np.float64))
    if residual.ndim == 3:
        residual = residual.mean(axis=2)
    if mask is None:
        weights = np.ones_like(residual)
    else:
        weights = np.asarray(mask, dtype=np.float64)
        if weights.ndim == 3:
            weights = weights.mean(axis=2)
        if weights.shape != residual.shape:
            raise ValueError("mask shape does not match images")
    total = float((weights * residual).sum())
    if not normalized:
        return total
    mass = float(weights.sum())
    if mass == 0.0:
        raise ZeroMask("nothing to monitor: mask weight is zero")
    return total / mass


def should_terminate(intensity: float, tau_stop: float, step_index: int,
                     max_steps: int):
    """Strict-inequality convergence test plus the step cap."""
    if tau_stop < 0 or max_steps < 1:
        raise ValueError("tau_stop must be >= 0 and max_steps >= 1")
    if intensity < tau_stop:
        return True, "converged"
    if step_index >= max_steps:
        return True, "max_steps"
    return False, "continue"


def run_trajectory(
    g: GBufferSet,
    backend,
    codec,
    prompt_source=None,
    config: EngineConfig | None = None,
    user_mask: np.ndarray | None = None,
    segmentation_backend=None,
) -> Trajectory:
    """Drive init_state + repeated step until termination.

    ``prompt_source`` is a static string or a callable ``(step, image) ->
    prompt`` consulted before every step (the per-step re-critique pattern).
    Backend failures mark the trajectory aborted with partial states kept.
    """
    config = config or EngineConfig()
    if callable(prompt_source):
        get_prompt = prompt_source
    else:
        get_prompt = lambda t, image: prompt_source  # noqa: E731 static prompt

    state = init_state(g, prompt=get_prompt(0, None), seed=config.seed)
    traj = Trajectory(states=[state], seed=config.seed)

    while True:
        t = state.step
        prompt = get_prompt(t, state.image)
        try:
            state, dtv = step(
                state, backend, codec, g, next_prompt=prompt,
                mask_params=config.mask_params, mask_mode=config.mask_mode,
                user_mask=user_mask, segmentation_backend=segmentation_backend,
                mask_in_call=config.mask_in_every_step)
        except Exception as exc:
            traj.termination_reason = "aborted"
            traj.error = f"{type(exc).__name__}: {exc}"
            # keep |intensities| == |dtvs| == |states| - 1
            return traj
        traj.states.append(state)
        traj.dtvs.append(dtv)

        mask_channel = state.mask.refined if state.mask is not None else None
        try:
            intensity = semantic_intensity(
                state.image, traj.states[-2].image, mask_channel,
                normalized=config.normalized_intensity)
            raw = semantic_intensity(state.image, traj.states[-2].image,
                                     mask_channel, normalized=False)
        except ZeroMask:
            traj.intensities.append(0.0)
            traj.raw_intensities.append(0.0)
            traj.termination_reason = "converged"
            return traj
        traj.intensities.append(intensity)
        traj.raw_intensities.append(raw)

        stop, reason = should_terminate(intensity, config.tau_stop,
                                        state.step, config.max_steps)
        if stop:
            traj.termination_reason = reason
            return traj


def save_trajectory(traj: Trajectory, out_dir: str | os.PathLike,
                    config: EngineConfig | None = None,
                    prompts: list | None = None) -> None:
    """Persist a run directory: per-step images, masks, signed deltas,
    and trajectory.json."""
    out_dir = os.fspath(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    for state in traj.states:
        imgio.save_png(os.path.join(out_dir, f"step_{state.step}.png"),
                       state.image, bit_depth=16)
        if state.mask is not None:
            save_mask(state.mask,
                      os.path.join(out_dir, f"mask_{state.step}.png"))
    for dtv in traj.dtvs:
        imgio.save_float(os.path.join(out_dir, f"dtv_{dtv.step}.tif"),
                         dtv.delta)
    meta = {
        "seed": traj.seed,
        "prompts": [s.prompt for s in traj.states],
        "intensities": traj.intensities,
        "raw_intensities": traj.raw_intensities,
        "termination_reason": traj.termination_reason,
        "error": traj.error,
        "config": _config_echo(config),
    }
    with open(os.path.join(out_dir, "trajectory.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)


def _config_echo(config: EngineConfig | None):
    if config is None:
        return None
    echo = asdict(config)
    echo["mask_params"].pop("command_verbs", None)
    echo["mask_params"].pop("abstract_nouns", None)
    return echo
