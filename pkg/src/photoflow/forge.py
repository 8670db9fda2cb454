"""Dataset forge: agent critique, prompt synthesis, per-step editing,
quality filtering, and spatial alignment of paired transfer samples.

Three role-specialized chat agents critique the current image; their
suggestions merge into one refinement prompt per step. An editing backend
applies the prompt, the result is filtered (noise / semantic drift) and
aligned back onto the previous frame, and the pair is recorded as one
supervised transfer sample.
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from importlib import resources

import numpy as np
from scipy import ndimage

from . import imgio
from .errors import EmbedderUnavailable, EmptyCritiques, UnparseableResponse
from .gbuffer import GBufferSet, assemble_condition
from .masks import MaskParams, SemanticMask, refine_mask, resolve_mask, save_mask
from .errors import NoEntityFound

logger = logging.getLogger(__name__)

ROLES = ("global_auditor", "contextual_enricher", "local_refiner")
ROLE_PRIORITY = {role: i for i, role in enumerate(ROLES)}

DEFAULT_NOISE_RATIO = 3.0
DEFAULT_DRIFT_SIMILARITY = 0.6
DEFAULT_MAX_SHIFT = 4
DEFAULT_STEPS = 6

_LAPLACIAN = np.array([[0, 1, 0], [1, -4, 1], [0, 1, 0]], dtype=np.float64)


def role_template(role: str) -> str:
    """Load the versioned system template for an agent role."""
    if role not in ROLES and role != "format_reminder":
        raise ValueError(f"unknown role {role!r}")
    return (resources.files("photoflow.templates")
            .joinpath(f"{role}.txt").read_text())


@dataclass
class AgentCritique:
    role: str
    findings: str
    suggestions: list  # of (target_entity, instruction)


@dataclass
class ForgeConfig:
    steps: int = DEFAULT_STEPS
    noise_ratio: float = DEFAULT_NOISE_RATIO
    drift_similarity: float = DEFAULT_DRIFT_SIMILARITY
    max_shift: int = DEFAULT_MAX_SHIFT
    prompt_token_budget: int = 32
    mask_mode: str = "auto"
    mask_params: MaskParams = field(default_factory=MaskParams)


@dataclass
class PairedSample:
    x_prev: np.ndarray
    x_next: np.ndarray
    condition: object
    prompt: str
    mask: SemanticMask
    step: int
    provenance: dict = field(default_factory=dict)


def _parse_critique(role: str, text: str) -> AgentCritique:
    try:
        payload = json.loads(text)
        suggestions = [(s["target"], s["instruction"])
                       for s in payload["suggestions"]]
        if not suggestions:
            raise ValueError("no suggestions")
        return AgentCritique(role=role, findings=payload.get("findings", ""),
                             suggestions=suggestions)
    except (ValueError, KeyError, TypeError) as exc:
        raise UnparseableResponse(f"{role} response not parseable: {exc}") from exc


def critique(image, role: str, chat_client) -> AgentCritique:
    """Run one agent role on the current image.

    Malformed responses trigger a single reprompt with a format reminder
    before :class:`UnparseableResponse` is raised.
    """
    system = role_template(role)
    response = chat_client.complete(system, "Critique this image.", image=image)
    try:
        return _parse_critique(role, response)
    except UnparseableResponse:
        reminder = role_template("format_reminder")
        response = chat_client.complete(system, reminder, image=image)
        return _parse_critique(role, response)


def synthesize_prompt(critiques, token_budget: int = 32) -> str:
    """Merge suggestions into one imperative instruction.

    Priority auditor > enricher > refiner on conflicting targets;
    deduplicate by entity; keep whole suggestions until the whitespace-token
    budget runs out.
    """
    ordered = sorted(critiques, key=lambda c: ROLE_PRIORITY.get(c.role, 99))
    merged, seen = [], set()
    for crit in ordered:
        for target, instruction in crit.suggestions:
            key = target.strip().lower()
            if key in seen:
                continue
            seen.add(key)
            merged.append(instruction.strip().rstrip("."))
    if not merged:
        raise EmptyCritiques("no critique carried a suggestion")
    parts, used = [], 0
    for instruction in merged:
        cost = len(instruction.split())
        if parts and used + cost > token_budget:
            break
        parts.append(instruction)
        used += cost
    return "; ".join(parts)


def laplacian_variance(image: np.ndarray) -> float:
    """High-frequency energy proxy: variance of the Laplacian of luminance."""
    luma = imgio.luminance(np.asarray(image, dtype=np.float64))
    lap = ndimage.convolve(luma, _LAPLACIAN, mode="reflect")
    return float(lap.var())


def filter_sample(pair: PairedSample, config: ForgeConfig,
                  embedder=None) -> tuple:
    """Quality gate: reject pairs with excessive added noise or semantic
    drift. Returns ``("keep", None)`` or ``("reject", reason)``."""
    var_prev = laplacian_variance(pair.x_prev)
    var_next = laplacian_variance(pair.x_next)
    ratio = var_next / max(var_prev, 1e-12)
    if ratio > config.noise_ratio:
        return "reject", "noise"
    if embedder is not None:
        try:
            a = np.asarray(embedder.embed_image(pair.x_prev), dtype=np.float64)
            b = np.asarray(embedder.embed_image(pair.x_next), dtype=np.float64)
            denom = np.linalg.norm(a) * np.linalg.norm(b)
            similarity = float(a @ b / denom) if denom > 0 else 0.0
            if similarity < config.drift_similarity:
                return "reject", "drift"
        except EmbedderUnavailable:
            logger.warning("embedder unavailable, drift check skipped")
            pair.provenance["drift_check"] = "skipped"
    return "keep", None


def _translate(image: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """Integer shift with edge replication: output[r, c] = input[r-dy, c-dx]."""
    h, w = image.shape[:2]
    pad = max(abs(dx), abs(dy))
    if pad == 0:
        return image.copy()
    widths = ((pad, pad), (pad, pad)) + ((0, 0),) * (image.ndim - 2)
    padded = np.pad(image, widths, mode="edge")
    return padded[pad - dy:pad - dy + h, pad - dx:pad - dx + w]


def _zncc(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    denom = np.sqrt((a * a).sum() * (b * b).sum())
    if denom == 0:
        return 0.0
    return float((a * b).sum() / denom)


def align_pair(x_prev: np.ndarray, x_next: np.ndarray,
               max_shift: int = DEFAULT_MAX_SHIFT):
    """Undo small integer drifts of the edited frame.

    Exhaustive search over shifts in [-S, S]^2 maximizing zero-normalized
    cross-correlation of luminance between ``x_prev`` and the shifted-back
    ``x_next``. Ties break toward the smallest shift. Returns
    ``(aligned_next, (dx, dy))`` where (dx, dy) is the detected drift.
    """
    luma_prev = imgio.luminance(np.asarray(x_prev, dtype=np.float64))
    luma_next = imgio.luminance(np.asarray(x_next, dtype=np.float64))
    h, w = luma_prev.shape
    best = (0, 0)
    best_score = -np.inf
    for dy in range(-max_shift, max_shift + 1):
        for dx in range(-max_shift, max_shift + 1):
            # compare on the valid overlap of prev and next shifted back
            r0, r1 = max(0, dy), h + min(0, dy)
            c0, c1 = max(0, dx), w + min(0, dx)
            if r1 - r0 < 2 or c1 - c0 < 2:
                continue
            window_prev = luma_prev[r0 - dy:r1 - dy, c0 - dx:c1 - dx]
            window_next = luma_next[r0:r1, c0:c1]
            score = _zncc(window_prev, window_next)
            cost = (abs(dx) + abs(dy), abs(dx), abs(dy))
            if score > best_score + 1e-12 or (
                    abs(score - best_score) <= 1e-12
                    and cost < (abs(best[0]) + abs(best[1]),
                                abs(best[0]), abs(best[1]))):
                best_score = score
                best = (dx, dy)
    dx, dy = best
    aligned = _translate(np.asarray(x_next), -dx, -dy)
    return aligned, (dx, dy)


def build_trajectory(
    g: GBufferSet,
    base_render: np.ndarray,
    editing_backend,
    codec,
    chat_client,
    embedder=None,
    segmentation_backend=None,
    config: ForgeConfig | None = None,
):
    """Run one scene's expert-guided refinement trajectory.

    Each step: three role critiques of the current image -> one merged
    prompt -> mask resolution -> editing backend -> filter + align. A
    rejected sample truncates the trajectory; partial output is returned.
    Returns ``(samples, status)`` where status is ``complete`` or
    ``truncated:<reason>``.
    """
    config = config or ForgeConfig()
    samples = []
    current = np.asarray(base_render, dtype=np.float32)
    status = "complete"
    for t in range(config.steps):
        critiques = [critique(current, role, chat_client) for role in ROLES]
        prompt = synthesize_prompt(critiques, config.prompt_token_budget)
        try:
            mask = resolve_mask(config.mask_mode, prompt, None, current,
                                config.mask_params, segmentation_backend)
        except NoEntityFound:
            mask = refine_mask(np.ones(current.shape[:2], dtype=np.float32),
                               config.mask_params.threshold, 0, 0.0,
                               source="auto", entity="")
        condition = assemble_condition(g, mask=mask.refined)
        z = codec.encode(current)
        edited = np.asarray(
            editing_backend.generate(z, t, condition, mask=mask.refined,
                                     prompt=prompt),
            dtype=np.float32)
        edited = np.clip(edited, 0.0, 1.0)
        aligned, shift = align_pair(current, edited, config.max_shift)
        pair = PairedSample(
            x_prev=current, x_next=aligned, condition=condition,
            prompt=prompt, mask=mask, step=t,
            provenance={
                "scene_id": g.scene_id,
                "agent_findings": {c.role: c.findings for c in critiques},
                "alignment_shift": list(shift),
            })
        verdict, reason = filter_sample(pair, config, embedder)
        pair.provenance["filter_verdict"] = verdict
        if verdict == "reject":
            pair.provenance["filter_reason"] = reason
            status = f"truncated:{reason}"
            break
        samples.append(pair)
        current = aligned
    return samples, status


# --------------------------------------------------------------------------
# dataset layout

def write_sample(sample: PairedSample, dataset_dir: str | os.PathLike) -> dict:
    """Persist one kept sample under
    ``dataset/<scene_id>/step_<t>/`` and return its manifest record."""
    scene_dir = os.path.join(os.fspath(dataset_dir),
                             sample.provenance["scene_id"],
                             f"step_{sample.step}")
    os.makedirs(scene_dir, exist_ok=True)
    imgio.save_png(os.path.join(scene_dir, "prev.png"), sample.x_prev, 16)
    imgio.save_png(os.path.join(scene_dir, "next.png"), sample.x_next, 16)
    save_mask(sample.mask, os.path.join(scene_dir, "mask.png"))
    with open(os.path.join(scene_dir, "prompt.txt"), "w") as fh:
        fh.write(sample.prompt)
    meta = {"step": sample.step, "prompt": sample.prompt,
            "provenance": sample.provenance}
    with open(os.path.join(scene_dir, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    return {"scene_id": sample.provenance["scene_id"], "step": sample.step,
            "path": os.path.relpath(scene_dir, os.fspath(dataset_dir)),
            "prompt": sample.prompt}


def completed_scenes(manifest_path: str | os.PathLike) -> set:
    """Scene ids already present in an append-only manifest."""
    done = set()
    if os.path.exists(manifest_path):
        with open(manifest_path) as fh:
            for line in fh:
                line = line.strip()
                if line:
                    done.add(json.loads(line)["scene_id"])
    return done


def build_dataset(
    scenes,  # iterable of (GBufferSet, base_render)
    dataset_dir: str | os.PathLike,
    editing_backend,
    codec,
    chat_client,
    embedder=None,
    segmentation_backend=None,
    config: ForgeConfig | None = None,
    workers: int = 1,
) -> dict:
    """Process scenes through the forge with a bounded worker pool.

    Scenes already listed in ``manifest.jsonl`` are skipped (resumable).
    The manifest writer is the single synchronization point.
    """
    config = config or ForgeConfig()
    dataset_dir = os.fspath(dataset_dir)
    os.makedirs(dataset_dir, exist_ok=True)
    manifest_path = os.path.join(dataset_dir, "manifest.jsonl")
    done = completed_scenes(manifest_path)
    pending = [(g, base) for g, base in scenes if g.scene_id not in done]

    counts = {"kept": 0, "skipped_scenes": len(done), "truncated": 0}

    def run_scene(g, base):
        return build_trajectory(g, base, editing_backend, codec, chat_client,
                                embedder, segmentation_backend, config)

    with open(manifest_path, "a") as manifest, \
            ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        futures = {pool.submit(run_scene, g, base): g for g, base in pending}
        for future in as_completed(futures):
            samples, status = future.result()
            if status != "complete":
                counts["truncated"] += 1
            for sample in samples:
                record = write_sample(sample, dataset_dir)
                manifest.write(json.dumps(record, sort_keys=True) + "\n")
                counts["kept"] += 1
    return counts
