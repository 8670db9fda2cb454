"""Prompt-to-mask pipeline: entity extraction, segmentation, refinement.

An instruction like "add a red car on the road" is reduced to its target
entity ("red car"), grounded by a segmentation backend into a raw
probability map, then refined: threshold, disk dilation, Gaussian feather.
Refined masks gate where the per-step image update is applied.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import imgio
from .errors import MissingUserMask, NoEntityFound, ShapeError

# Imperative command verbs stripped from the head of instructions.
COMMAND_VERBS = (
    "add", "remove", "make", "enhance", "replace", "improve", "refine",
    "increase", "decrease", "delete", "insert", "place", "put", "change",
    "adjust", "fix", "clean", "brighten", "darken", "soften", "sharpen",
)

# Abstract nouns that cannot be spatially grounded.
ABSTRACT_NOUNS = (
    "realism", "quality", "fidelity", "style", "mood", "atmosphere",
    "aesthetics", "appearance", "look", "feel", "vibe", "overall",
)

_ARTICLES = {"a", "an", "the", "some", "more", "its", "their"}
_PREPOSITIONS = {
    "on", "in", "at", "with", "to", "into", "onto", "over", "under",
    "near", "by", "from", "above", "below", "behind", "beside", "of",
    "across", "along", "around", "toward", "towards",
}
_WORD_RE = re.compile(r"[a-z0-9'-]+")

DEFAULT_THRESHOLD = 0.4
DEFAULT_DILATION_RADIUS = 5  # pixels at 512 resolution; scales linearly
DEFAULT_SIGMA = 3.0


@dataclass
class Entity:
    """The salient noun phrase extracted from an instruction."""

    text: str
    source_prompt: str


@dataclass
class SemanticMask:
    """Raw probability map plus the refined soft mask, with provenance."""

    raw: np.ndarray
    refined: np.ndarray
    source: str  # "auto" or "user"
    threshold: float
    dilation_radius: int
    gaussian_sigma: float
    entity: str = ""


@dataclass
class MaskParams:
    """Refinement knobs, resolution-aware."""

    threshold: float = DEFAULT_THRESHOLD
    dilation_radius: int = DEFAULT_DILATION_RADIUS
    gaussian_sigma: float = DEFAULT_SIGMA
    command_verbs: tuple = COMMAND_VERBS
    abstract_nouns: tuple = ABSTRACT_NOUNS

    def scaled_radius(self, resolution: int, base: int = 512) -> int:
        return max(0, round(self.dilation_radius * resolution / base))


def extract_entity(
    prompt: str,
    command_verbs=COMMAND_VERBS,
    abstract_nouns=ABSTRACT_NOUNS,
) -> Entity:
    """Pull the head noun phrase of the instruction's direct object.

    Rule-based: drop leading command verbs and articles, cut the phrase at
    the first preposition. Falls back to the longest candidate phrase when
    the direct object is empty. Purely abstract phrases raise
    :class:`NoEntityFound`.
    """
    if not prompt or not prompt.strip():
        raise NoEntityFound("empty prompt")
    verbs = set(command_verbs)
    abstract = set(abstract_nouns)
    tokens = _WORD_RE.findall(prompt.lower())

    # Split into candidate phrases at verbs and prepositions.
    phrases, current = [], []
    for tok in tokens:
        if tok in verbs or tok in _PREPOSITIONS:
            if current:
                phrases.append(current)
            current = []
        elif tok not in _ARTICLES:
            current.append(tok)
    if current:
        phrases.append(current)

    def grounded(phrase):
        return [t for t in phrase if t not in abstract]

    candidates = [grounded(p) for p in phrases]
    candidates = [c for c in candidates if c]
    if not candidates:
        raise NoEntityFound(f"no concrete noun phrase in {prompt!r}")
    # Direct object = first phrase after the command verb; phrases are in
    # prompt order, so the first surviving candidate is it.
    text = " ".join(candidates[0])
    return Entity(text=text, source_prompt=prompt)


def disk_footprint(radius: int) -> np.ndarray:
    """Boolean disk: all offsets with dx^2 + dy^2 <= r^2."""
    if radius <= 0:
        return np.ones((1, 1), dtype=bool)
    coords = np.arange(-radius, radius + 1)
    dy, dx = np.meshgrid(coords, coords, indexing="ij")
    return (dx * dx + dy * dy) <= radius * radius


def refine_mask(
    raw: np.ndarray,
    threshold: float = DEFAULT_THRESHOLD,
    dilation_radius: int = DEFAULT_DILATION_RADIUS,
    sigma: float = DEFAULT_SIGMA,
    source: str = "auto",
    entity: str = "",
) -> SemanticMask:
    """Binarize at the confidence threshold, dilate with a disk, feather.

    The Gaussian uses reflective borders; output clamped to [0,1]. An
    all-zero raw map yields an all-zero refined mask.
    """
    if not (0.0 < threshold < 1.0):
        raise ValueError(f"threshold must lie in (0,1), got {threshold}")
    if dilation_radius < 0 or sigma < 0:
        raise ValueError("dilation_radius and sigma must be non-negative")
    raw = np.asarray(raw, dtype=np.float32)
    binary = raw > threshold
    if dilation_radius > 0 and binary.any():
        binary = ndimage.binary_dilation(binary, structure=disk_footprint(dilation_radius))
    refined = binary.astype(np.float64)
    if sigma > 0:
        refined = ndimage.gaussian_filter(refined, sigma=sigma, mode="reflect")
    refined = np.clip(refined, 0.0, 1.0).astype(np.float32)
    return SemanticMask(raw=raw, refined=refined, source=source,
                        threshold=threshold, dilation_radius=dilation_radius,
                        gaussian_sigma=sigma, entity=entity)


def segment(image: np.ndarray, entity: Entity, backend) -> np.ndarray:
    """Ground the entity on the image via the segmentation backend.

    Backend-native maps are bilinearly resampled to the image grid.
    """
    raw = np.asarray(backend.segment(image, entity.text), dtype=np.float32)
    if raw.ndim != 2:
        raise ShapeError(f"segmentation backend returned shape {raw.shape}")
    h, w = image.shape[:2]
    if raw.shape != (h, w):
        raw = imgio.resize(raw, w, h)
    if raw.min() < -1e-6 or raw.max() > 1.0 + 1e-6:
        raise ShapeError("segmentation probabilities outside [0,1]")
    return np.clip(raw, 0.0, 1.0)


def resolve_mask(
    mode: str,
    prompt: str | None,
    user_mask: np.ndarray | None,
    image: np.ndarray,
    params: MaskParams | None = None,
    backend=None,
) -> SemanticMask:
    """Produce the refined mask from either source.

    ``user`` mode takes the supplied map as raw (no extraction/segmentation);
    ``auto`` mode runs extract -> segment -> refine.
    """
    params = params or MaskParams()
    radius = params.scaled_radius(max(image.shape[:2]))
    if mode == "user":
        if user_mask is None:
            raise MissingUserMask("user mode requires a mask")
        if user_mask.shape[:2] != image.shape[:2]:
            raise ShapeError(f"user mask {user_mask.shape[:2]} does not match "
                             f"image {image.shape[:2]}")
        return refine_mask(user_mask, params.threshold, radius,
                           params.gaussian_sigma, source="user")
    if mode == "auto":
        entity = extract_entity(prompt or "", params.command_verbs,
                                params.abstract_nouns)
        raw = segment(image, entity, backend)
        return refine_mask(raw, params.threshold, radius,
                           params.gaussian_sigma, source="auto",
                           entity=entity.text)
    raise ValueError(f"unknown mask mode {mode!r}")


def save_mask(mask: SemanticMask, path: str | os.PathLike) -> None:
    """Persist the refined mask as 8-bit PNG plus a JSON sidecar."""
    path = os.fspath(path)
    imgio.save_png(path, mask.refined, bit_depth=8)
    sidecar = {
        "source": mask.source,
        "threshold": mask.threshold,
        "dilation_radius": mask.dilation_radius,
        "gaussian_sigma": mask.gaussian_sigma,
        "entity": mask.entity,
    }
    with open(os.path.splitext(path)[0] + ".json", "w") as fh:
        json.dump(sidecar, fh, indent=2)
