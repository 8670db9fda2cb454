"""Physical condition signals: loading, validation, assembly, channel dropout.

A scene contributes six buffers (albedo, roughness, metallic, normal, depth,
irradiance). Scalar buffers are replicated to 3 channels on assembly, giving
an 18-channel physical block; 3 mask channels complete the 21-channel
control tensor.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import imgio
from .errors import DecodeError, DimensionMismatch, MissingBuffer

BUFFER_NAMES = ("albedo", "roughness", "metallic", "normal", "depth", "irradiance")
SCALAR_BUFFERS = frozenset({"roughness", "metallic", "depth"})
VECTOR_BUFFERS = frozenset({"albedo", "normal", "irradiance"})

DEFAULT_RESOLUTION = 512
N_CHANNELS = 21  # 6 buffers x 3 channels + 3 mask channels

AUTO_DISCOVER_EXTS = (".exr", ".png", ".tif", ".tiff")


@dataclass
class GBufferSet:
    """The six physical buffers for one view, all in [0, 1].

    Scalar buffers are H x W; vector buffers H x W x 3. Normals are stored
    encoded (v = (n + 1) / 2). ``present[name]`` is False for buffers that
    were absent or dropped, in which case the buffer is zero-filled.
    """

    albedo: np.ndarray
    roughness: np.ndarray
    metallic: np.ndarray
    normal: np.ndarray
    depth: np.ndarray
    irradiance: np.ndarray
    width: int
    height: int
    scene_id: str = ""
    present: dict = field(default_factory=lambda: {n: True for n in BUFFER_NAMES})

    def buffer(self, name: str) -> np.ndarray:
        if name not in BUFFER_NAMES:
            raise KeyError(name)
        return getattr(self, name)

    def validate(self) -> None:
        for name in BUFFER_NAMES:
            buf = self.buffer(name)
            if buf.shape[:2] != (self.height, self.width):
                raise DimensionMismatch(
                    f"{name} is {buf.shape[:2]}, expected {(self.height, self.width)}")
            want_3ch = name in VECTOR_BUFFERS
            if want_3ch and (buf.ndim != 3 or buf.shape[2] != 3):
                raise DimensionMismatch(f"{name} must be HxWx3, got {buf.shape}")
            if not want_3ch and buf.ndim != 2:
                raise DimensionMismatch(f"{name} must be HxW, got {buf.shape}")
            if buf.size and (buf.min() < -1e-6 or buf.max() > 1.0 + 1e-6):
                raise ValueError(f"{name} values outside [0,1]")


@dataclass
class DropoutSpec:
    """Per-buffer Bernoulli retention probabilities and the RNG seed."""

    retention_probabilities: tuple = (0.8,) * 6
    seed: int = 0

    def __post_init__(self):
        probs = tuple(float(p) for p in self.retention_probabilities)
        if len(probs) != len(BUFFER_NAMES):
            raise ValueError("need one retention probability per buffer")
        if any(p < 0.0 or p > 1.0 for p in probs):
            raise ValueError("retention probabilities must lie in [0,1]")
        self.retention_probabilities = probs


@dataclass
class ConditionTensor:
    """The assembled H x W x 21 control signal."""

    data: np.ndarray
    channel_layout: list
    dropout_state: tuple

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


def decode_normals(encoded: np.ndarray) -> np.ndarray:
    """Map stored [0,1] normals back to unit vectors in [-1,1]."""
    return 2.0 * encoded - 1.0


def encode_normals(vectors: np.ndarray) -> np.ndarray:
    """Renormalize and store unit vectors in [0,1]."""
    norm = np.linalg.norm(vectors, axis=-1, keepdims=True)
    safe = np.where(norm > 0, norm, 1.0)
    return (vectors / safe + 1.0) / 2.0


def tone_map(hdr: np.ndarray) -> np.ndarray:
    """Reinhard-style map x / (1 + x) for non-negative radiance."""
    hdr = np.maximum(hdr, 0.0)
    return hdr / (1.0 + hdr)


def _normalize_depth(depth: np.ndarray) -> np.ndarray:
    lo, hi = float(depth.min()), float(depth.max())
    if hi - lo <= 0:
        return np.zeros_like(depth)
    return (depth - lo) / (hi - lo)


def _load_buffer(path: str, name: str, width: int, height: int) -> np.ndarray:
    data = imgio.load_image(path)
    data = imgio.resize(data, width, height)
    if name in VECTOR_BUFFERS:
        if data.ndim == 2:
            data = np.repeat(data[:, :, None], 3, axis=2)
        elif data.shape[2] != 3:
            raise DimensionMismatch(f"{name} from {path} has {data.shape[2]} channels")
    else:
        if data.ndim == 3:
            data = data.mean(axis=2)
    if name == "depth":
        data = _normalize_depth(data)
    elif name == "irradiance" and data.max() > 1.0:
        data = tone_map(data)
    else:
        data = np.clip(data, 0.0, 1.0)
    return np.ascontiguousarray(data, dtype=np.float32)


def _zero_buffer(name: str, width: int, height: int) -> np.ndarray:
    shape = (height, width, 3) if name in VECTOR_BUFFERS else (height, width)
    return np.zeros(shape, dtype=np.float32)


def discover_manifest(scene_dir: str | os.PathLike) -> dict:
    """Build a manifest entry from the `<scene>/{buffer}.{ext}` convention."""
    scene_dir = os.fspath(scene_dir)
    entry = {"scene_id": os.path.basename(os.path.normpath(scene_dir)), "buffers": {}}
    for name in BUFFER_NAMES:
        for ext in AUTO_DISCOVER_EXTS:
            candidate = os.path.join(scene_dir, name + ext)
            if os.path.exists(candidate):
                entry["buffers"][name] = candidate
                break
    return entry


def load_manifest(path: str | os.PathLike) -> dict:
    """Read a JSON scene manifest; buffer paths resolve relative to the file."""
    path = os.fspath(path)
    with open(path) as fh:
        entry = json.load(fh)
    base = os.path.dirname(os.path.abspath(path))
    buffers = entry.get("buffers", {})
    entry["buffers"] = {
        name: p if os.path.isabs(p) else os.path.join(base, p)
        for name, p in buffers.items()
    }
    return entry


def load_gbuffer_set(
    manifest_entry: dict,
    resolution: int = DEFAULT_RESOLUTION,
    strict: bool = False,
) -> GBufferSet:
    """Load the six buffers named by a manifest entry.

    Absent buffers are zero-filled and flagged ``present=False`` (they behave
    like dropped channels downstream). With ``strict=True`` absence raises
    :class:`MissingBuffer` instead.
    """
    width = height = int(resolution)
    paths = manifest_entry.get("buffers", {})
    buffers, present = {}, {}
    for name in BUFFER_NAMES:
        path = paths.get(name)
        if path is None or not os.path.exists(path):
            if strict:
                raise MissingBuffer(f"buffer {name!r} missing for scene "
                                    f"{manifest_entry.get('scene_id', '?')!r}")
            buffers[name] = _zero_buffer(name, width, height)
            present[name] = False
            continue
        try:
            buffers[name] = _load_buffer(path, name, width, height)
        except DecodeError:
            raise
        present[name] = True
    g = GBufferSet(width=width, height=height,
                   scene_id=str(manifest_entry.get("scene_id", "")),
                   present=present, **buffers)
    g.validate()
    return g


def _as_3ch(buf: np.ndarray) -> np.ndarray:
    if buf.ndim == 2:
        return np.repeat(buf[:, :, None], 3, axis=2)
    return buf


def assemble_condition(
    g: GBufferSet,
    mask: np.ndarray | None = None,
    dropout_state: tuple | None = None,
) -> ConditionTensor:
    """Concatenate the 18 buffer channels with 3 mask channels.

    Channel order: albedo(0-2), roughness(3-5), metallic(6-8), normal(9-11),
    depth(12-14), irradiance(15-17), mask(18-20). A missing mask encodes as
    all-zero mask channels (the pure synthesis case). Pure function.
    """
    if dropout_state is None:
        dropout_state = tuple(bool(g.present[n]) for n in BUFFER_NAMES)
    dropout_state = tuple(bool(b) for b in dropout_state)

    data = np.zeros((g.height, g.width, N_CHANNELS), dtype=np.float32)
    layout = []
    for i, name in enumerate(BUFFER_NAMES):
        span = (3 * i, 3 * i + 3)
        layout.append((name, span))
        if dropout_state[i]:
            data[:, :, span[0]:span[1]] = _as_3ch(g.buffer(name))
    layout.append(("mask", (18, 21)))
    if mask is not None:
        if mask.shape[:2] != (g.height, g.width):
            raise DimensionMismatch(
                f"mask is {mask.shape[:2]}, buffers are {(g.height, g.width)}")
        data[:, :, 18:21] = _as_3ch(np.asarray(mask, dtype=np.float32))
    return ConditionTensor(data=data, channel_layout=layout,
                           dropout_state=dropout_state)


def apply_channel_dropout(g: GBufferSet, spec: DropoutSpec):
    """Independently retain each buffer with its probability; zero-fill drops.

    Deterministic for a fixed seed. Returns the new set and the draw.
    Absent buffers stay dropped regardless of the draw.
    """
    rng = np.random.default_rng(spec.seed)
    draw = rng.random(len(BUFFER_NAMES))
    kept = tuple(
        bool(draw[i] < spec.retention_probabilities[i]) and g.present[name]
        for i, name in enumerate(BUFFER_NAMES)
    )
    buffers = {}
    for i, name in enumerate(BUFFER_NAMES):
        buf = g.buffer(name)
        buffers[name] = buf.copy() if kept[i] else np.zeros_like(buf)
    out = GBufferSet(width=g.width, height=g.height, scene_id=g.scene_id,
                     present={n: kept[i] for i, n in enumerate(BUFFER_NAMES)},
                     **buffers)
    return out, kept
