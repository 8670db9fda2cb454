"""Backend contracts, deterministic mocks, and the external HTTP adapter.

The generative slot computes x_{t+1} = f(z, t, C, M, y). Real models live
out-of-process behind :class:`ExternalAdapter`; everything in-core is
testable against the closed-form mocks below.
"""

from __future__ import annotations

import base64
import hashlib
import json
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from typing import Protocol, runtime_checkable

import numpy as np

from . import imgio
from .errors import (
    BackendUnavailable,
    NonFiniteOutput,
    ProtocolError,
    RemoteError,
    ShapeError,
)
from .gbuffer import N_CHANNELS, ConditionTensor


@dataclass
class GenerativeBackendSpec:
    name: str
    accepts_mask: bool = True
    accepts_prompt: bool = True
    deterministic: bool = False
    native_resolution: int = 512
    reentrant: bool = True


@runtime_checkable
class GenerativeBackend(Protocol):
    spec: GenerativeBackendSpec

    def generate(self, z, t, condition, mask=None, prompt=None) -> np.ndarray: ...


@runtime_checkable
class Codec(Protocol):
    def encode(self, image: np.ndarray) -> np.ndarray: ...

    def decode(self, latent: np.ndarray) -> np.ndarray: ...


@runtime_checkable
class SegmentationBackend(Protocol):
    def segment(self, image: np.ndarray, text: str) -> np.ndarray: ...


@runtime_checkable
class Embedder(Protocol):
    def embed_image(self, image: np.ndarray) -> np.ndarray: ...

    def embed_text(self, text: str) -> np.ndarray: ...


def _check_condition(condition: ConditionTensor) -> None:
    if condition.data.ndim != 3 or condition.data.shape[2] != N_CHANNELS:
        raise ShapeError(f"condition must be HxWx{N_CHANNELS}, "
                         f"got {condition.data.shape}")


def _check_image(image: np.ndarray, h: int, w: int) -> np.ndarray:
    image = np.asarray(image, dtype=np.float32)
    if image.shape != (h, w, 3):
        raise ShapeError(f"backend returned {image.shape}, expected {(h, w, 3)}")
    if not np.isfinite(image).all():
        raise NonFiniteOutput("backend returned NaN or Inf")
    return image


# --------------------------------------------------------------------------
# codecs

class IdentityCodec:
    """Latent space == image space. Exact round trip."""

    reconstruction_tolerance = 0.0

    def encode(self, image):
        return np.asarray(image, dtype=np.float32).copy()

    def decode(self, latent):
        return np.asarray(latent, dtype=np.float32).copy()


class DownsampleCodec:
    """Bilinear 1/factor latent; round trip within resampling error."""

    def __init__(self, factor: int = 2):
        self.factor = int(factor)
        self.reconstruction_tolerance = 0.25

    def encode(self, image):
        h, w = image.shape[:2]
        return imgio.resize(np.asarray(image, dtype=np.float32),
                            w // self.factor, h // self.factor)

    def decode(self, latent):
        h, w = latent.shape[:2]
        return imgio.resize(np.asarray(latent, dtype=np.float32),
                            w * self.factor, h * self.factor)


# --------------------------------------------------------------------------
# generative mocks

@dataclass
class MockConfig:
    """Closed-form contraction toward a target: x + lam * M * (target - x)."""

    target_image: np.ndarray = None
    contraction: float = 0.5
    respect_mask: bool = True

    def __post_init__(self):
        if not (0.0 < self.contraction <= 1.0):
            raise ValueError("contraction must lie in (0, 1]")


class ContractingMockBackend:
    """Deterministic stand-in for the generative model.

    Moves the previous image a fixed fraction toward the configured target,
    only inside the mask when ``respect_mask``. At t=0 the previous image is
    the black canvas (synthesis starts from nothing), so the whole intensity
    sequence is exactly geometric and convergence is analytically
    predictable.
    """

    def __init__(self, config: MockConfig, codec: Codec | None = None):
        self.config = config
        self.codec = codec or IdentityCodec()
        self.spec = GenerativeBackendSpec(
            name="mock-contracting", deterministic=True,
            native_resolution=config.target_image.shape[0])

    def generate(self, z, t, condition, mask=None, prompt=None):
        _check_condition(condition)
        target = self.config.target_image
        h, w = target.shape[:2]
        if t == 0:
            prev = np.zeros((h, w, 3), dtype=np.float32)
        else:
            prev = np.clip(self.codec.decode(z), 0.0, 1.0)
        prev = _check_image(prev, h, w)
        if self.config.respect_mask:
            m = np.ones((h, w, 1), dtype=np.float32) if mask is None \
                else np.asarray(mask, dtype=np.float32).reshape(h, w, -1)[:, :, :1]
        else:
            m = np.ones((h, w, 1), dtype=np.float32)
        out = prev + self.config.contraction * m * (target - prev)
        return _check_image(out, h, w)


class NaNMockBackend:
    """Fault injector: always emits NaN."""

    def __init__(self, resolution: int = 512):
        self.spec = GenerativeBackendSpec(name="mock-nan", deterministic=True,
                                          native_resolution=resolution)

    def generate(self, z, t, condition, mask=None, prompt=None):
        h, w = condition.data.shape[:2]
        return np.full((h, w, 3), np.nan, dtype=np.float32)


# --------------------------------------------------------------------------
# segmentation / embedding / chat mocks

class ConstantSegmentation:
    """Returns a constant probability everywhere, at a native resolution."""

    def __init__(self, value: float = 0.5, native_resolution: int | None = None):
        self.value = value
        self.native_resolution = native_resolution

    def segment(self, image, text):
        if self.native_resolution:
            shape = (self.native_resolution, self.native_resolution)
        else:
            shape = image.shape[:2]
        return np.full(shape, self.value, dtype=np.float32)


class KeyedRectangleSegmentation:
    """Maps known entity strings to fixed rectangles (r0, r1, c0, c1)."""

    def __init__(self, rectangles: dict, native_resolution: int | None = None):
        self.rectangles = dict(rectangles)
        self.native_resolution = native_resolution

    def segment(self, image, text):
        if self.native_resolution:
            shape = (self.native_resolution, self.native_resolution)
        else:
            shape = image.shape[:2]
        out = np.zeros(shape, dtype=np.float32)
        rect = self.rectangles.get(text)
        if rect is not None:
            r0, r1, c0, c1 = rect
            out[r0:r1, c0:c1] = 1.0
        return out


class HashEmbedder:
    """Deterministic text/image embedder for offline tests.

    Hashes content into a fixed-dimensional unit vector. No semantics, but
    identical inputs embed identically, which is what the contract tests
    need.
    """

    def __init__(self, dim: int = 64):
        self.dim = dim

    def _from_bytes(self, payload: bytes) -> np.ndarray:
        seed = int.from_bytes(hashlib.sha256(payload).digest()[:8], "little")
        rng = np.random.default_rng(seed)
        vec = rng.standard_normal(self.dim)
        return vec / np.linalg.norm(vec)

    def embed_text(self, text):
        return self._from_bytes(text.encode("utf-8"))

    def embed_image(self, image):
        quant = np.round(np.asarray(image, dtype=np.float32) * 255).astype(np.uint8)
        return self._from_bytes(quant.tobytes())


class FixedEmbedder:
    """Returns preconfigured vectors; for orthogonality/identity fixtures."""

    def __init__(self, image_vec, text_vecs=None, default_text_vec=None):
        self.image_vec = np.asarray(image_vec, dtype=np.float64)
        self.text_vecs = {k: np.asarray(v, dtype=np.float64)
                          for k, v in (text_vecs or {}).items()}
        self.default_text_vec = (np.asarray(default_text_vec, dtype=np.float64)
                                 if default_text_vec is not None else self.image_vec)

    def embed_image(self, image):
        return self.image_vec

    def embed_text(self, text):
        return self.text_vecs.get(text, self.default_text_vec)


class ScriptedChatClient:
    """Replays canned responses; the dataset forge's offline chat client."""

    def __init__(self, responses):
        # responses: list of strings, or dict role -> list of strings
        self.responses = responses
        self._cursors = {}
        self.calls = []

    def complete(self, system: str, user: str, image=None) -> str:
        key = system if isinstance(self.responses, dict) else "_"
        pool = self.responses[key] if isinstance(self.responses, dict) \
            else self.responses
        idx = self._cursors.get(key, 0)
        self._cursors[key] = idx + 1
        self.calls.append((system, user))
        if idx >= len(pool):
            idx = len(pool) - 1
        return pool[idx]


# --------------------------------------------------------------------------
# external adapter

def _encode_tensor(arr: np.ndarray) -> dict:
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    return {"dtype": "float32", "shape": list(arr.shape),
            "data": base64.b64encode(arr.tobytes()).decode("ascii")}


def _decode_tensor(obj: dict) -> np.ndarray:
    try:
        raw = base64.b64decode(obj["data"])
        arr = np.frombuffer(raw, dtype=np.dtype(obj["dtype"]))
        return arr.reshape(obj["shape"]).copy()
    except (KeyError, ValueError, TypeError) as exc:
        raise ProtocolError(f"bad tensor payload: {exc}") from exc


def serialize_generate_request(z, t, condition, mask=None, prompt=None) -> bytes:
    """Lossless wire form: JSON header + base64 float blobs."""
    body = {
        "header": {
            "step": int(t),
            "prompt": prompt,
            "channel_layout": [[name, list(span)]
                               for name, span in condition.channel_layout],
            "shapes": {"latent": list(np.shape(z)),
                       "condition": list(condition.data.shape)},
        },
        "latent": _encode_tensor(np.asarray(z)),
        "condition": _encode_tensor(condition.data),
    }
    if mask is not None:
        body["mask"] = _encode_tensor(np.asarray(mask))
    return json.dumps(body).encode("utf-8")


def deserialize_generate_request(payload: bytes) -> dict:
    try:
        body = json.loads(payload.decode("utf-8"))
        header = body["header"]
    except (ValueError, KeyError) as exc:
        raise ProtocolError(f"malformed request: {exc}") from exc
    out = {
        "step": header["step"],
        "prompt": header.get("prompt"),
        "channel_layout": [(name, tuple(span))
                           for name, span in header["channel_layout"]],
        "latent": _decode_tensor(body["latent"]),
        "condition": _decode_tensor(body["condition"]),
        "mask": _decode_tensor(body["mask"]) if "mask" in body else None,
    }
    return out


class ExternalAdapter:
    """Talks to an out-of-process generative model over HTTP.

    Retries with exponential backoff; validates the response against the
    generate contract before returning it.
    """

    def __init__(self, endpoint: str, timeout: float = 10.0, retries: int = 3,
                 backoff: float = 0.2, name: str = "external"):
        self.endpoint = endpoint
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self.spec = GenerativeBackendSpec(name=name, deterministic=False)

    def generate(self, z, t, condition, mask=None, prompt=None):
        _check_condition(condition)
        payload = serialize_generate_request(z, t, condition, mask, prompt)
        last_exc = None
        for attempt in range(self.retries):
            try:
                req = urllib.request.Request(
                    self.endpoint, data=payload,
                    headers={"Content-Type": "application/json"})
                with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    raw = resp.read()
                break
            except urllib.error.HTTPError as exc:
                raise RemoteError(f"remote returned {exc.code}: "
                                  f"{exc.read()[:200]!r}") from exc
            except (urllib.error.URLError, OSError) as exc:
                last_exc = exc
                time.sleep(self.backoff * (2 ** attempt))
        else:
            raise BackendUnavailable(
                f"{self.endpoint} unreachable after {self.retries} attempts: "
                f"{last_exc}")
        try:
            body = json.loads(raw.decode("utf-8"))
            image = _decode_tensor(body["image"])
        except (ValueError, KeyError) as exc:
            raise ProtocolError(f"malformed response: {exc}") from exc
        h, w = condition.data.shape[:2]
        return _check_image(image, h, w)
