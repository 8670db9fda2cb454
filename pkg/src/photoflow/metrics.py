"""Evaluation battery: pixel metrics, embedding-based semantic scores,
composite scores, distributional distance, convergence-curve extraction.

Embedding-dependent metrics take any object with ``embed_image`` /
``embed_text``; heavyweight pretrained scorers plug in through that
interface and are not bundled.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, asdict

import numpy as np
from scipy.signal import convolve2d

from . import imgio
from .errors import NonPositiveInput, ShapeError, TooFewSamples, TooSmall, ZeroMask

PSNR_CAP_DB = 99.0


def _check_pair(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    return (np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE), capped at 99 dB for identical images."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(peak * peak / mse))


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    coords = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(coords ** 2) / (2 * sigma * sigma))
    kernel = np.outer(g, g)
    return kernel / kernel.sum()


def ssim(a: np.ndarray, b: np.ndarray, window: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03, peak: float = 1.0) -> float:
    """Gaussian-windowed structural similarity on luminance.

    Valid-region windowing (no padding), averaged over the image.
    """
    a, b = _check_pair(a, b)
    luma_a, luma_b = imgio.luminance(a), imgio.luminance(b)
    if min(luma_a.shape) < window:
        raise TooSmall(f"image {luma_a.shape} smaller than window {window}")
    kernel = _gaussian_window(window, sigma)
    c1 = (k1 * peak) ** 2
    c2 = (k2 * peak) ** 2

    def filt(x):
        return convolve2d(x, kernel, mode="valid")

    mu_a, mu_b = filt(luma_a), filt(luma_b)
    var_a = filt(luma_a * luma_a) - mu_a * mu_a
    var_b = filt(luma_b * luma_b) - mu_b * mu_b
    cov = filt(luma_a * luma_b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.linalg.norm(a) * np.linalg.norm(b)
    if denom == 0.0:
        return 0.0
    return float(a @ b / denom)


def mask_bbox(mask: np.ndarray, expand: float = 0.10) -> tuple:
    """Bounding box (r0, r1, c0, c1) of the mask support, each side grown by
    ``expand`` of the box size, clamped to the image."""
    mask = np.asarray(mask)
    rows = np.flatnonzero(mask.sum(axis=1) if mask.ndim == 2
                          else mask.sum(axis=(1, 2)))
    cols = np.flatnonzero(mask.sum(axis=0) if mask.ndim == 2
                          else mask.sum(axis=(0, 2)))
    if rows.size == 0 or cols.size == 0:
        raise ZeroMask("mask has no support")
    r0, r1 = int(rows[0]), int(rows[-1]) + 1
    c0, c1 = int(cols[0]), int(cols[-1]) + 1
    dr = int(round((r1 - r0) * expand))
    dc = int(round((c1 - c0) * expand))
    h, w = mask.shape[:2]
    return (max(0, r0 - dr), min(h, r1 + dr),
            max(0, c0 - dc), min(w, c1 + dc))


def global_clip(image: np.ndarray, prompt: str, embedder) -> float:
    """Cosine similarity between image and text embeddings."""
    return _cosine(embedder.embed_image(image), embedder.embed_text(prompt))


def local_clip(image: np.ndarray, mask: np.ndarray, prompt: str,
               embedder) -> float:
    """Global score on the mask bounding box (expanded 10%)."""
    r0, r1, c0, c1 = mask_bbox(mask)
    return global_clip(image[r0:r1, c0:c1], prompt, embedder)


def delta_clip(source: np.ndarray, output: np.ndarray, prompt: str,
               embedder) -> float:
    """Net increase of the global image-text similarity over the source."""
    return global_clip(output, prompt, embedder) - global_clip(source, prompt,
                                                               embedder)


def directional_clip(source: np.ndarray, output: np.ndarray,
                     source_caption: str, target_caption: str,
                     embedder) -> float:
    """Cosine between the image-embedding change and the caption-embedding
    change."""
    d_img = (np.asarray(embedder.embed_image(output), dtype=np.float64)
             - np.asarray(embedder.embed_image(source), dtype=np.float64))
    d_txt = (np.asarray(embedder.embed_text(target_caption), dtype=np.float64)
             - np.asarray(embedder.embed_text(source_caption), dtype=np.float64))
    return _cosine(d_img, d_txt)


def q_score(ssim_value: float, local_clip_value: float) -> float:
    """Harmonic mean 2ab/(a+b) of the structure and local alignment scores."""
    if ssim_value <= 0.0 or local_clip_value <= 0.0:
        raise NonPositiveInput("harmonic mean needs strictly positive inputs")
    return 2.0 * ssim_value * local_clip_value / (ssim_value + local_clip_value)


def _poly_kernel(x: np.ndarray, y: np.ndarray, degree: int) -> np.ndarray:
    d = x.shape[1]
    return (x @ y.T / d + 1.0) ** degree


def _mmd2_unbiased(x: np.ndarray, y: np.ndarray, degree: int) -> float:
    m, n = x.shape[0], y.shape[0]
    kxx = _poly_kernel(x, x, degree)
    kyy = _poly_kernel(y, y, degree)
    kxy = _poly_kernel(x, y, degree)
    term_x = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    term_y = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    if m == n:
        # U-statistic form: exactly zero on identical sets
        cross = (kxy.sum() - np.trace(kxy)) / (m * (m - 1))
    else:
        cross = kxy.mean()
    return float(term_x + term_y - 2.0 * cross)


def kid(features_real: np.ndarray, features_gen: np.ndarray, degree: int = 3,
        subset_size: int | None = None, n_subsets: int = 1,
        seed: int = 0) -> float:
    """Unbiased polynomial-kernel MMD^2 between two feature sets.

    Kernel (x.y/d + 1)^degree. With ``subset_size`` set, averages the
    estimate over ``n_subsets`` random subsets of each side.
    """
    x = np.asarray(features_real, dtype=np.float64)
    y = np.asarray(features_gen, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[1]:
        raise ShapeError("feature sets must be N x D with matching D")
    if x.shape[0] < 2 or y.shape[0] < 2:
        raise TooFewSamples("need at least 2 feature vectors per side")
    if subset_size is None:
        return _mmd2_unbiased(x, y, degree)
    if subset_size < 2:
        raise TooFewSamples("subset_size must be >= 2")
    rng = np.random.default_rng(seed)
    values = []
    for _ in range(n_subsets):
        xi = x[rng.choice(x.shape[0], min(subset_size, x.shape[0]),
                          replace=False)]
        yi = y[rng.choice(y.shape[0], min(subset_size, y.shape[0]),
                          replace=False)]
        values.append(_mmd2_unbiased(xi, yi, degree))
    return float(np.mean(values))


class RandomProjectionFeatures:
    """Deterministic test-time feature extractor: a fixed random projection
    of downsampled pixels."""

    def __init__(self, dim: int = 32, seed: int = 0, patch: int = 16):
        self.dim = dim
        self.patch = patch
        rng = np.random.default_rng(seed)
        self._matrix = rng.standard_normal((patch * patch * 3, dim))
        self._matrix /= np.sqrt(patch * patch * 3)

    def features(self, images) -> np.ndarray:
        rows = []
        for image in images:
            small = imgio.resize(np.asarray(image, dtype=np.float32),
                                 self.patch, self.patch)
            if small.ndim == 2:
                small = np.repeat(small[:, :, None], 3, axis=2)
            rows.append(small.reshape(-1) @ self._matrix)
        return np.stack(rows)


def convergence_curve(trajectory, tau_stop: float):
    """The logged intensity series and the first step whose intensity fell
    below the stop threshold (1-based step index, None if never)."""
    series = list(trajectory.intensities)
    if not series:
        raise ValueError("trajectory carries no intensities")
    for i, value in enumerate(series):
        if value < tau_stop:
            return series, i + 1
    return series, None


# --------------------------------------------------------------------------
# reporting

@dataclass
class EvalRecord:
    scene_id: str
    psnr: float | None = None
    ssim: float | None = None
    local_clip: float | None = None
    global_clip: float | None = None
    directional_clip: float | None = None
    delta_clip: float | None = None
    q_score: float | None = None
    kid: float | None = None
    intensity_curve: list | None = None

    def __post_init__(self):
        if self.q_score is None and self.ssim is not None \
                and self.local_clip is not None:
            try:
                self.q_score = q_score(self.ssim, self.local_clip)
            except NonPositiveInput:
                self.q_score = None


def write_report(records, out_dir: str | os.PathLike) -> dict:
    """Write eval.jsonl (one record per scene) plus summary.json of means."""
    out_dir = os.fspath(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "eval.jsonl"), "w") as fh:
        for record in records:
            fh.write(json.dumps(asdict(record), sort_keys=True) + "\n")
    summary = {"count": len(records)}
    for key in ("psnr", "ssim", "local_clip", "global_clip",
                "directional_clip", "delta_clip", "q_score", "kid"):
        values = [getattr(r, key) for r in records
                  if getattr(r, key) is not None]
        summary[key] = float(np.mean(values)) if values else None
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    return summary
