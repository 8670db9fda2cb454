"""Image file I/O helpers.

All in-memory images are float32/float64 numpy arrays, RGB channel order,
values in [0, 1] unless noted. On disk we support 8/16-bit PNG and float32
TIFF. TIFF doubles as the lossless signed-float container (this build
environment ships no EXR codec).
"""

from __future__ import annotations

import os

import cv2
import numpy as np
import tifffile

from .errors import DecodeError

FLOAT_EXTS = {".tif", ".tiff", ".exr"}


def load_image(path: str | os.PathLike) -> np.ndarray:
    """Load an image as float32. RGB order for color, 2-D for grayscale.

    8/16-bit integer files are scaled to [0, 1]; float files are returned
    as stored (may be HDR or signed).
    """
    path = os.fspath(path)
    ext = os.path.splitext(path)[1].lower()
    if ext in (".tif", ".tiff"):
        try:
            data = tifffile.imread(path)
        except Exception as exc:
            raise DecodeError(f"cannot decode {path}: {exc}") from exc
        return np.asarray(data, dtype=np.float32)

    raw = cv2.imread(path, cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise DecodeError(f"cannot decode {path}")
    if raw.ndim == 3:
        if raw.shape[2] == 4:
            raw = raw[:, :, :3]
        raw = raw[:, :, ::-1]  # BGR -> RGB
    data = raw.astype(np.float32)
    if raw.dtype == np.uint8:
        data /= 255.0
    elif raw.dtype == np.uint16:
        data /= 65535.0
    return data


def save_png(path: str | os.PathLike, image: np.ndarray, bit_depth: int = 8) -> None:
    """Write a [0,1] image as 8- or 16-bit PNG."""
    if bit_depth not in (8, 16):
        raise ValueError(f"bit_depth must be 8 or 16, got {bit_depth}")
    peak = 255 if bit_depth == 8 else 65535
    dtype = np.uint8 if bit_depth == 8 else np.uint16
    quant = np.round(np.clip(image, 0.0, 1.0) * peak).astype(dtype)
    if quant.ndim == 3:
        quant = quant[:, :, ::-1]  # RGB -> BGR
    if not cv2.imwrite(os.fspath(path), quant):
        raise IOError(f"failed to write {path}")


def save_float(path: str | os.PathLike, image: np.ndarray) -> None:
    """Write a lossless float32 image (signed values allowed)."""
    data = np.asarray(image, dtype=np.float32)
    photometric = "rgb" if data.ndim == 3 and data.shape[2] == 3 else "minisblack"
    tifffile.imwrite(os.fspath(path), data, photometric=photometric)


def resize(image: np.ndarray, width: int, height: int) -> np.ndarray:
    """Bilinear resize to width x height; identity when already sized."""
    h, w = image.shape[:2]
    if (w, h) == (width, height):
        return image
    return cv2.resize(image, (width, height), interpolation=cv2.INTER_LINEAR)


def luminance(image: np.ndarray) -> np.ndarray:
    """Rec. 709 luma of an RGB image (passes grayscale through)."""
    if image.ndim == 2:
        return image
    return (0.2126 * image[:, :, 0]
            + 0.7152 * image[:, :, 1]
            + 0.0722 * image[:, :, 2])
