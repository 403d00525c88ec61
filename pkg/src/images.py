"""Grayscale image I/O (PGM P5 / PNG), resizing and noise visualization."""
from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DatasetError

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".pgm", ".png")
TARGET_SIZE = 256


def read_image(path: str | Path) -> np.ndarray:
    """Load an 8-bit grayscale image as an (H, W) uint8 array."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            if im.mode != "L":
                raise DatasetError(f"{path}: expected 8-bit grayscale, got mode {im.mode}")
            return np.array(im, dtype=np.uint8)
    except (OSError, UnidentifiedImageError) as e:
        raise DatasetError(f"{path}: cannot read image: {e}") from e


def write_image(path: str | Path, image: np.ndarray) -> Path:
    """Write PGM (P5) or PNG depending on the suffix."""
    path = Path(path)
    arr = np.asarray(image)
    if arr.ndim != 2 or arr.dtype != np.uint8:
        raise DatasetError(f"{path}: expected a 2-D uint8 image, got {arr.dtype} {arr.shape}")
    suffix = path.suffix.lower()
    if suffix not in IMAGE_SUFFIXES:
        raise DatasetError(f"{path}: unsupported image suffix (use {' or '.join(IMAGE_SUFFIXES)})")
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path, format="PPM" if suffix == ".pgm" else "PNG")
    return path


def list_images(directory: str | Path) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise DatasetError(f"{directory}: not a directory")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def resize_to_256(image: np.ndarray, size: int = TARGET_SIZE) -> np.ndarray:
    """Bicubic antialiased downscale to ``size`` x ``size``, rounded into [0, 255]."""
    arr = np.asarray(image, dtype=np.uint8)
    h, w = arr.shape
    if h != w:
        raise DatasetError(f"resize expects a square image, got {h}x{w}")
    if h < size:
        raise DatasetError(f"resize expects at least {size}x{size}, got {h}x{w}")
    if h == size:
        return arr.copy()
    # Pillow widens the bicubic support by the scale factor, which antialiases
    resized = Image.fromarray(arr).resize((size, size), resample=Image.Resampling.BICUBIC)
    return np.array(resized, dtype=np.uint8)


def noise_to_image(noise: np.ndarray) -> np.ndarray:
    """Map a signed residual to uint8 with zero at mid-gray (128)."""
    noise = np.asarray(noise, dtype=np.float64)
    peak = np.abs(noise).max()
    if peak == 0:
        return np.full(noise.shape, 128, dtype=np.uint8)
    return np.clip(np.round(128 + 127 * noise / peak), 0, 255).astype(np.uint8)


def write_noise(path: str | Path, noise: np.ndarray) -> Path:
    """PNG/PGM visualization, or a signed integer text matrix for ``.txt``."""
    path = Path(path)
    if path.suffix.lower() == ".txt":
        path.parent.mkdir(parents=True, exist_ok=True)
        np.savetxt(path, np.asarray(noise, dtype=np.int64), fmt="%d")
        return path
    return write_image(path, noise_to_image(noise))
