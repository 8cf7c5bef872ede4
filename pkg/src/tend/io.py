"""File plumbing: atomic writes, 8-bit PNG conversion, key-value config files."""

from __future__ import annotations

import os
import tempfile
from pathlib import Path

import numpy as np
import yaml
from PIL import Image

from .errors import ConfigurationError


def atomic_write_bytes(path: str | Path, data: bytes):
    """Write to a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | Path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    """[0, 1] floats to bytes, rounding half up."""
    return np.floor(np.clip(pixels, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def read_png(path: str | Path, channels: int | None = None) -> np.ndarray:
    """Read an image as H x W x C float32 in [0, 1].

    ``channels`` forces grayscale (1) or RGB (3); grayscale files are
    replicated to three channels when RGB is requested.
    """
    with Image.open(path) as im:
        if channels is None:
            channels = 1 if im.mode in ("1", "L", "I", "I;16", "F") else 3
        im = im.convert("L" if channels == 1 else "RGB")
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return arr[..., None] if arr.ndim == 2 else arr


def write_png(path: str | Path, pixels: np.ndarray):
    px = to_uint8(pixels)
    if px.ndim == 3 and px.shape[2] == 1:
        px = px[..., 0]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(px).save(path)


def load_config(path: str | Path) -> dict:
    try:
        with open(path) as fh:
            cfg = yaml.safe_load(fh) or {}
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"cannot parse config {path}: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigurationError(f"config {path} must be a mapping at top level")
    return cfg


def dump_config(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=True)
