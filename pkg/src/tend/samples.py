"""The image record that flows through every pipeline."""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigurationError


class Label(str, enum.Enum):
    ID = "ID"
    OOD = "OOD"
    UNKNOWN = "UNKNOWN"


class Split(str, enum.Enum):
    TRAIN = "TRAIN"
    TEST = "TEST"
    VAL_GENERATED = "VAL_GENERATED"


@dataclass(frozen=True, eq=False)
class ImageSample:
    """One image (H x W x C, float32 in [0, 1]) plus its metadata."""

    pixels: np.ndarray
    label: Label = Label.UNKNOWN
    source_id: str = ""
    split: Split = Split.TRAIN

    def __post_init__(self):
        px = self.pixels
        if px.ndim != 3 or px.shape[2] not in (1, 3):
            raise ConfigurationError(f"pixels must be H x W x C with C in (1, 3), got {px.shape}")
        if not np.all(np.isfinite(px)) or px.min(initial=0.0) < 0.0 or px.max(initial=0.0) > 1.0:
            raise ConfigurationError(f"pixel intensities of {self.source_id!r} must lie in [0, 1]")

    @property
    def side(self) -> int:
        return self.pixels.shape[0]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    def with_pixels(self, pixels: np.ndarray, **changes) -> "ImageSample":
        return replace(self, pixels=pixels, **changes)


def stack_pixels(samples: list[ImageSample]) -> np.ndarray:
    """Stack samples into an N x C x H x W float32 array (channels first)."""
    if not samples:
        raise ConfigurationError("cannot stack an empty list of samples")
    shapes = {s.pixels.shape for s in samples}
    if len(shapes) != 1:
        raise ConfigurationError(f"samples have mixed shapes: {sorted(shapes)}")
    arr = np.stack([s.pixels for s in samples]).astype(np.float32, copy=False)
    return np.ascontiguousarray(arr.transpose(0, 3, 1, 2))
