"""Nonlinear warps and corruptions used to manufacture pseudo-outliers.

Six geometric warps (barrel, perspective, arc, polar, tile, affine) form the
training family: each distorted in-distribution image is treated as an
outlier while training the stage-2 head. Four milder corruptions (random cut,
random crop + resize, additive noise, Gaussian blur) form the validation
family and are only used to probe a trained detector.

Every warp is an inverse coordinate mapping: for each destination pixel we
compute where to read in the source image and resample bilinearly. Source
positions outside the image read black.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError, ParameterError
from .samples import ImageSample, Label, Split

FILL_VALUE = 0.0


class Family(str, enum.Enum):
    TRAIN_SET = "TRAIN_SET"
    VAL_SET = "VAL_SET"


class Kind(str, enum.Enum):
    BARREL = "barrel"
    PERSPECTIVE = "perspective"
    ARC = "arc"
    POLAR = "polar"
    TILE = "tile"
    AFFINE = "affine"
    RANDOM_CUT = "random_cut"
    RANDOM_CROP_RESIZE = "random_crop_resize"
    NOISE = "noise"
    GAUSSIAN_BLUR = "gaussian_blur"

    @property
    def family(self) -> Family:
        return Family.TRAIN_SET if self in TRAIN_KINDS else Family.VAL_SET

    @classmethod
    def parse(cls, value: "str | Kind") -> "Kind":
        if isinstance(value, Kind):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ConfigurationError(f"unknown distortion kind {value!r}") from None


TRAIN_KINDS = (Kind.BARREL, Kind.PERSPECTIVE, Kind.ARC, Kind.POLAR, Kind.TILE, Kind.AFFINE)
VAL_KINDS = (Kind.RANDOM_CUT, Kind.RANDOM_CROP_RESIZE, Kind.NOISE, Kind.GAUSSIAN_BLUR)


def _affine_matrix(rotation_deg: float, shear: float) -> tuple[float, ...]:
    t = math.radians(rotation_deg)
    rot = np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])
    m = rot @ np.array([[1.0, shear], [0.0, 1.0]])
    return (m[0, 0], m[0, 1], m[1, 0], m[1, 1], 0.0, 0.0)


# Defaults are deliberately strong: the training warps must change the image a lot.
DEFAULT_PARAMS: dict[Kind, dict[str, Any]] = {
    Kind.BARREL: {"a": 0.2, "b": 0.1, "c": 0.1, "d": 0.6},
    Kind.PERSPECTIVE: {"offsets": (0.2, 0.1, -0.15, 0.2, -0.1, -0.2, 0.2, -0.15)},
    Kind.ARC: {"angle": 60.0},
    Kind.POLAR: {"radius": 1.0, "phase": 0.0},
    Kind.TILE: {"k": 3},
    Kind.AFFINE: {"matrix": _affine_matrix(25.0, 0.25)},
    Kind.RANDOM_CUT: {"area": 0.2},
    Kind.RANDOM_CROP_RESIZE: {"scale": 0.65},
    Kind.NOISE: {"sigma": 0.1},
    Kind.GAUSSIAN_BLUR: {"sigma": 3.0},
}


@dataclass(frozen=True)
class DistortionSpec:
    """A named distortion, its parameters and the seed for any residual randomness."""

    kind: Kind
    params: Mapping[str, Any] = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind.parse(self.kind))
        merged = dict(DEFAULT_PARAMS[self.kind])
        unknown = set(self.params) - set(merged)
        if unknown:
            raise ConfigurationError(f"{self.kind.value} got unknown params {sorted(unknown)}")
        merged.update(self.params)
        object.__setattr__(self, "params", merged)

    @property
    def family(self) -> Family:
        return self.kind.family

    @classmethod
    def default(cls, kind: "str | Kind", seed: int = 0) -> "DistortionSpec":
        return cls(Kind.parse(kind), {}, seed)


# --------------------------------------------------------------------------
# resampling


def bilinear_sample(img: np.ndarray, src_x: np.ndarray, src_y: np.ndarray,
                    fill: float = FILL_VALUE) -> np.ndarray:
    """Sample ``img`` (H x W x C) at fractional source positions.

    Each of the four neighbours outside the image reads ``fill``; NaN positions
    read ``fill`` entirely. Integer positions return the stored value exactly.
    """
    h, w = img.shape[:2]
    valid = np.isfinite(src_x) & np.isfinite(src_y)
    sx = np.where(valid, src_x, 0.0)
    sy = np.where(valid, src_y, 0.0)
    # far-away coordinates would overflow the int cast
    sx = np.clip(sx, -2.0, w + 1.0)
    sy = np.clip(sy, -2.0, h + 1.0)
    x0 = np.floor(sx)
    y0 = np.floor(sy)
    fx = (sx - x0)[..., None]
    fy = (sy - y0)[..., None]
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)

    def tap(xi, yi):
        inside = valid & (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        vals = img[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
        return np.where(inside[..., None], vals, fill)

    return (tap(x0, y0) * ((1.0 - fx) * (1.0 - fy))
            + tap(x0 + 1, y0) * (fx * (1.0 - fy))
            + tap(x0, y0 + 1) * ((1.0 - fx) * fy)
            + tap(x0 + 1, y0 + 1) * (fx * fy))


def _grid(h: int, w: int):
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    return xs, ys, (w - 1) / 2.0, (h - 1) / 2.0


def _barrel(p, h, w):
    xs, ys, cx, cy = _grid(h, w)
    a, b, c, d = (float(p[k]) for k in "abcd")
    norm = min(h, w) / 2.0
    dx, dy = xs - cx, ys - cy
    r = np.hypot(dx, dy) / norm
    factor = ((a * r + b) * r + c) * r + d
    return cx + dx * factor, cy + dy * factor


def homography(src_pts: np.ndarray, dst_pts: np.ndarray) -> np.ndarray:
    """3x3 projective matrix H with ``dst ~ H @ src`` from four point pairs."""
    rows, rhs = [], []
    for (x, y), (u, v) in zip(src_pts, dst_pts):
        rows.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        rows.append([0, 0, 0, x, y, 1, -v * x, -v * y])
        rhs.extend([u, v])
    try:
        sol = np.linalg.solve(np.asarray(rows, float), np.asarray(rhs, float))
    except np.linalg.LinAlgError:
        raise ParameterError("perspective control points are degenerate") from None
    return np.append(sol, 1.0).reshape(3, 3)


def _perspective(p, h, w):
    xs, ys, _, _ = _grid(h, w)
    off = np.asarray(p["offsets"], float).reshape(4, 2)
    if np.any(np.abs(off) >= 0.5):
        raise ParameterError("perspective corner offsets must be below half the side")
    corners = np.array([[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]], float)
    moved = corners + off * np.array([w - 1, h - 1], float)
    # inverse mapping: destination (moved corners) -> source corners
    hm = homography(moved, corners)
    u = hm[0, 0] * xs + hm[0, 1] * ys + hm[0, 2]
    v = hm[1, 0] * xs + hm[1, 1] * ys + hm[1, 2]
    z = hm[2, 0] * xs + hm[2, 1] * ys + hm[2, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        sx = np.where(z > 0, u / z, np.nan)
        sy = np.where(z > 0, v / z, np.nan)
    return sx, sy


def _arc(p, h, w):
    angle = float(p["angle"])
    if not 0.0 < angle <= 180.0:
        raise ParameterError(f"arc angle must be in (0, 180] degrees, got {angle}")
    xs, ys, cx, _ = _grid(h, w)
    half = math.radians(angle) / 2.0
    r_out = (w - 1) / 2.0 / math.sin(half)
    # the band keeps about half the image height, clipped to the disk
    r_in = max(r_out - 0.5 * (h - 1), 0.0)
    top, bottom = -r_out, -r_in * math.cos(half)
    cy0 = (h - 1) / 2.0 - (top + bottom) / 2.0
    dx, dy = xs - cx, cy0 - ys
    r = np.hypot(dx, dy)
    phi = np.arctan2(dx, dy)
    inside = (np.abs(phi) <= half) & (r >= r_in) & (r <= r_out)
    sx = (phi / (2.0 * half) + 0.5) * (w - 1)
    sy = (r_out - r) / (r_out - r_in) * (h - 1)
    return np.where(inside, sx, np.nan), np.where(inside, sy, np.nan)


def _polar(p, h, w):
    frac = float(p["radius"])
    if not 0.0 < frac <= 1.0:
        raise ParameterError(f"polar radius fraction must be in (0, 1], got {frac}")
    xs, ys, cx, cy = _grid(h, w)
    r_max = frac * min(cx, cy)
    phi = 2.0 * math.pi * xs / w + math.radians(float(p["phase"]))
    rho = r_max * ys / max(h - 1, 1)
    return cx + rho * np.sin(phi), cy - rho * np.cos(phi)


def _tile(p, h, w):
    k = int(p["k"])
    if k < 1 or k != p["k"]:
        raise ParameterError(f"tile factor must be a positive integer, got {p['k']}")
    xs, ys, _, _ = _grid(h, w)
    tw, th = w / k, h / k
    sx = np.clip(np.mod(xs + 0.5, tw) * k - 0.5, 0.0, w - 1.0)
    sy = np.clip(np.mod(ys + 0.5, th) * k - 0.5, 0.0, h - 1.0)
    return sx, sy


def _affine(p, h, w):
    m = np.asarray(p["matrix"], float)
    if m.shape != (6,):
        raise ParameterError("affine matrix must have six entries (a11, a12, a21, a22, tx, ty)")
    lin = m[:4].reshape(2, 2)
    if abs(np.linalg.det(lin)) < 1e-8:
        raise ParameterError("affine matrix is singular")
    inv = np.linalg.inv(lin)
    xs, ys, cx, cy = _grid(h, w)
    dx, dy = xs - cx - m[4], ys - cy - m[5]
    return cx + inv[0, 0] * dx + inv[0, 1] * dy, cy + inv[1, 0] * dx + inv[1, 1] * dy


_WARPS = {
    Kind.BARREL: _barrel,
    Kind.PERSPECTIVE: _perspective,
    Kind.ARC: _arc,
    Kind.POLAR: _polar,
    Kind.TILE: _tile,
    Kind.AFFINE: _affine,
}


def source_coordinates(spec: DistortionSpec, height: int, width: int):
    """Source (x, y) read by every destination pixel of a pure warp.

    NaN marks destination pixels that lie in the virtual-pixel region.
    """
    if spec.kind not in _WARPS:
        raise ConfigurationError(f"{spec.kind.value} is not a coordinate warp")
    return _WARPS[spec.kind](spec.params, height, width)


# --------------------------------------------------------------------------
# corruptions


def _random_cut(img, p, rng):
    area = float(p["area"])
    if not 0.0 < area < 1.0:
        raise ParameterError(f"cut area fraction must be in (0, 1), got {area}")
    h, w = img.shape[:2]
    aspect = math.exp(rng.uniform(math.log(0.5), math.log(2.0)))
    ch = min(h, max(1, round(math.sqrt(area * h * w * aspect))))
    cw = min(w, max(1, round(area * h * w / ch)))
    y0 = int(rng.integers(0, h - ch + 1))
    x0 = int(rng.integers(0, w - cw + 1))
    out = img.copy()
    out[y0:y0 + ch, x0:x0 + cw] = FILL_VALUE
    return out


def _random_crop_resize(img, p, rng):
    scale = float(p["scale"])
    h, w = img.shape[:2]
    ch, cw = int(round(scale * h)), int(round(scale * w))
    if not 0.0 < scale <= 1.0 or ch < 1 or cw < 1:
        raise ParameterError(f"crop scale {scale} gives an empty window")
    y0 = int(rng.integers(0, h - ch + 1))
    x0 = int(rng.integers(0, w - cw + 1))
    xs, ys, _, _ = _grid(h, w)
    # align pixel centres of the crop window with the full frame
    sx = x0 + (xs + 0.5) * cw / w - 0.5
    sy = y0 + (ys + 0.5) * ch / h - 0.5
    sx = np.clip(sx, x0, x0 + cw - 1)
    sy = np.clip(sy, y0, y0 + ch - 1)
    return bilinear_sample(img, sx, sy)


def _noise(img, p, rng):
    sigma = float(p["sigma"])
    if sigma < 0:
        raise ParameterError(f"noise sigma must be non-negative, got {sigma}")
    return img + rng.normal(0.0, sigma, size=img.shape)


def _gaussian_blur(img, p, rng):
    sigma = float(p["sigma"])
    if sigma <= 0:
        raise ParameterError(f"blur sigma must be positive, got {sigma}")
    return ndimage.gaussian_filter(img, sigma=(sigma, sigma, 0), mode="reflect")


_CORRUPTIONS = {
    Kind.RANDOM_CUT: _random_cut,
    Kind.RANDOM_CROP_RESIZE: _random_crop_resize,
    Kind.NOISE: _noise,
    Kind.GAUSSIAN_BLUR: _gaussian_blur,
}


def distort(image: ImageSample, spec: DistortionSpec) -> ImageSample:
    """Apply ``spec`` to ``image``; the result is labelled OOD.

    Output shape equals input shape and intensities are clamped to [0, 1].
    The result depends only on (image, spec), seed included.
    """
    if not isinstance(spec, DistortionSpec):
        raise ConfigurationError(f"expected a DistortionSpec, got {type(spec).__name__}")
    img = image.pixels.astype(np.float64)
    h, w = img.shape[:2]
    if spec.kind in _WARPS:
        sx, sy = source_coordinates(spec, h, w)
        out = bilinear_sample(img, sx, sy)
    else:
        rng = np.random.default_rng(spec.seed)
        out = _CORRUPTIONS[spec.kind](img, spec.params, rng)
    out = np.clip(out, 0.0, 1.0).astype(np.float32)
    return image.with_pixels(out, label=Label.OOD)


# --------------------------------------------------------------------------
# spec sampling


def _derive_seed(*entropy: int) -> int:
    return int(np.random.SeedSequence(list(entropy)).generate_state(1, np.uint64)[0])


def _sample_params(kind: Kind, rng: np.random.Generator) -> dict[str, Any]:
    if kind is Kind.BARREL:
        a, b, c = rng.uniform(0.0, 0.3, size=3)
        return {"a": a, "b": b, "c": c, "d": 1.0 - a - b - c}
    if kind is Kind.PERSPECTIVE:
        return {"offsets": tuple(rng.uniform(-0.25, 0.25, size=8))}
    if kind is Kind.ARC:
        return {"angle": rng.uniform(45.0, 120.0)}
    if kind is Kind.POLAR:
        return {"radius": rng.uniform(0.75, 1.0), "phase": rng.uniform(0.0, 360.0)}
    if kind is Kind.TILE:
        return {"k": int(rng.integers(2, 5))}
    if kind is Kind.AFFINE:
        return {"matrix": _affine_matrix(rng.uniform(-30.0, 30.0), rng.uniform(-0.3, 0.3))}
    if kind is Kind.RANDOM_CUT:
        return {"area": rng.uniform(0.1, 0.3)}
    if kind is Kind.RANDOM_CROP_RESIZE:
        return {"scale": rng.uniform(0.5, 0.8)}
    if kind is Kind.NOISE:
        return {"sigma": rng.uniform(0.05, 0.2)}
    return {"sigma": rng.uniform(2.0, 5.0)}


def sample_train_spec(rng_seed: int) -> DistortionSpec:
    """Draw one training warp uniformly over the six kinds, with random params."""
    rng = np.random.default_rng(rng_seed)
    kind = TRAIN_KINDS[int(rng.integers(len(TRAIN_KINDS)))]
    params = _sample_params(kind, rng)
    return DistortionSpec(kind, params, int(rng.integers(2**63)))


def sample_val_spec(kind: "str | Kind", rng_seed: int) -> DistortionSpec:
    kind = Kind.parse(kind)
    if kind.family is not Family.VAL_SET:
        raise ParameterError(f"{kind.value} is a training warp, not a validation corruption")
    rng = np.random.default_rng(rng_seed)
    params = _sample_params(kind, rng)
    return DistortionSpec(kind, params, int(rng.integers(2**63)))


def generate_validation_set(dataset: list[ImageSample], kind: "str | Kind",
                            seed: int = 0) -> list[ImageSample]:
    """Corrupt every ID sample with one validation-family distortion.

    Each output is labelled OOD with split VAL_GENERATED; its source id is
    prefixed with the corruption name.
    """
    kind = Kind.parse(kind)
    if kind.family is not Family.VAL_SET:
        raise ParameterError(f"{kind.value} is a training warp, not a validation corruption")
    out = []
    for i, sample in enumerate(dataset):
        if sample.label is not Label.ID:
            raise ParameterError(f"validation inputs must be ID, {sample.source_id!r} is {sample.label.value}")
        spec = sample_val_spec(kind, _derive_seed(seed, i))
        warped = distort(sample, spec)
        out.append(warped.with_pixels(warped.pixels, split=Split.VAL_GENERATED,
                                      source_id=f"{kind.value}:{sample.source_id}"))
    return out


def pseudo_outlier_batch(batch: list[ImageSample], seed: int) -> list[ImageSample]:
    """One freshly sampled training warp per sample (1:1 with the ID batch)."""
    return [distort(s, sample_train_spec(_derive_seed(seed, i))) for i, s in enumerate(batch)]
