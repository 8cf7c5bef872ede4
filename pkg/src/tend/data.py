"""One-vs-rest dataset construction from image folders, plus a synthetic set.

Folder layout is ``root/<class>/<image files>``. One class is in-distribution;
its images are split into train/test by a seeded permutation of the sorted
file list. The OOD classes go to the test mixture only (unless named as
supervised OOD training classes).
"""

from __future__ import annotations

import csv
import enum
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ConfigurationError
from .samples import ImageSample, Label, Split

log = logging.getLogger(__name__)

ALL_OTHERS = "ALL_OTHERS"
SYNTHETIC = "SYNTHETIC"


def _pil_reader(path: Path) -> Image.Image:
    im = Image.open(path)
    im.load()
    return im


# Extension point: register a reader returning a PIL image (e.g. for DICOM).
READERS: dict[str, Callable[[Path], Image.Image]] = {
    ext: _pil_reader for ext in (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".gif")
}


@dataclass
class DatasetSpec:
    root: str
    id_class: str
    ood_classes: list[str] | str = ALL_OTHERS
    input_side: int = 128
    channels: int = 1
    train_fraction: float = 0.8
    seed: int = 0
    ood_train_classes: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 < self.train_fraction <= 1.0:
            raise ConfigurationError(f"train_fraction must be in (0, 1], got {self.train_fraction}")
        if self.ood_classes != ALL_OTHERS and self.id_class in self.ood_classes:
            raise ConfigurationError(f"id_class {self.id_class!r} cannot also be OOD")
        if self.id_class in self.ood_train_classes:
            raise ConfigurationError(f"id_class {self.id_class!r} cannot be an OOD training class")


class Motif(str, enum.Enum):
    BLOBS = "BLOBS"
    STRIPES = "STRIPES"


@dataclass
class SyntheticParams:
    n_id: int = 200
    n_ood: int = 100
    motif: Motif = Motif.BLOBS
    noise: float = 0.05
    seed: int = 0
    input_side: int = 64
    channels: int = 1
    train_fraction: float = 0.8

    def __post_init__(self):
        self.motif = Motif(str(getattr(self.motif, "value", self.motif)).upper())
        if self.n_id <= 0 or self.n_ood <= 0:
            raise ConfigurationError("n_id and n_ood must be positive")


class DatasetSplit(NamedTuple):
    train_id: list[ImageSample]
    test_mixture: list[ImageSample]
    train_ood: list[ImageSample] = []
    skipped: list[str] = []


# --------------------------------------------------------------------------
# folders


def _class_files(folder: Path) -> list[Path]:
    return sorted(p for p in folder.iterdir() if p.is_file() and p.suffix.lower() in READERS)


def load_image(path: Path, side: int, channels: int) -> np.ndarray:
    """Decode, coerce channels, plain bilinear resize to side x side, scale to [0, 1]."""
    im = READERS[path.suffix.lower()](path)
    im = im.convert("L" if channels == 1 else "RGB")
    if im.size != (side, side):
        im = im.resize((side, side), Image.BILINEAR)
    arr = np.asarray(im, dtype=np.float32) / 255.0
    return arr[..., None] if arr.ndim == 2 else arr


def split_indices(n: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    order = np.random.default_rng(seed).permutation(n)
    n_train = math.floor(fraction * n)
    return np.sort(order[:n_train]), np.sort(order[n_train:])


def ingest(spec: DatasetSpec) -> DatasetSplit:
    """Build (train_id, test_mixture) from an image-folder dataset.

    Unreadable files are skipped and listed in ``skipped``.
    """
    root = Path(spec.root)
    if not root.is_dir():
        raise ConfigurationError(f"dataset root {root} does not exist")
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    if spec.id_class not in classes:
        raise ConfigurationError(f"id_class {spec.id_class!r} not found under {root} (have {classes})")
    ood = [c for c in classes if c != spec.id_class] if spec.ood_classes == ALL_OTHERS else list(spec.ood_classes)
    missing = sorted(set(ood) - set(classes))
    if missing:
        raise ConfigurationError(f"OOD classes {missing} not found under {root}")
    ood_train = set(spec.ood_train_classes)

    skipped: list[str] = []

    def load(cls: str, files: list[Path], label: Label, split: Split) -> list[ImageSample]:
        out = []
        for f in files:
            try:
                px = load_image(f, spec.input_side, spec.channels)
            except (OSError, UnidentifiedImageError, ValueError) as exc:
                log.warning("skipping unreadable image %s: %s", f, exc)
                skipped.append(str(f))
                continue
            out.append(ImageSample(px, label, f"{cls}/{f.name}", split))
        return out

    id_files = _class_files(root / spec.id_class)
    tr, te = split_indices(len(id_files), spec.train_fraction, spec.seed)
    train_id = load(spec.id_class, [id_files[i] for i in tr], Label.ID, Split.TRAIN)
    test = load(spec.id_class, [id_files[i] for i in te], Label.ID, Split.TEST)
    train_ood = []
    for cls in ood:
        files = _class_files(root / cls)
        if cls in ood_train:
            train_ood += load(cls, files, Label.OOD, Split.TRAIN)
        else:
            test += load(cls, files, Label.OOD, Split.TEST)
    return DatasetSplit(train_id, test, train_ood, skipped)


def write_manifest(path: str | Path, split: DatasetSplit, root: str | Path | None = None):
    """CSV with columns source_id,path,class,label,split."""
    from .io import atomic_write_text

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["source_id", "path", "class", "label", "split"])
    for s in [*split.train_id, *split.train_ood, *split.test_mixture]:
        cls = s.source_id.split("/", 1)[0]
        path_str = str(Path(root) / s.source_id) if root is not None else ""
        w.writerow([s.source_id, path_str, cls, s.label.value, s.split.value])
    atomic_write_text(path, buf.getvalue())


# --------------------------------------------------------------------------
# synthetic


def _blob(rng: np.random.Generator, side: int) -> np.ndarray:
    ys, xs = np.mgrid[0:side, 0:side] / side
    cx, cy = rng.uniform(0.3, 0.7, size=2)
    s = rng.uniform(0.08, 0.16)
    return 0.1 + 0.8 * np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * s * s))


def _stripes(rng: np.random.Generator, side: int) -> np.ndarray:
    ys, xs = np.mgrid[0:side, 0:side] / side
    freq = rng.uniform(3.0, 6.0)
    theta = rng.uniform(0.0, np.pi)
    phase = rng.uniform(0.0, 2 * np.pi)
    wave = np.sin(2 * np.pi * freq * (xs * np.cos(theta) + ys * np.sin(theta)) + phase)
    return 0.1 + 0.8 * (0.5 + 0.5 * wave)


_MOTIFS = {Motif.BLOBS: _blob, Motif.STRIPES: _stripes}


def render_motif(motif: Motif, rng: np.random.Generator, side: int, channels: int,
                 noise: float) -> np.ndarray:
    img = _MOTIFS[motif](rng, side)
    if noise > 0:
        img = img + rng.normal(0.0, noise, size=img.shape)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)[..., None]
    return np.repeat(img, channels, axis=2) if channels == 3 else img


def make_synthetic(params: SyntheticParams) -> DatasetSplit:
    """ID images of one motif, OOD images of the other, same noise model."""
    rng = np.random.default_rng(params.seed)
    other = Motif.STRIPES if params.motif is Motif.BLOBS else Motif.BLOBS
    side, ch = params.input_side, params.channels
    ids = [render_motif(params.motif, rng, side, ch, params.noise) for _ in range(params.n_id)]
    oods = [render_motif(other, rng, side, ch, params.noise) for _ in range(params.n_ood)]
    tr, te = split_indices(params.n_id, params.train_fraction, params.seed)
    id_name, ood_name = params.motif.value.lower(), other.value.lower()
    train_id = [ImageSample(ids[i], Label.ID, f"{id_name}/{i:05d}", Split.TRAIN) for i in tr]
    test = [ImageSample(ids[i], Label.ID, f"{id_name}/{i:05d}", Split.TEST) for i in te]
    test += [ImageSample(px, Label.OOD, f"{ood_name}/{i:05d}", Split.TEST) for i, px in enumerate(oods)]
    return DatasetSplit(train_id, test)


def export_folder(split: DatasetSplit, root: str | Path):
    """Write samples as 8-bit PNGs under root/<class>/ so ``ingest`` can read them back."""
    from .io import write_png

    root = Path(root)
    for s in [*split.train_id, *split.train_ood, *split.test_mixture]:
        write_png(root / f"{s.source_id}.png", s.pixels)
