"""Per-sample anomaly scores.

The full score blends the classifier probability with the margin-scaled
distance to the center, ``S = lam * p + (1 - lam) * d / R`` where
``d = ||c - O||^2``. Ablation modes keep one term only, or fall back to the
autoencoder's reconstruction error. Higher is more anomalous in every mode.
"""

from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import dataclass
from pathlib import Path

import torch

from .errors import ConfigurationError, ContractError
from .model import STAGE2, TEND
from .samples import ImageSample, Label, stack_pixels

DEFAULT_LAMBDA = 0.5
CSV_FIELDS = ("source_id", "label", "p", "d", "d_prime", "S", "mode")


class Mode(str, enum.Enum):
    TEND = "tend"
    MARGIN_ONLY = "margin_only"
    CLASSIFIER_ONLY = "classifier_only"
    AE_RECON = "ae_recon"

    @classmethod
    def parse(cls, value: "str | Mode") -> "Mode":
        try:
            return cls(str(getattr(value, "value", value)).lower())
        except ValueError:
            raise ConfigurationError(f"unknown score mode {value!r}") from None


@dataclass(frozen=True)
class ScoreRecord:
    source_id: str
    label: Label
    p: float
    d: float
    d_prime: float
    S: float
    mode: Mode


def anomaly_score(p: float, d: float, margin: float, lam: float = DEFAULT_LAMBDA,
                  mode: Mode = Mode.TEND) -> float:
    if mode is Mode.CLASSIFIER_ONLY:
        return p
    d_prime = d / margin
    if mode is Mode.MARGIN_ONLY:
        return d_prime
    return lam * p + (1.0 - lam) * d_prime


def _requirements(model: TEND, mode: Mode):
    if mode is Mode.AE_RECON:
        return
    if model.stage != STAGE2:
        raise ContractError(f"mode {mode.value} needs a stage-2 checkpoint, got {model.stage}")
    if mode in (Mode.TEND, Mode.MARGIN_ONLY) and not model.has_center:
        raise ContractError(f"mode {mode.value} needs the center O and margin R (missing from checkpoint)")


@torch.no_grad()
def score_batch(samples: list[ImageSample], model: TEND, mode: "Mode | str" = Mode.TEND,
                lam: float = DEFAULT_LAMBDA, center: torch.Tensor | None = None,
                margin: float | None = None, batch_size: int = 64) -> list[ScoreRecord]:
    """Score samples in order. ``center``/``margin`` default to the checkpoint's."""
    mode = Mode.parse(mode)
    if not 0.0 <= lam <= 1.0:
        raise ConfigurationError(f"lambda must be in [0, 1], got {lam}")
    _requirements(model, mode)
    if not samples:
        return []
    a = model.arch
    want = (a.input_side, a.input_side, a.channels)
    for s in samples:
        if s.pixels.shape != want:
            raise ConfigurationError(f"sample {s.source_id!r} has shape {s.pixels.shape}, model expects {want}")

    if center is None and model.has_center:
        center = model.center
    if margin is None and model.has_center:
        margin = float(model.margin)
    if margin is not None and not margin > 0:
        raise ConfigurationError(f"margin must be positive, got {margin}")

    model.eval()
    out = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        x = torch.from_numpy(stack_pixels(chunk))
        e = model.encode(x)
        n = len(chunk)
        nan = [math.nan] * n
        p = d = nan
        if model.stage == STAGE2:
            c = model.compress(e)
            p = model.classify(c).double().tolist()
            if center is not None:
                d = ((c.double() - center.double()) ** 2).sum(1).tolist()
        if mode is Mode.AE_RECON:
            rec = ((model.decode(e) - x) ** 2).double().mean((1, 2, 3)).tolist()
        for i, s in enumerate(chunk):
            d_prime = d[i] / margin if margin is not None else math.nan
            if mode is Mode.AE_RECON:
                S = rec[i]
            else:
                S = anomaly_score(p[i], d[i], margin if margin is not None else math.nan, lam, mode)
            out.append(ScoreRecord(s.source_id, s.label, p[i], d[i], d_prime, S, mode))
    return out


def score(sample: ImageSample, model: TEND, mode: "Mode | str" = Mode.TEND,
          lam: float = DEFAULT_LAMBDA, center: torch.Tensor | None = None,
          margin: float | None = None) -> ScoreRecord:
    return score_batch([sample], model, mode, lam, center, margin)[0]


# --------------------------------------------------------------------------
# CSV


def scores_to_csv(records: list[ScoreRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for r in records:
        w.writerow([r.source_id, r.label.value, repr(r.p), repr(r.d), repr(r.d_prime), repr(r.S), r.mode.value])
    return buf.getvalue()


def write_scores(path: str | Path, records: list[ScoreRecord]):
    from .io import atomic_write_text

    atomic_write_text(path, scores_to_csv(records))


def read_scores(path: str | Path) -> list[ScoreRecord]:
    """Parse a scores CSV; malformed rows raise with their line number."""
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise ConfigurationError(f"cannot read scores {path}: {exc}") from None
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != CSV_FIELDS:
            raise ConfigurationError(f"{path}:1: expected header {','.join(CSV_FIELDS)}")
        out = []
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            try:
                if len(row) != len(CSV_FIELDS):
                    raise ValueError(f"expected {len(CSV_FIELDS)} fields, got {len(row)}")
                sid, label, p, d, dp, s, mode = row
                rec = ScoreRecord(sid, Label(label), float(p), float(d), float(dp), float(s), Mode.parse(mode))
            except (ValueError, ConfigurationError) as exc:
                raise ConfigurationError(f"{path}:{line}: malformed score row: {exc}") from None
            out.append(rec)
    return out
