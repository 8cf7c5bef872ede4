"""2D distance plots: each sample sits at radius sqrt(d) from the center.

The angle is a hash of the source id, so the picture is reproducible and
only the radius carries information. The blue circle marks the margin
(radius sqrt(R)).
"""

from __future__ import annotations

import hashlib
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .samples import Label  # noqa: E402

GREEN, RED, BLUE = "#2ca02c", "#d62728", "#1f77b4"


def hashed_angle(source_id: str) -> float:
    digest = hashlib.sha256(source_id.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") / 2**64 * 2.0 * math.pi


def plot_coordinates(records) -> np.ndarray:
    """N x 2 positions (radius sqrt(d), hashed angle)."""
    pts = np.zeros((len(records), 2))
    for i, r in enumerate(records):
        rad = math.sqrt(r.d)
        a = hashed_angle(r.source_id)
        pts[i] = (rad * math.cos(a), rad * math.sin(a))
    return pts


def _panel(path: Path, pts, is_ood, margin: float, title: str):
    fig, ax = plt.subplots(figsize=(5, 5), dpi=100)
    lim = 1.1 * max(math.sqrt(margin), float(np.abs(pts).max()) if len(pts) else 0.0)
    ax.scatter(pts[~is_ood, 0], pts[~is_ood, 1], s=8, c=GREEN, label="ID")
    ax.scatter(pts[is_ood, 0], pts[is_ood, 1], s=8, c=RED, label="OOD")
    ax.add_patch(plt.Circle((0, 0), math.sqrt(margin), fill=False, color=BLUE, lw=1.5,
                            label=f"margin R={margin:g}"))
    ax.set_xlim(-lim, lim)
    ax.set_ylim(-lim, lim)
    ax.set_aspect("equal")
    ax.set_title(title)
    ax.legend(loc="upper right", fontsize=7, title="radius = sqrt(d), angle = hash(id)",
              title_fontsize=7)
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def plot_distances(records, margin: float, threshold: float, out_prefix: str | Path) -> tuple[Path, Path]:
    """Write ``<prefix>_gt.png`` (coloured by truth) and ``<prefix>_pred.png``
    (coloured by S >= threshold)."""
    out_prefix = Path(out_prefix)
    pts = plot_coordinates(records)
    truth = np.array([r.label is Label.OOD for r in records], dtype=bool)
    pred = np.array([r.S >= threshold for r in records], dtype=bool)
    gt_path = out_prefix.with_name(out_prefix.name + "_gt.png")
    pred_path = out_prefix.with_name(out_prefix.name + "_pred.png")
    _panel(gt_path, pts, truth, margin, "ground truth")
    _panel(pred_path, pts, pred, margin, f"prediction (S >= {threshold:.4g})")
    return gt_path, pred_path
