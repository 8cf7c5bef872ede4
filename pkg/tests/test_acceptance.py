"""Acceptance criteria, one test each. Every test records a pass/fail line
that is printed in the terminal summary (see conftest)."""

import math
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest
import torch

from tend.cli import load_dataset, main
from tend.distortions import (
    TRAIN_KINDS,
    VAL_KINDS,
    DistortionSpec,
    Kind,
    distort,
    pseudo_outlier_batch,
    sample_train_spec,
    sample_val_spec,
)
from tend.evaluation import LabeledScore, auroc, gmean_threshold, validation_accuracy
from tend.io import load_config
from tend.model import backbone_hash, load_checkpoint
from tend.samples import ImageSample, Label
from tend.scoring import Mode, ScoreRecord, anomaly_score, read_scores, score_batch
from tend.training import margin_loss_in, margin_loss_out, reconstruction_loss

from conftest import ACCEPTANCE_RESULTS, natural_image
from test_data import knn_loo_accuracy

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "synthetic.yaml"


def record(name, ok, detail):
    ACCEPTANCE_RESULTS.append((name, ok, detail))
    print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    assert ok, detail


def test_published_numbers_out_of_scope():
    # The published table numbers need the original medical datasets and full-scale
    # training; they are replaced by the property suite and the synthetic run below.
    ACCEPTANCE_RESULTS.append(("published-number reproduction", None,
                               "out of reach at desk scale; covered by the synthetic criteria"))


# ---------------------------------------------------------------- metrics


def _oracles(s, y):
    pos, neg = s[y], s[~y]
    diff = pos[:, None] - neg[None, :]
    auc = (np.sum(diff > 0) + 0.5 * np.sum(diff == 0)) / (len(pos) * len(neg))
    vals = np.unique(s)
    if len(vals) == 1:
        return auc, (math.inf, 0.0, 0.0)
    cands = np.concatenate([[-np.inf], (vals[:-1] + vals[1:]) / 2, [np.inf]])
    tp = (pos[None, :] >= cands[:, None]).sum(1)
    fp = (neg[None, :] >= cands[:, None]).sum(1)
    best = None
    for t, a, b in zip(cands, tp, fp):
        tpr, fpr = Fraction(int(a), len(pos)), Fraction(int(b), len(neg))
        key = (tpr * (1 - fpr), tpr - fpr)
        if best is None or key > best[0]:
            best = (key, float(t), float(tpr), float(fpr))
    return auc, best[1:]


def test_metric_oracle_equivalence():
    rng = np.random.default_rng(2024)
    sets = []
    for _ in range(500):
        n = int(rng.integers(2, 201))
        s = rng.integers(0, rng.integers(2, 40), size=n) / 8.0  # coarse grid forces ties
        y = rng.random(n) < rng.uniform(0.2, 0.8)
        y[0], y[1] = True, False
        sets.append(([LabeledScore(float(v), Label.OOD if f else Label.ID) for v, f in zip(s, y)], s, y))

    t0 = time.perf_counter()
    results = [(auroc(sc), gmean_threshold(sc)) for sc, _, _ in sets]
    elapsed = time.perf_counter() - t0

    auc_err, mismatches = 0.0, 0
    for (auc, th), (_, s, y) in zip(results, sets):
        o_auc, o_th = _oracles(s, y)
        auc_err = max(auc_err, abs(auc - o_auc))
        mismatches += (th.t, th.tpr, th.fpr) != o_th
    ok = auc_err <= 1e-12 and mismatches == 0 and elapsed < 10
    record("metric oracle equivalence", ok,
           f"max |auroc - oracle| = {auc_err:.1e}, threshold mismatches = {mismatches}/500, {elapsed:.2f} s")


# ---------------------------------------------------------------- losses


def test_loss_unit_cases():
    t = lambda v: torch.tensor(v, dtype=torch.float64)
    got = {
        "reconstruction": (reconstruction_loss([[0, 0], [0, 0]], [[1, 0], [0, 0]]).item(), 0.25),
        "margin_in": (margin_loss_in(t([3.0, 4.0]), t([0.0, 0.0])).item(), 12.5),
        "margin_out": (margin_loss_out(t([10.0, math.sqrt(200.0)]), t([0.0, 0.0]), 150).item(), 25.0),
        "score": (anomaly_score(0.8, 250.0, 500.0, 0.5), 0.65),
    }
    errs = {k: abs(a - b) for k, (a, b) in got.items()}
    record("loss unit cases", max(errs.values()) <= 1e-9,
           ", ".join(f"{k} err {v:.1e}" for k, v in errs.items()))


# ---------------------------------------------------------------- distortions


def test_distortion_suite():
    t0 = time.perf_counter()
    img = ImageSample(natural_image(64), Label.ID, "natural")
    problems = []

    for spec in (DistortionSpec(Kind.AFFINE, {"matrix": (1, 0, 0, 1, 0, 0)}),
                 DistortionSpec(Kind.BARREL, {"a": 0, "b": 0, "c": 0, "d": 1})):
        if not np.array_equal(distort(img, spec).pixels, img.pixels):
            problems.append(f"identity {spec.kind.value}")

    for kind in TRAIN_KINDS:
        delta = float(np.abs(distort(img, DistortionSpec.default(kind)).pixels - img.pixels).mean())
        if not delta > 0.01:
            problems.append(f"trivial {kind.value} ({delta:.4f})")

    rng = np.random.default_rng(0)
    for trial in range(1000):
        side = int(rng.choice([16, 24, 32]))
        ch = int(rng.choice([1, 3]))
        x = ImageSample(rng.random((side, side, ch)).astype(np.float32), Label.ID, str(trial))
        spec = sample_train_spec(trial) if trial % 2 else sample_val_spec(VAL_KINDS[trial // 2 % 4], trial)
        a, b = distort(x, spec), distort(x, spec)
        if not (a.pixels.shape == x.pixels.shape and a.pixels.dtype == np.float32
                and np.array_equal(a.pixels, b.pixels)
                and a.pixels.min() >= 0.0 and a.pixels.max() <= 1.0 and a.label is Label.OOD):
            problems.append(f"trial {trial} ({spec.kind.value})")
    elapsed = time.perf_counter() - t0
    ok = not problems and elapsed < 30
    record("distortion suite", ok,
           f"1000 trials, {len(problems)} problems {problems[:3]}, {elapsed:.1f} s")


# ---------------------------------------------------------------- validation accuracy


def test_acc_val_hand_count():
    scores = [0.05, 0.9, 0.3, 0.61, 0.2, 0.75, 0.6, 0.45, 1.3, 0.0]
    t = 0.6
    fixture = [ScoreRecord(f"v{i}", Label.OOD, math.nan, math.nan, math.nan, s, Mode.TEND)
               for i, s in enumerate(scores)]
    # hand count: flagged (S >= 0.6) are 0.9, 0.61, 0.75, 0.6, 1.3
    tn, fp = 5, 5
    got = validation_accuracy(fixture, t)
    record("ACC_val hand count", got == tn / (tn + fp), f"got {got}, hand count {tn}/{tn + fp}")


# ---------------------------------------------------------------- synthetic end to end


def _pipeline(out: Path) -> float:
    cfg = str(CONFIG)
    t0 = time.perf_counter()
    steps = [
        ["train-ae"],
        ["train-head", out / "stage1.ckpt"],
        ["score", out / "stage2.ckpt", "--mode", "tend", "--val-kinds", "all"],
        ["score", out / "stage2.ckpt", "--mode", "margin_only"],
        ["score", out / "stage2.ckpt", "--mode", "classifier_only"],
    ]
    val_args = [a for k in VAL_KINDS for a in ("--val", f"{k.value}={out / f'val_{k.value}_tend.csv'}")]
    steps.append(["eval", out / "scores_tend.csv", *val_args])
    steps += [["eval", out / f"scores_{m}.csv"] for m in ("margin_only", "classifier_only")]
    for step in steps:
        code = main(["--config", cfg, "--out-dir", str(out), *map(str, step)])
        assert code == 0, f"step {step[0]} exited {code}"
    return time.perf_counter() - t0


@pytest.fixture(scope="module")
def e2e(tmp_path_factory):
    out = tmp_path_factory.mktemp("e2e")
    return out, _pipeline(out)


@pytest.mark.slow
def test_freeze_contract(e2e):
    out, _ = e2e
    s1, _ = load_checkpoint(out / "stage1.ckpt")
    s2, meta = load_checkpoint(out / "stage2.ckpt")
    a, b = backbone_hash(s1), backbone_hash(s2)
    record("freeze contract", a == b and meta["extra"]["backbone_sha256"] == a,
           f"stage-1 sha256 {a[:16]} vs stage-2 {b[:16]}")


@pytest.mark.slow
def test_synthetic_end_to_end(e2e):
    out, seconds = e2e
    cfg = load_config(CONFIG)
    data = load_dataset(cfg)
    knn = knn_loo_accuracy(data.test_mixture)

    records = read_scores(out / "scores_tend.csv")
    auc = auroc(records)
    th = gmean_threshold(records)

    model, _ = load_checkpoint(out / "stage2.ckpt")
    ids = score_batch(data.train_id, model)
    pseudo = score_batch(pseudo_outlier_batch(data.train_id, seed=99), model)
    d_id = float(np.mean([r.d for r in ids]))
    d_ood = float(np.mean([r.d for r in pseudo]))

    s1, s2 = cfg["stage1"]["epochs"], cfg["stage2"]["epochs"]
    ok = (knn >= 0.95 and auc >= 0.85 and th.diff >= 0.5 and d_id < d_ood
          and s1 <= 30 and s2 <= 30 and seconds <= 15 * 60
          and cfg["dataset"]["input_side"] == 64 and cfg["stage2"]["margin"] == 250
          and cfg["scoring"]["lambda"] == 0.5)
    record("synthetic end-to-end", ok,
           f"3-NN {knn:.3f}, AUROC {auc:.4f}, DIFF {th.diff:.4f}, mean d ID {d_id:.3g} < "
           f"pseudo-OOD {d_ood:.3g}, epochs {s1}+{s2}, {seconds:.0f} s")


@pytest.mark.slow
def test_ablation_ordering(e2e):
    out, _ = e2e
    aucs = {m: auroc(read_scores(out / f"scores_{m}.csv")) for m in ("tend", "margin_only", "classifier_only")}
    ok = aucs["tend"] >= max(aucs["margin_only"], aucs["classifier_only"]) - 0.05
    record("ablation ordering", ok, ", ".join(f"{k} {v:.4f}" for k, v in aucs.items()))


@pytest.mark.slow
def test_validation_accuracy_protocol(e2e):
    out, _ = e2e
    th = gmean_threshold(read_scores(out / "scores_tend.csv"))
    report = (out / "report_scores_tend.txt").read_text()
    accs = {}
    for kind in VAL_KINDS:
        val = read_scores(out / f"val_{kind.value}_tend.csv")
        accs[kind.value] = validation_accuracy(val, th.t)
        hand = sum(r.S >= th.t for r in val) / len(val)
        assert accs[kind.value] == hand
        assert f"{kind.value} = {accs[kind.value]!r}" in report
    record("validation-accuracy protocol", len(accs) == 4,
           ", ".join(f"{k} {v:.3f}" for k, v in accs.items()) + f" at t = {th.t:.4g}")


@pytest.mark.slow
def test_determinism(e2e, tmp_path):
    out, _ = e2e
    _pipeline(tmp_path)
    names = sorted(p.name for p in out.glob("*.csv") if p.name.startswith(("table_", "scores_", "val_")))
    names += sorted(p.name for p in out.glob("report_*.txt"))
    names += ["stage1_loss.csv", "stage2_loss.csv"]
    differ = [n for n in names if (out / n).read_bytes() != (tmp_path / n).read_bytes()]
    record("determinism", not differ, f"{len(names)} metric files compared, differing: {differ or 'none'}")
