"""Command line entry point: ``tend <subcommand>``.

Every subcommand reads the same key-value config (YAML) and writes into
``--out-dir``; a ``run_manifest.json`` there records what was produced.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .data import SYNTHETIC, DatasetSpec, DatasetSplit, SyntheticParams, export_folder, ingest, make_synthetic, write_manifest
from .distortions import VAL_KINDS, DistortionSpec, Kind, distort, generate_validation_set
from .errors import ConfigurationError, ContractError, MetricError, TendError, TrainingError
from .evaluation import evaluate, gmean_threshold, table_csv
from .io import atomic_write_text, dump_config, load_config, read_png, write_png
from .model import STAGE1, ArchitectureSpec, backbone_hash, load_checkpoint, save_checkpoint
from .plotting import plot_distances
from .samples import ImageSample, Label
from .scoring import DEFAULT_LAMBDA, Mode, read_scores, score_batch, write_scores
from .training import TrainConfig, train_stage1, train_stage2

log = logging.getLogger("tend")

EXIT_TRAINING = 1
EXIT_CONFIG = 2
EXIT_METRIC = 3


# --------------------------------------------------------------------------
# config helpers


def _section(cfg: dict, name: str) -> dict:
    sec = cfg.get(name) or {}
    if not isinstance(sec, dict):
        raise ConfigurationError(f"config section {name!r} must be a mapping")
    return dict(sec)


def _build(cls, values: dict, what: str):
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigurationError(f"bad {what} settings: {exc}") from None


def load_dataset(cfg: dict) -> DatasetSplit:
    ds = _section(cfg, "dataset")
    if "root" not in ds:
        raise ConfigurationError("config needs dataset.root (a folder or SYNTHETIC)")
    if ds["root"] == SYNTHETIC:
        syn = _section(cfg, "synthetic")
        for key in ("input_side", "channels", "train_fraction"):
            if key in ds:
                syn.setdefault(key, ds[key])
        syn.setdefault("seed", ds.get("seed", 0))
        return make_synthetic(_build(SyntheticParams, syn, "synthetic"))
    return ingest(_build(DatasetSpec, ds, "dataset"))


def architecture(cfg: dict) -> ArchitectureSpec:
    ds = _section(cfg, "dataset")
    arch = _section(cfg, "architecture")
    arch.setdefault("input_side", ds.get("input_side", 128))
    arch.setdefault("channels", ds.get("channels", 1))
    return _build(ArchitectureSpec, arch, "architecture")


def train_config(cfg: dict, stage: int) -> TrainConfig:
    sec = _section(cfg, f"stage{stage}")
    sec["stage"] = stage
    return _build(TrainConfig, sec, f"stage{stage}")


def apply_seed(cfg: dict, seed: int | None) -> dict:
    if seed is None:
        return cfg
    cfg = json.loads(json.dumps(cfg))
    for name in ("dataset", "synthetic", "stage1", "stage2"):
        cfg.setdefault(name, {})
        cfg[name]["seed"] = seed
    return cfg


class Run:
    """Output directory plus its manifest."""

    def __init__(self, out_dir: str | Path, cfg: dict):
        self.dir = Path(out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.cfg = cfg
        self.path = self.dir / "run_manifest.json"
        self.manifest = json.loads(self.path.read_text()) if self.path.exists() else {}
        self.manifest.setdefault("tool_version", __version__)
        self.manifest.setdefault("artifacts", {})
        self.manifest.setdefault("timings", {})
        if cfg or "config" not in self.manifest:
            self.manifest["config"] = cfg
            self.manifest["seeds"] = {k: _section(cfg, k).get("seed")
                                      for k in ("dataset", "synthetic", "stage1", "stage2")}

    def record(self, key: str, path: Path):
        self.manifest["artifacts"][key] = str(path)

    def timing(self, key: str, seconds: float):
        self.manifest["timings"][key] = seconds

    def save(self):
        if self.cfg:
            atomic_write_text(self.dir / "run_config.yaml", dump_config(self.cfg))
            self.record("run_config", self.dir / "run_config.yaml")
        self.manifest["artifacts"] = {k: v for k, v in self.manifest["artifacts"].items() if Path(v).exists()}
        atomic_write_text(self.path, json.dumps(self.manifest, indent=2, sort_keys=True) + "\n")


def _rows_csv(rows: list[dict], fields: list[str]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({k: repr(float(v)) if isinstance(v, float) else v for k, v in r.items()})
    return buf.getvalue()


# --------------------------------------------------------------------------
# subcommands


def cmd_train_ae(args, cfg: dict) -> int:
    run = Run(args.out_dir, cfg)
    data = load_dataset(cfg)
    t0 = time.perf_counter()
    model, history = train_stage1(data.train_id, train_config(cfg, 1), architecture(cfg))
    run.timing("train_ae", time.perf_counter() - t0)
    run.timing("train_ae_epochs", [h.get("seconds", 0.0) for h in history])
    ckpt = run.dir / "stage1.ckpt"
    save_checkpoint(model, ckpt, {"train_config": train_config(cfg, 1).to_dict()})
    loss_csv = run.dir / "stage1_loss.csv"
    atomic_write_text(loss_csv, _rows_csv(history, ["epoch", "loss"]))
    manifest_csv = run.dir / "dataset_manifest.csv"
    ds_root = _section(cfg, "dataset").get("root")
    write_manifest(manifest_csv, data, None if ds_root == SYNTHETIC else ds_root)
    for key, path in (("stage1_checkpoint", ckpt), ("stage1_loss", loss_csv), ("dataset_manifest", manifest_csv)):
        run.record(key, path)
    run.save()
    print(f"stage 1 done: loss {history[0]['loss']:.6f} -> {history[-1]['loss']:.6f}; wrote {ckpt}")
    return 0


def cmd_train_head(args, cfg: dict) -> int:
    backbone, _ = load_checkpoint(args.stage1_ckpt)
    if backbone.stage != STAGE1:
        raise ContractError(f"{args.stage1_ckpt} is a {backbone.stage} checkpoint, expected {STAGE1}")
    run = Run(args.out_dir, cfg)
    data = load_dataset(cfg)
    tcfg = train_config(cfg, 2)
    before = backbone_hash(backbone)
    t0 = time.perf_counter()
    model, center, history = train_stage2(data.train_id, tcfg, backbone, data.train_ood or None)
    run.timing("train_head", time.perf_counter() - t0)
    run.timing("train_head_epochs", [h["seconds"] for h in history])
    after = backbone_hash(model)
    if before != after:
        raise ContractError("backbone hash changed during stage 2")
    ckpt = run.dir / "stage2.ckpt"
    save_checkpoint(model, ckpt, {"train_config": tcfg.to_dict(), "backbone_sha256": after,
                                  "center_epoch": None if center is None else center.computed_at_epoch})
    loss_csv = run.dir / "stage2_loss.csv"
    atomic_write_text(loss_csv, _rows_csv(history, ["epoch", "phase", "total", "bce", "margin"]))
    run.record("stage2_checkpoint", ckpt)
    run.record("stage2_loss", loss_csv)
    run.manifest["backbone_sha256"] = after
    run.save()
    print(f"stage 2 done: backbone sha256 {after[:16]} unchanged; wrote {ckpt}")
    return 0


def _split_samples(data: DatasetSplit, split: str) -> list[ImageSample]:
    if split == "test":
        return data.test_mixture
    if split == "train":
        return data.train_id
    raise ConfigurationError(f"unknown split {split!r}")


def cmd_score(args, cfg: dict) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    run = Run(args.out_dir, cfg)
    scoring = _section(cfg, "scoring")
    mode = Mode.parse(args.mode or scoring.get("mode", Mode.TEND))
    lam = args.lam if args.lam is not None else float(scoring.get("lambda", DEFAULT_LAMBDA))
    if args.empty:
        samples: list[ImageSample] = []
        data = None
    else:
        data = load_dataset(cfg)
        samples = _split_samples(data, args.split)
    out = Path(args.output) if args.output else run.dir / f"scores_{mode.value}.csv"
    write_scores(out, score_batch(samples, model, mode, lam))
    run.record(f"scores_{mode.value}", out)
    written = [out]
    if args.val_kinds:
        kinds = VAL_KINDS if args.val_kinds == ["all"] else [Kind.parse(k) for k in args.val_kinds]
        all_id = [s for s in [*data.train_id, *data.test_mixture] if s.label is Label.ID]
        seed = _section(cfg, "dataset").get("seed", 0)
        for kind in kinds:
            val = generate_validation_set(all_id, kind, seed=seed)
            path = run.dir / f"val_{kind.value}_{mode.value}.csv"
            write_scores(path, score_batch(val, model, mode, lam))
            run.record(f"val_{kind.value}_{mode.value}", path)
            written.append(path)
    run.save()
    for p in written:
        print(f"wrote {p}")
    return 0


def _parse_val(items: list[str]) -> dict[str, Path]:
    out = {}
    for item in items or []:
        kind, sep, path = item.partition("=")
        if not sep:
            raise ConfigurationError(f"--val expects KIND=PATH, got {item!r}")
        out[Kind.parse(kind).value] = Path(path)
    return out


def cmd_eval(args, cfg: dict) -> int:
    records = read_scores(args.scores)
    val = {kind: read_scores(p) for kind, p in _parse_val(args.val).items()}
    report = evaluate(records, val)
    run = Run(args.out_dir, cfg)
    stem = Path(args.scores).stem
    text_path = run.dir / f"report_{stem}.txt"
    atomic_write_text(text_path, report.to_text())
    modes = sorted({r.mode.value for r in records})
    margin = args.margin if args.margin is not None else _section(cfg, "stage2").get("margin", "")
    row = report.table_row(args.dataset or _section(cfg, "dataset").get("id_class", ""),
                           "+".join(modes), margin)
    table_path = run.dir / f"table_{stem}.csv"
    atomic_write_text(table_path, table_csv([row]))
    run.record(f"report_{stem}", text_path)
    run.record(f"table_{stem}", table_path)
    run.save()
    sys.stdout.write(report.to_text())
    return 0


def cmd_plot(args, cfg: dict) -> int:
    records = read_scores(args.scores)
    if any(not np.isfinite(r.d) for r in records):
        raise ConfigurationError(f"{args.scores} has no distance column values (d); score with a stage-2 checkpoint")
    t = args.threshold if args.threshold is not None else gmean_threshold(records).t
    run = Run(args.out_dir, cfg)
    prefix = run.dir / f"plot_{Path(args.scores).stem}"
    paths = plot_distances(records, args.margin, t, prefix)
    for p in paths:
        run.record(p.stem, p)
        print(f"wrote {p}")
    run.save()
    return 0


def cmd_distort(args, cfg: dict) -> int:
    params = {}
    for item in args.param or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigurationError(f"--param expects KEY=VALUE, got {item!r}")
        params[key] = json.loads(value)
    spec = DistortionSpec(Kind.parse(args.kind), params, args.seed if args.seed is not None else 0)
    try:
        px = read_png(args.input)
    except OSError as exc:
        raise ConfigurationError(f"cannot read {args.input}: {exc}") from None
    out = distort(ImageSample(px, Label.ID, str(args.input)), spec)
    write_png(args.output, out.pixels)
    print(f"wrote {args.output}")
    return 0


def cmd_make_synthetic(args, cfg: dict) -> int:
    syn = _section(cfg, "synthetic")
    if args.seed is not None:
        syn["seed"] = args.seed
    params = _build(SyntheticParams, syn, "synthetic")
    data = make_synthetic(params)
    dest = Path(args.dest) if args.dest else Path(args.out_dir) / "synthetic"
    export_folder(data, dest)
    write_manifest(dest / "manifest.csv", data, dest)
    print(f"wrote {len(data.train_id) + len(data.test_mixture)} images under {dest}")
    return 0


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tend", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="YAML config (dataset, synthetic, architecture, stage1, stage2, scoring)")
    p.add_argument("--seed", type=int, help="override every seed in the config")
    p.add_argument("--out-dir", default="runs/default", help="directory for all outputs")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--version", action="version", version=f"tend {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train-ae", help="stage 1: fit the autoencoder on ID images")
    s.set_defaults(func=cmd_train_ae)

    s = sub.add_parser("train-head", help="stage 2: classifier + margin learner on a frozen backbone")
    s.add_argument("stage1_ckpt")
    s.set_defaults(func=cmd_train_head)

    s = sub.add_parser("score", help="write per-sample scores as CSV")
    s.add_argument("checkpoint")
    s.add_argument("--mode", choices=[m.value for m in Mode])
    s.add_argument("--lambda", dest="lam", type=float, help=f"blend weight (default {DEFAULT_LAMBDA})")
    s.add_argument("--split", default="test", choices=["test", "train"])
    s.add_argument("--val-kinds", nargs="+", metavar="KIND",
                   help="also score generated corruptions of all ID images ('all' or kind names)")
    s.add_argument("--empty", action="store_true", help="score no samples (header-only CSV)")
    s.add_argument("--output")
    s.set_defaults(func=cmd_score)

    s = sub.add_parser("eval", help="AUROC, G-Mean threshold, TPR/FPR/DIFF and ACC_val")
    s.add_argument("scores")
    s.add_argument("--val", action="append", metavar="KIND=PATH", help="validation scores CSV for one corruption")
    s.add_argument("--dataset", help="dataset name for the table row")
    s.add_argument("--margin", type=float, help="R for the table row")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("plot", help="2D distance plots (ground truth and prediction)")
    s.add_argument("scores")
    s.add_argument("--margin", type=float, required=True)
    s.add_argument("--threshold", type=float, help="decision threshold (default: G-Mean optimal)")
    s.set_defaults(func=cmd_plot)

    s = sub.add_parser("distort", help="apply one distortion to a PNG")
    s.add_argument("--kind", required=True, choices=[k.value for k in Kind])
    s.add_argument("--param", action="append", metavar="KEY=JSON")
    s.add_argument("input")
    s.add_argument("output")
    s.set_defaults(func=cmd_distort)

    s = sub.add_parser("make-synthetic", help="export the synthetic blobs/stripes dataset as PNG folders")
    s.add_argument("--dest")
    s.set_defaults(func=cmd_make_synthetic)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config) if args.config else {}
        cfg = apply_seed(cfg, args.seed)
        return args.func(args, cfg)
    except MetricError as exc:
        print(f"tend: metric error: {exc}", file=sys.stderr)
        return EXIT_METRIC
    except TrainingError as exc:
        print(f"tend: training failed: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except (ConfigurationError, ContractError, TendError) as exc:
        print(f"tend: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
