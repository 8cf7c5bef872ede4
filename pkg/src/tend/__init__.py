"""Novelty detection with an autoencoder backbone, a binary discriminator and a
margin learner trained on nonlinearly distorted in-distribution images."""

__version__ = "0.1.0"

from .distortions import (  # noqa: E402
    DistortionSpec,
    Kind,
    distort,
    generate_validation_set,
    sample_train_spec,
)
from .evaluation import EvalReport, LabeledScore, auroc, confusion, evaluate, gmean_threshold, validation_accuracy  # noqa: E402
from .model import TEND, ArchitectureSpec, load_checkpoint, save_checkpoint  # noqa: E402
from .samples import ImageSample, Label, Split  # noqa: E402
from .scoring import Mode, ScoreRecord, score, score_batch  # noqa: E402
from .training import TrainConfig, compute_center, train_stage1, train_stage2  # noqa: E402

__all__ = [
    "ArchitectureSpec", "DistortionSpec", "EvalReport", "ImageSample", "Kind", "Label",
    "LabeledScore", "Mode", "ScoreRecord", "Split", "TEND", "TrainConfig", "auroc",
    "compute_center", "confusion", "distort", "evaluate", "generate_validation_set",
    "gmean_threshold", "load_checkpoint", "sample_train_spec", "save_checkpoint", "score",
    "score_batch", "train_stage1", "train_stage2", "validation_accuracy",
]
