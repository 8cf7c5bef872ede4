"""Stage-1 autoencoder training and stage-2 joint classifier / margin training."""

from __future__ import annotations

import copy
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .distortions import _derive_seed, pseudo_outlier_batch
from .errors import ConfigurationError, ContractError, TrainingError
from .model import STAGE1, STAGE2, TEND, ArchitectureSpec, backbone_hash
from .samples import ImageSample, Label, stack_pixels

log = logging.getLogger(__name__)

MARGIN_REDUCTIONS = ("mean_dim", "sum_dim")


@dataclass
class TrainConfig:
    stage: int = 1
    epochs: int = 50
    learning_rate: float = 1e-3
    batch_size: int = 32
    warmup_epochs: int = 10
    margin: float = 250.0
    seed: int = 0
    supervised_mode: bool = False
    ood_train_classes: list[str] = field(default_factory=list)
    margin_reduction: str = "mean_dim"

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ConfigurationError(f"stage must be 1 or 2, got {self.stage}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigurationError("epochs must be >= 0 and batch_size >= 1")
        if not self.margin > 0:
            raise ConfigurationError(f"margin R must be positive, got {self.margin}")
        if self.margin_reduction not in MARGIN_REDUCTIONS:
            raise ConfigurationError(f"margin_reduction must be one of {MARGIN_REDUCTIONS}")
        if self.stage == 2 and self.epochs > 0 and not self.supervised_mode \
                and not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigurationError("stage 2 needs 0 <= warmup_epochs < epochs")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Center:
    vector: torch.Tensor
    computed_at_epoch: int


def to_tensor(samples: list[ImageSample]) -> torch.Tensor:
    return torch.from_numpy(stack_pixels(samples))


# --------------------------------------------------------------------------
# losses


def reconstruction_loss(image, reconstruction) -> torch.Tensor:
    """Mean squared error over pixels, channels and batch."""
    x = torch.as_tensor(image, dtype=torch.float64 if not torch.is_tensor(image) else None)
    y = torch.as_tensor(reconstruction, dtype=x.dtype)
    if x.shape != y.shape:
        raise ConfigurationError(f"image {tuple(x.shape)} and reconstruction {tuple(y.shape)} differ")
    return ((x - y) ** 2).mean()


def _sq_dev(c, center):
    c = torch.as_tensor(c)
    center = torch.as_tensor(center, dtype=c.dtype)
    if c.shape[-1] != center.shape[-1]:
        raise ConfigurationError(f"feature length {c.shape[-1]} != center length {center.shape[-1]}")
    return (c - center) ** 2


def margin_loss_in(c, center, reduction: str = "mean_dim") -> torch.Tensor:
    """Pull ID features towards the center.

    ``mean_dim``: mean over feature dimensions of (c_i - O_i)^2 per sample;
    ``sum_dim``: the full squared distance ||c - O||^2. Batches (B x K) are
    averaged over samples.
    """
    sq = _sq_dev(c, center)
    per_sample = sq.mean(-1) if reduction == "mean_dim" else sq.sum(-1)
    return per_sample.mean()


def margin_loss_out(c, center, margin: float, reduction: str = "mean_dim") -> torch.Tensor:
    """Hinge pushing distorted features at least ``margin`` away from the center.

    Zero when every per-dimension squared deviation (``mean_dim``) or the
    squared distance (``sum_dim``) reaches the margin. ReLU makes the
    subgradient at the kink zero.
    """
    if not margin > 0:
        raise ConfigurationError(f"margin must be positive, got {margin}")
    sq = _sq_dev(c, center)
    if reduction == "mean_dim":
        per_sample = torch.relu(margin - sq).mean(-1)
    else:
        per_sample = torch.relu(margin - sq.sum(-1))
    return per_sample.mean()


def stage2_objective(c_id, c_out, logit_id, logit_out, center, margin,
                     reduction="mean_dim", use_margin=True):
    """BCE (ID = 0, distorted = 1) plus the two margin terms.

    Returns (total, bce, margin_term).
    """
    li = torch.as_tensor(logit_id).reshape(-1)
    lo = torch.as_tensor(logit_out).reshape(-1)
    labels = torch.cat([torch.zeros_like(li), torch.ones_like(lo)])
    bce = F.binary_cross_entropy_with_logits(torch.cat([li, lo]), labels)
    if not use_margin:
        return bce, bce, torch.zeros((), dtype=bce.dtype)
    if center is None:
        raise ContractError("margin term requested before the center was computed")
    mrg = margin_loss_in(c_id, center, reduction) + margin_loss_out(c_out, center, margin, reduction)
    return bce + mrg, bce, mrg


def stage2_loss(model: TEND, batch_id: torch.Tensor, batch_out: torch.Tensor,
                center: torch.Tensor | None, margin: float, reduction: str = "mean_dim",
                use_margin: bool = True):
    """Stage-2 loss on image batches; the backbone only extracts features."""
    if len(batch_id) == 0 or len(batch_out) == 0:
        raise ConfigurationError("both stage-2 batches must be non-empty")
    with torch.no_grad():
        e = model.encode(torch.cat([batch_id, batch_out]))
    return _head_loss(model, e, len(batch_id), center, margin, reduction, use_margin)


def _head_loss(model, e, n_id, center, margin, reduction, use_margin):
    # one forward over the mixed batch so head batch-norm never sees a single class
    c = model.compress(e)
    logits = model.logit(c)
    return stage2_objective(c[:n_id], c[n_id:], logits[:n_id], logits[n_id:],
                            center, margin, reduction, use_margin)


# --------------------------------------------------------------------------
# stage 1


def _check_finite(loss: torch.Tensor, epoch: int, step: int):
    if not torch.isfinite(loss):
        raise TrainingError(f"non-finite loss {loss.item()} at epoch {epoch}, step {step}")


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def train_stage1(data: list[ImageSample], cfg: TrainConfig,
                 arch: ArchitectureSpec | None = None) -> tuple[TEND, list[dict]]:
    """Fit the autoencoder on ID images by mini-batch Adam on the MSE.

    History row 0 holds the loss of the untrained network; row k the mean
    batch loss of epoch k.
    """
    if not data:
        raise TrainingError("stage 1 needs at least one ID image")
    if any(s.label is not Label.ID for s in data):
        raise ConfigurationError("stage 1 trains on ID images only")
    if cfg.stage != 1:
        raise ConfigurationError("train_stage1 needs a stage-1 config")
    arch = arch or ArchitectureSpec(input_side=data[0].side, channels=data[0].channels)
    torch.manual_seed(cfg.seed)
    model = TEND(arch)
    model.seeds = {"stage1": cfg.seed}
    x_all = to_tensor(data)
    rng = np.random.default_rng(cfg.seed)

    probe = copy.deepcopy(model).train()
    with torch.no_grad():
        initial = [reconstruction_loss(x, probe(x)).item()
                   for x in torch.split(x_all, cfg.batch_size)]
    history = [{"epoch": 0, "loss": float(np.mean(initial))}]

    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        t0 = time.perf_counter()
        losses = []
        for step, idx in enumerate(_batches(len(data), cfg.batch_size, rng)):
            if len(idx) < 2:
                continue  # batch-norm needs two samples
            x = x_all[torch.from_numpy(idx)]
            loss = reconstruction_loss(x, model(x))
            _check_finite(loss, epoch, step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        history.append({"epoch": epoch, "loss": float(np.mean(losses)),
                        "seconds": time.perf_counter() - t0})
        log.info("stage1 epoch %d loss %.6f", epoch, history[-1]["loss"])
    model.eval()
    model.stage = STAGE1
    return model, history


# --------------------------------------------------------------------------
# stage 2


@torch.no_grad()
def encode_all(model: TEND, x: torch.Tensor, batch_size: int = 64) -> torch.Tensor:
    model.encoder.eval()
    return torch.cat([model.encode(chunk) for chunk in torch.split(x, batch_size)])


@torch.no_grad()
def compute_center(model: TEND, data, batch_size: int = 64, computed_at_epoch: int = 0) -> Center:
    """Mean compressed feature of all ID training samples (eval-mode head).

    ``data`` is a list of ImageSamples or an N x C x H x W tensor.
    """
    x = to_tensor(data) if isinstance(data, list) and data else data
    if x is None or len(x) == 0:
        raise TrainingError("cannot compute a center from an empty ID set")
    was_training = model.training
    model.eval()
    total = torch.zeros(model.arch.compressed_dim, dtype=torch.float64)
    for chunk in torch.split(x, batch_size):
        total += model.compress(model.encode(chunk)).double().sum(0)
    model.train(was_training)
    return Center((total / len(x)).float(), computed_at_epoch)


def _head_train(model: TEND):
    model.train()
    model.freeze_backbone()


def train_stage2(data: list[ImageSample], cfg: TrainConfig, backbone: TEND,
                 ood_data: list[ImageSample] | None = None) -> tuple[TEND, Center | None, list[dict]]:
    """Train the classifier head (and margin learner) on top of a frozen backbone.

    Each ID batch is paired with an equally sized batch of freshly warped
    copies. Warm-up epochs use BCE only; the center is then fixed and the
    margin terms join the objective. In supervised mode the warped batch is
    replaced by real OOD images and no margin term is used.

    Returns (model, center, history); center is None in supervised mode.
    """
    if backbone.stage != STAGE1:
        raise ContractError(f"stage 2 needs a STAGE1 backbone, got {backbone.stage}")
    if cfg.stage != 2:
        raise ConfigurationError("train_stage2 needs a stage-2 config")
    if not data:
        raise TrainingError("stage 2 needs at least one ID image")
    if any(s.label is not Label.ID for s in data):
        raise ConfigurationError("stage 2 trains on unlabelled ID images only")
    if cfg.supervised_mode and not ood_data:
        raise ConfigurationError("supervised mode needs real OOD training images")

    model = copy.deepcopy(backbone)
    frozen = backbone_hash(model)
    torch.manual_seed(cfg.seed)
    for m in model.head:
        for layer in m.modules():
            if hasattr(layer, "reset_parameters"):
                layer.reset_parameters()
    model.seeds = {**backbone.seeds, "stage2": cfg.seed}
    model.freeze_backbone()

    x_id = to_tensor(data)
    e_id = encode_all(model, x_id)
    e_ood = encode_all(model, to_tensor(ood_data)) if cfg.supervised_mode else None
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.Adam(list(model.head_parameters()), lr=cfg.learning_rate)

    center = None
    use_margin = False
    history = []
    if not cfg.supervised_mode and cfg.warmup_epochs == 0 and cfg.epochs > 0:
        center = compute_center(model, x_id, computed_at_epoch=0)
        use_margin = True

    for epoch in range(1, cfg.epochs + 1):
        _head_train(model)
        t0 = time.perf_counter()
        sums = np.zeros(3)
        steps = 0
        for step, idx in enumerate(_batches(len(data), cfg.batch_size, rng)):
            if cfg.supervised_mode:
                e_out = e_ood[torch.from_numpy(rng.choice(len(e_ood), size=len(idx)))]
            else:
                warped = pseudo_outlier_batch([data[i] for i in idx], _derive_seed(cfg.seed, epoch, step))
                with torch.no_grad():
                    e_out = model.encode(to_tensor(warped))
            e = torch.cat([e_id[torch.from_numpy(idx)], e_out])
            total, bce, mrg = _head_loss(model, e, len(idx),
                                         None if center is None else center.vector,
                                         cfg.margin, cfg.margin_reduction, use_margin)
            _check_finite(total, epoch, step)
            opt.zero_grad()
            total.backward()
            opt.step()
            sums += [total.item(), bce.item(), mrg.item()]
            steps += 1
        phase = "joint" if use_margin else ("supervised" if cfg.supervised_mode else "warmup")
        means = [float(v) for v in sums / steps]
        history.append({"epoch": epoch, "phase": phase, "total": means[0],
                        "bce": means[1], "margin": means[2],
                        "seconds": time.perf_counter() - t0})
        log.info("stage2 epoch %d %s total %.6f bce %.6f margin %.6f", epoch, phase,
                 *[history[-1][k] for k in ("total", "bce", "margin")])
        if not cfg.supervised_mode and epoch == cfg.warmup_epochs:
            center = compute_center(model, x_id, computed_at_epoch=epoch)
            use_margin = True

    model.eval()
    if backbone_hash(model) != frozen:
        raise ContractError("stage 2 modified the frozen backbone")
    model.stage = STAGE2
    if center is not None:
        model.set_center(center.vector, cfg.margin)
    return model, center, history
