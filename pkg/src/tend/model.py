"""Autoencoder backbone and the stage-2 classifier / margin head.

Layout (kernel 4, stride 2, padding 1 everywhere, so every stage exactly
halves or doubles the spatial side)::

    encoder   Conv(C,16) Conv(16,32) Conv(32,64) Conv(64,128) Conv(128,256)   -> e
    decoder   TConv(256,128) ... TConv(16,C) + sigmoid                         -> I'
    head      Conv(256,512) -> flatten -> FC(fc_in, 512)                       -> c
    classify  FC(512, 1) -> logistic                                           -> p

Every conv and transposed conv except the decoder's last is followed by
batch-norm and ReLU. For a 128 px input the flattened head output is
512 * 2 * 2 = 2048, which gives the FC(2048, 512) layer.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import ConfigurationError

STAGE1 = "STAGE1"
STAGE2 = "STAGE2"
CHECKPOINT_MAGIC = "TENDCKPT-v1"


@dataclass(frozen=True)
class ArchitectureSpec:
    input_side: int = 128
    channels: int = 1
    encoder_widths: tuple[int, ...] = (16, 32, 64, 128, 256)
    head_conv_out: int = 512
    compressed_dim: int = 512
    kernel: int = 4
    stride: int = 2
    padding: int = 1

    def __post_init__(self):
        object.__setattr__(self, "encoder_widths", tuple(int(w) for w in self.encoder_widths))
        if self.channels not in (1, 3):
            raise ConfigurationError(f"channels must be 1 or 3, got {self.channels}")
        if (self.kernel, self.stride, self.padding) != (4, 2, 1):
            raise ConfigurationError("every conv must use kernel 4, stride 2, padding 1")
        side = self.input_side
        if side <= 0 or side & (side - 1):
            raise ConfigurationError(f"input_side must be a power of two, got {side}")
        if side < 2 ** (self.n_stages + 1):
            raise ConfigurationError(
                f"input_side {side} is too small for {self.n_stages} encoder stages plus the head conv")

    @property
    def n_stages(self) -> int:
        return len(self.encoder_widths)

    @property
    def latent_side(self) -> int:
        return self.input_side >> self.n_stages

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return (self.encoder_widths[-1], self.latent_side, self.latent_side)

    @property
    def fc_in(self) -> int:
        return self.head_conv_out * (self.input_side >> (self.n_stages + 1)) ** 2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_widths"] = list(self.encoder_widths)
        return d


def _down(cin, cout):
    return nn.Sequential(nn.Conv2d(cin, cout, 4, 2, 1), nn.BatchNorm2d(cout), nn.ReLU(inplace=True))


def _up(cin, cout):
    return nn.Sequential(nn.ConvTranspose2d(cin, cout, 4, 2, 1), nn.BatchNorm2d(cout), nn.ReLU(inplace=True))


class TEND(nn.Module):
    """Backbone autoencoder plus classifier head.

    ``stage`` records which training stage last produced the weights; the
    center ``O`` and margin ``R`` live as buffers so they travel with the
    checkpoint once stage 2 has run.
    """

    def __init__(self, arch: ArchitectureSpec | None = None):
        super().__init__()
        self.arch = arch = arch or ArchitectureSpec()
        widths = (arch.channels,) + arch.encoder_widths
        self.encoder = nn.Sequential(*[_down(a, b) for a, b in zip(widths[:-1], widths[1:])])
        rev = widths[::-1]
        ups = [_up(a, b) for a, b in zip(rev[:-2], rev[1:-1])]
        ups.append(nn.Sequential(nn.ConvTranspose2d(rev[-2], rev[-1], 4, 2, 1), nn.Sigmoid()))
        self.decoder = nn.Sequential(*ups)
        self.head_conv = _down(arch.encoder_widths[-1], arch.head_conv_out)
        self.fc_compress = nn.Linear(arch.fc_in, arch.compressed_dim)
        self.fc_classify = nn.Linear(arch.compressed_dim, 1)
        self.register_buffer("center", torch.zeros(arch.compressed_dim))
        self.register_buffer("margin", torch.zeros(()))
        self.stage = STAGE1
        self.has_center = False
        self.seeds: dict[str, int] = {}

    @property
    def backbone(self) -> list[nn.Module]:
        return [self.encoder, self.decoder]

    @property
    def head(self) -> list[nn.Module]:
        return [self.head_conv, self.fc_compress, self.fc_classify]

    def head_parameters(self):
        for m in self.head:
            yield from m.parameters()

    def _check(self, x: torch.Tensor, shape: tuple[int, ...], what: str):
        if x.dim() != len(shape) + 1 or tuple(x.shape[1:]) != shape:
            raise ConfigurationError(f"{what} expects N x {' x '.join(map(str, shape))}, got {tuple(x.shape)}")

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        a = self.arch
        self._check(x, (a.channels, a.input_side, a.input_side), "encode")
        return self.encoder(x)

    def decode(self, e: torch.Tensor) -> torch.Tensor:
        self._check(e, self.arch.latent_shape, "decode")
        return self.decoder(e)

    def compress(self, e: torch.Tensor) -> torch.Tensor:
        self._check(e, self.arch.latent_shape, "compress")
        h = self.head_conv(e).flatten(1)
        if h.shape[1] != self.fc_compress.in_features:
            raise ConfigurationError(f"flattened head size {h.shape[1]} != FC input {self.fc_compress.in_features}")
        return self.fc_compress(h)

    def logit(self, c: torch.Tensor) -> torch.Tensor:
        self._check(c, (self.arch.compressed_dim,), "classify")
        return self.fc_classify(c).squeeze(1)

    def classify(self, c: torch.Tensor) -> torch.Tensor:
        """Probability that ``c`` came from a distorted (OOD) image."""
        return torch.sigmoid(self.logit(c))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.decode(self.encode(x))

    def freeze_backbone(self):
        for m in self.backbone:
            m.eval()
            for p in m.parameters():
                p.requires_grad_(False)

    def set_center(self, center: torch.Tensor, margin: float):
        self.center.copy_(center.detach())
        self.margin.fill_(float(margin))
        self.has_center = True


def param_hash(modules) -> str:
    """SHA-256 over the names and bytes of every parameter and buffer."""
    h = hashlib.sha256()
    for m in modules:
        for name, t in sorted(m.state_dict().items()):
            h.update(name.encode())
            h.update(t.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def backbone_hash(model: TEND) -> str:
    return param_hash(model.backbone)


# --------------------------------------------------------------------------
# checkpoint archive: MAGIC, meta.json, params/<name>.npy


def _zip_write(zf: zipfile.ZipFile, name: str, data: bytes):
    # fixed timestamp keeps archives byte-identical across reruns
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    info.compress_type = zipfile.ZIP_DEFLATED
    zf.writestr(info, data)


def checkpoint_bytes(model: TEND, extra: dict | None = None) -> bytes:
    state = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    meta = {
        "magic": CHECKPOINT_MAGIC,
        "architecture": model.arch.to_dict(),
        "stage": model.stage,
        "has_center": model.has_center,
        "seeds": model.seeds,
        "params": {k: {"shape": list(v.shape), "dtype": str(v.dtype)} for k, v in state.items()},
        "extra": extra or {},
    }
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        _zip_write(zf, "MAGIC", CHECKPOINT_MAGIC.encode())
        _zip_write(zf, "meta.json", json.dumps(meta, indent=2, sort_keys=True).encode())
        for name, arr in state.items():
            member = io.BytesIO()
            np.lib.format.write_array(member, np.ascontiguousarray(arr), allow_pickle=False)
            _zip_write(zf, f"params/{name}.npy", member.getvalue())
    return buf.getvalue()


def save_checkpoint(model: TEND, path: str | Path, extra: dict | None = None):
    from .io import atomic_write_bytes

    atomic_write_bytes(path, checkpoint_bytes(model, extra))


def load_checkpoint(path: str | Path) -> tuple[TEND, dict]:
    """Rebuild a model from an archive; returns (model, meta)."""
    try:
        with zipfile.ZipFile(path) as zf:
            magic = zf.read("MAGIC").decode()
            meta = json.loads(zf.read("meta.json"))
            state = {
                name: torch.from_numpy(np.lib.format.read_array(
                    io.BytesIO(zf.read(f"params/{name}.npy")), allow_pickle=False))
                for name in meta["params"]
            }
    except (zipfile.BadZipFile, KeyError) as exc:
        raise ConfigurationError(f"{path} is not a tend checkpoint: {exc}") from None
    if magic != CHECKPOINT_MAGIC:
        raise ConfigurationError(f"{path}: unsupported checkpoint format {magic!r}")
    model = TEND(ArchitectureSpec(**meta["architecture"]))
    model.load_state_dict(state)
    model.stage = meta["stage"]
    model.has_center = bool(meta["has_center"])
    model.seeds = dict(meta.get("seeds", {}))
    model.eval()
    return model, meta
