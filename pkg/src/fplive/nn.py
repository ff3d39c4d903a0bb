"""Layers and the small SE-CNN liveness model.

The model is a plain stack of ``conv3x3 -> BN -> ReLU [-> SE] [-> maxpool]``
stages followed by global average pooling, a linear embedding layer (192
dims by default) and a 2-way linear head. Class index 1 is "live".
"""

from __future__ import annotations

import io
import math
import os
import struct
import tempfile
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import RngStream, Tensor

LIVE = 1
SPOOF = 0

# stage widths per preset; every stage after the first carries an SE block
PRESETS: dict[str, tuple[int, ...]] = {
    "tiny": (8, 16, 32, 48),
    "small": (16, 32, 64, 112),
    "base": (32, 64, 128, 256),
}
PRESET_IDS = {"tiny": 0, "small": 1, "base": 2}
SE_REDUCTION = 4
DEFAULT_EMBED_DIM = 192
DEFAULT_INPUT = (1, 64, 64)


def kaiming_uniform(shape, fan_in: int, rng: RngStream) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Module:
    training = True

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_tensors() if t.requires_grad]

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        return []

    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def modules(self) -> list[Module]:
        return [self]


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: RngStream, stride: int = 1, padding: int = 0):
        self.stride, self.padding = stride, padding
        self.weight = Tensor(kaiming_uniform((cout, cin, k, k), cin * k * k, rng), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.stride, self.padding)

    def named_tensors(self):
        return [("weight", self.weight)]


class Linear(Module):
    def __init__(self, din: int, dout: int, rng: RngStream, bias: bool = True):
        self.weight = Tensor(kaiming_uniform((din, dout), din, rng), requires_grad=True)
        self.bias = Tensor(np.zeros(dout, np.float32), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = T.matmul(x, self.weight)
        if self.bias is not None:
            out = T.add(out, T.expand(T.reshape(self.bias, (1, -1)), out.shape))
        return out

    def named_tensors(self):
        items = [("weight", self.weight)]
        if self.bias is not None:
            items.append(("bias", self.bias))
        return items


class BatchNorm(Module):
    """Batch norm over channels of [N,C,H,W] or [N,C]; momentum 0.1, eps 1e-5."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(channels, np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, np.float32), requires_grad=True)
        self.running_mean = Tensor(np.zeros(channels, np.float32))
        self.running_var = Tensor(np.ones(channels, np.float32))
        self.momentum, self.eps = momentum, eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.batch_norm(
            x, self.gamma, self.beta, self.running_mean.data, self.running_var.data,
            self.training, self.momentum, self.eps,
        )

    def named_tensors(self):
        return [
            ("gamma", self.gamma),
            ("beta", self.beta),
            ("running_mean", self.running_mean),
            ("running_var", self.running_var),
        ]


def se_block(x: Tensor, w1: Tensor, w2: Tensor) -> Tensor:
    """Squeeze-excitation gate: x * sigmoid(relu(gap(x) @ w1) @ w2) per channel."""
    c = x.shape[1]
    if w1.shape[0] != c or w2.shape[1] != c or w1.shape[1] != w2.shape[0]:
        raise T.ShapeError(f"SE weights {w1.shape}/{w2.shape} do not fit {c} channels")
    squeeze = T.global_avg_pool(x)
    gate = T.sigmoid(T.matmul(T.relu(T.matmul(squeeze, w1)), w2))
    return T.channel_scale(x, gate)


class SEBlock(Module):
    def __init__(self, channels: int, reduction: int, rng: RngStream):
        if reduction < 1 or channels % reduction:
            raise ValueError(f"SE: {channels} channels not divisible by reduction {reduction}")
        hidden = channels // reduction
        self.w1 = Tensor(kaiming_uniform((channels, hidden), channels, rng), requires_grad=True)
        self.w2 = Tensor(kaiming_uniform((hidden, channels), hidden, rng), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return se_block(x, self.w1, self.w2)

    def named_tensors(self):
        return [("w1", self.w1), ("w2", self.w2)]


class Dropout(Module):
    def __init__(self, p: float, rng: RngStream):
        if not 0.0 <= p < 1.0:
            raise ValueError("dropout p must lie in [0, 1)")
        self.p, self.rng = p, rng

    def __call__(self, x: Tensor) -> Tensor:
        if not self.training or self.p == 0.0:
            return x
        keep = (self.rng.random(x.shape) >= self.p).astype(x.dtype) / (1.0 - self.p)
        return T.mul(x, Tensor(keep, dtype=x.dtype))


class Stage(Module):
    def __init__(self, cin: int, cout: int, rng: RngStream, se: bool, pool: bool):
        self.conv = Conv2d(cin, cout, 3, rng.child(0), padding=1)
        self.bn = BatchNorm(cout)
        self.se = SEBlock(cout, SE_REDUCTION, rng.child(1)) if se else None
        self.pool = pool

    def __call__(self, x: Tensor) -> Tensor:
        x = T.relu(self.bn(self.conv(x)))
        if self.se is not None:
            x = self.se(x)
        if self.pool:
            x = T.pool2d(x, "max", 2)
        return x

    def modules(self):
        mods = [self, self.conv, self.bn]
        if self.se is not None:
            mods.append(self.se)
        return mods

    def named_tensors(self):
        items = [(f"conv.{n}", t) for n, t in self.conv.named_tensors()]
        items += [(f"bn.{n}", t) for n, t in self.bn.named_tensors()]
        if self.se is not None:
            items += [(f"se.{n}", t) for n, t in self.se.named_tensors()]
        return items


@dataclass
class LivenessModel(Module):
    preset: str
    embed_dim: int
    seed: int
    input_shape: tuple[int, int, int] = DEFAULT_INPUT
    dropout: float = 0.0
    stages: list[Stage] = field(default_factory=list, repr=False)

    def __post_init__(self):
        rng = RngStream(self.seed, 0)
        widths = PRESETS[self.preset]
        cin = self.input_shape[0]
        self.stages = []
        for i, w in enumerate(widths):
            last = i == len(widths) - 1
            self.stages.append(Stage(cin, w, rng.child(1, i), se=i > 0, pool=not last))
            cin = w
        self.embed = Linear(cin, self.embed_dim, rng.child(2))
        self.drop = Dropout(self.dropout, rng.child(3))
        self.head = Linear(self.embed_dim, 2, rng.child(4))
        self.training = True

    def modules(self):
        mods: list[Module] = [self]
        for s in self.stages:
            mods += s.modules()
        return mods + [self.embed, self.drop, self.head]

    def named_tensors(self):
        items = []
        for i, s in enumerate(self.stages):
            items += [(f"stage{i}.{n}", t) for n, t in s.named_tensors()]
        items += [(f"embed.{n}", t) for n, t in self.embed.named_tensors()]
        items += [(f"head.{n}", t) for n, t in self.head.named_tensors()]
        return items

    def param_count(self) -> int:
        return int(sum(t.size for t in self.parameters()))

    def features(self, x: Tensor) -> Tensor:
        for s in self.stages:
            x = s(x)
        return self.embed(T.global_avg_pool(x))

    def __call__(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Return ``(embedding [N,D], logits [N,2])``."""
        emb = self.features(x)
        return emb, self.head(self.drop(emb))

    def predict_proba(self, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
        """Eval-mode softmax probabilities for images [N,H,W] or [N,C,H,W]."""
        x = _as_batch(images, self.input_shape)
        was_training = self.training
        self.eval()
        out = []
        try:
            for i in range(0, len(x), batch_size):
                _, logits = self(Tensor(x[i : i + batch_size]))
                out.append(T.softmax_np(logits.data))
        finally:
            self.train(was_training)
        return np.concatenate(out) if out else np.zeros((0, 2))


def _as_batch(images: np.ndarray, input_shape) -> np.ndarray:
    x = np.asarray(images, dtype=np.float32)
    if x.ndim == 3:
        x = x[:, None]
    if x.ndim != 4 or tuple(x.shape[1:]) != tuple(input_shape):
        raise T.ShapeError(f"expected images shaped [N,{','.join(map(str, input_shape))}], got {x.shape}")
    return x


def build_model(preset: str = "tiny", embed_dim: int = DEFAULT_EMBED_DIM, seed: int = 0, **kw) -> LivenessModel:
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    return LivenessModel(preset, embed_dim, seed, **kw)


def preset_param_count(preset: str, embed_dim: int = DEFAULT_EMBED_DIM, in_channels: int = 1) -> int:
    """Closed-form trainable parameter count of a preset.

    conv 3x3 (no bias) + BN (gamma, beta) per stage, SE (two bias-free
    matrices C x C/r) on stages 1.., then embedding C_last x D + D and the
    head D x 2 + 2.
    """
    widths = PRESETS[preset]
    total, cin = 0, in_channels
    for i, w in enumerate(widths):
        total += 9 * cin * w + 2 * w
        if i > 0:
            total += 2 * w * (w // SE_REDUCTION)
        cin = w
    return total + cin * embed_dim + embed_dim + 2 * embed_dim + 2


def extract_feature(model: LivenessModel, image: np.ndarray) -> tuple[np.ndarray, float]:
    """Pre-head embedding of one image plus wall-clock extraction time (ms)."""
    x = np.asarray(image, dtype=np.float32)
    if x.ndim == 2:
        x = x[None]
    if tuple(x.shape) != tuple(model.input_shape):
        raise T.ShapeError(f"image shape {x.shape} != model input {model.input_shape}")
    was_training = model.training
    model.eval()
    try:
        t0 = time.perf_counter()
        emb = model.features(Tensor(x[None]))
        ms = (time.perf_counter() - t0) * 1000.0
    finally:
        model.train(was_training)
    return emb.data[0].copy(), ms


# ------------------------------------------------------------- checkpoints

MAGIC = b"FPLM"
VERSION = 1


def save_checkpoint(model: LivenessModel, path: str | os.PathLike) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<III", VERSION, PRESET_IDS[model.preset], model.embed_dim))
    for name, t in model.named_tensors():
        raw = name.encode()
        arr = np.ascontiguousarray(t.data, dtype="<f4")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    atomic_write(path, buf.getvalue())


def load_checkpoint(path: str | os.PathLike, seed: int = 0, input_shape: tuple[int, int, int] | None = None) -> LivenessModel:
    """Rebuild a model from an FPLM file.

    The file does not record the spatial input size; ``input_shape``
    defaults to the stored channel count at the default resolution.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC or len(blob) < 16:
        raise ValueError(f"{path}: not an FPLM checkpoint")
    version, preset_id, dim = struct.unpack_from("<III", blob, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    names = {v: k for k, v in PRESET_IDS.items()}
    if preset_id not in names:
        raise ValueError(f"{path}: unknown preset id {preset_id}")
    preset = names[preset_id]
    try:
        tensors = _read_tensors(blob)
    except struct.error as exc:
        raise ValueError(f"{path}: truncated checkpoint") from exc
    if "stage0.conv.weight" not in tensors:
        raise ValueError(f"{path}: missing tensor stage0.conv.weight")
    first = tensors["stage0.conv.weight"]
    shape = tuple(input_shape) if input_shape is not None else (first.shape[1], *DEFAULT_INPUT[1:])
    if shape[0] != first.shape[1]:
        raise ValueError(f"{path}: checkpoint has {first.shape[1]} input channels, not {shape[0]}")
    model = build_model(preset, dim, seed, input_shape=shape)
    for name, t in model.named_tensors():
        if name not in tensors:
            raise ValueError(f"{path}: missing tensor {name}")
        if tensors[name].shape != t.shape:
            raise ValueError(f"{path}: tensor {name} has shape {tensors[name].shape}, want {t.shape}")
        t.data = tensors[name].copy()
    return model


def _read_tensors(blob: bytes) -> dict[str, np.ndarray]:
    pos = 16
    tensors = {}
    while pos < len(blob):
        (n,) = struct.unpack_from("<I", blob, pos)
        name = blob[pos + 4 : pos + 4 + n].decode()
        pos += 4 + n
        (rank,) = struct.unpack_from("<I", blob, pos)
        dims = struct.unpack_from(f"<{rank}I", blob, pos + 4)
        pos += 4 + 4 * rank
        count = int(np.prod(dims)) if rank else 1
        if pos + 4 * count > len(blob):
            raise struct.error(f"truncated tensor {name}")
        tensors[name] = np.frombuffer(blob, "<f4", count, pos).reshape(dims).astype(np.float32)
        pos += 4 * count
    return tensors


def atomic_write(path: str | os.PathLike, data: bytes) -> None:
    """Write-temp-then-rename so readers never observe partial files."""
    path = os.fspath(path)
    d = os.path.dirname(path) or "."
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
