"""Staged bottleneck residual classifier with optional latent fusion.

The layout follows the usual ResNet-50 staging (stem, four bottleneck
stages, global average pool, linear head) at a much smaller width. Batch
normalization is replaced by a learnable per-channel bias on every conv.

Latent fusion: when ``fusion_point`` names a stage, a linear adapter maps
the VAE latent to one value per channel of that stage's output, and the
result is added to every spatial position. The adapter starts at zero, so a
freshly built fused network computes exactly the same function as its
baseline.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from . import ops
from .data import NUM_CLASSES, WaferMap, to_array
from .errors import InvalidArgumentError
from .nn import Module, he_normal, load_checkpoint, save_checkpoint, zeros
from .optim import Adam
from .tensor import Tensor, as_tensor

log = logging.getLogger(__name__)

FUSION_POINTS = ("none", "after_stage1", "after_stage2", "after_stage3", "after_stage4")


@dataclass(frozen=True)
class NetworkConfig:
    image_size: int = 27
    stem_kernel: int = 7
    stem_stride: int = 2
    stem_channels: int = 8
    block_counts: tuple[int, ...] = (1, 1, 2, 1)
    widths: tuple[int, ...] = (8, 16, 32, 64)
    expansion: int = 2
    fusion_point: str = "none"
    num_classes: int = NUM_CLASSES
    latent_dim: int = 16

    def __post_init__(self):
        object.__setattr__(self, "block_counts", tuple(int(b) for b in self.block_counts))
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.fusion_point not in FUSION_POINTS:
            raise InvalidArgumentError(
                f"fusion_point must be one of {', '.join(FUSION_POINTS)}; got {self.fusion_point!r}")
        if len(self.block_counts) != 4 or len(self.widths) != 4:
            raise InvalidArgumentError("block_counts and widths need one entry per stage (4)")
        if min(self.block_counts) < 1:
            raise InvalidArgumentError(f"block counts must be positive: {self.block_counts}")
        if min(self.widths) < 1 or any(b < a for a, b in zip(self.widths, self.widths[1:])):
            raise InvalidArgumentError(f"stage widths must be positive and non-decreasing: {self.widths}")
        if self.image_size % 2 == 0 or self.image_size < 3:
            raise InvalidArgumentError(f"image_size must be odd and >= 3, got {self.image_size}")
        if self.expansion < 1 or self.num_classes < 2 or self.latent_dim < 1:
            raise InvalidArgumentError(f"invalid network config {self}")

    @property
    def fusion_stage(self) -> int:
        """1-4 for a fused network, 0 for the baseline."""
        return FUSION_POINTS.index(self.fusion_point)

    def with_fusion(self, fusion_point: str) -> "NetworkConfig":
        return NetworkConfig(**{**asdict(self), "fusion_point": fusion_point})


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 25
    batch_size: int = 32
    lr: float = 0.002
    seed: int = 0
    schedule: str = "cosine"

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr < 0:
            raise InvalidArgumentError(f"invalid training config {self}")
        if self.schedule not in ("cosine", "constant"):
            raise InvalidArgumentError(f"schedule must be 'cosine' or 'constant', got {self.schedule!r}")

    def lr_at(self, step: int, total: int) -> float:
        if self.schedule == "constant" or total <= 1:
            return self.lr
        return self.lr * 0.5 * (1.0 + math.cos(math.pi * step / total))


def _down(size: int, base: int) -> tuple[int, int, int]:
    """Kernel, padding and output size of a stride-2 conv halving ``size`` (rounding up)."""
    k = base if size % 2 else base + 1
    pad = base // 2
    return k, pad, (size + 2 * pad - k) // 2 + 1


class _Conv(Module):
    def __init__(self, rng, cin, cout, k, stride=1, padding=0, gain=1.0):
        self.weight = he_normal(rng, (cout, cin, k, k), cin * k * k, gain)
        self.bias = zeros((cout,))
        self.stride = stride
        self.padding = padding

    def __call__(self, x):
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class Bottleneck(Module):
    """1x1 reduce, 3x3, 1x1 expand; projection shortcut when the shape changes."""

    def __init__(self, rng, cin, mid, cout, size, stride):
        self.reduce = _Conv(rng, cin, mid, 1)
        if stride == 1:
            self.spatial = _Conv(rng, mid, mid, 3, padding=1)
            out_size = size
        else:
            k, pad, out_size = _down(size, 3)
            self.spatial = _Conv(rng, mid, mid, k, stride=2, padding=pad)
        self.expand = _Conv(rng, mid, cout, 1, gain=0.5)
        self.shortcut = None
        if stride != 1 or cin != cout:
            if stride == 1:
                self.shortcut = _Conv(rng, cin, cout, 1)
            else:
                k, pad, _ = _down(size, 1)
                self.shortcut = _Conv(rng, cin, cout, k, stride=2, padding=pad)
        self.out_size = out_size

    def __call__(self, x):
        h = ops.relu(self.reduce(x))
        h = ops.relu(self.spatial(h))
        h = self.expand(h)
        skip = x if self.shortcut is None else self.shortcut(x)
        return ops.relu(ops.add(h, skip))


class FusionAdapter(Module):
    def __init__(self, latent_dim: int, channels: int):
        self.weight = zeros((channels, latent_dim))
        self.bias = zeros((channels,))

    def __call__(self, features: Tensor, latent: Tensor) -> Tensor:
        shift = ops.linear(latent, self.weight, self.bias)
        return ops.add(features, ops.reshape(shift, shift.shape + (1, 1)))


class ResidualClassifier(Module):
    def __init__(self, config: NetworkConfig, rng_seed: int = 0):
        self.config = config
        rng = np.random.default_rng(rng_seed)
        pad = config.stem_kernel // 2
        span = config.image_size + 2 * pad - config.stem_kernel
        if span < 0 or span % config.stem_stride:
            raise InvalidArgumentError(f"stem does not tile a {config.image_size}-pixel input")
        self.stem = _Conv(rng, 3, config.stem_channels, config.stem_kernel,
                          stride=config.stem_stride, padding=pad)
        size = span // config.stem_stride + 1
        cin = config.stem_channels
        self.stages: list[_Stage] = []
        self.stage_channels: list[int] = []
        for s, (count, width) in enumerate(zip(config.block_counts, config.widths)):
            cout = width * config.expansion
            blocks = []
            for b in range(count):
                stride = 2 if (s > 0 and b == 0) else 1
                block = Bottleneck(rng, cin, width, cout, size, stride)
                blocks.append(block)
                size, cin = block.out_size, cout
            self.stages.append(_Stage(blocks))
            self.stage_channels.append(cout)
        self.head = _Head(rng, cin, config.num_classes)
        self.trained = False
        self.optimizer_state = None
        self.fusion = None
        if config.fusion_stage:
            self.fusion = FusionAdapter(config.latent_dim, self.stage_channels[config.fusion_stage - 1])

    @property
    def fused(self) -> bool:
        return self.fusion is not None

    def forward(self, x, latent=None) -> Tensor:
        """Logits (N, K) for images (N, 3, H, W); a single (3, H, W) image gives (K,)."""
        x = as_tensor(x)
        single = x.ndim == 3
        if single:
            x = ops.reshape(x, (1,) + x.shape)
        s = self.config.image_size
        if x.ndim != 4 or x.shape[1:] != (3, s, s):
            raise InvalidArgumentError(f"classifier expects input (3, {s}, {s}), got {x.shape[1:]}")
        if self.fused and latent is None:
            raise InvalidArgumentError(f"{self.config.fusion_point} network needs a latent vector")
        if not self.fused and latent is not None:
            raise InvalidArgumentError("baseline network does not accept a latent vector")
        if latent is not None:
            latent = as_tensor(latent)
            if latent.ndim == 1:
                latent = ops.reshape(latent, (1, -1))
            if latent.shape != (x.shape[0], self.config.latent_dim):
                raise InvalidArgumentError(
                    f"latent shape {latent.shape} != ({x.shape[0]}, {self.config.latent_dim})")
        h = ops.relu(self.stem(x))
        for i, stage in enumerate(self.stages, start=1):
            for block in stage.blocks:
                h = block(h)
            if i == self.config.fusion_stage:
                h = self.fusion(h, latent)
        h = ops.mean_pool_global(h)
        logits = ops.linear(h, self.head.weight, self.head.bias)
        return ops.reshape(logits, (logits.shape[1],)) if single else logits

    __call__ = forward


class _Stage(Module):
    def __init__(self, blocks):
        self.blocks = blocks


class _Head(Module):
    def __init__(self, rng, cin, k):
        self.weight = he_normal(rng, (k, cin), cin, gain=0.05)
        self.bias = zeros((k,))


def build_network(config: NetworkConfig = NetworkConfig(), rng_seed: int = 0) -> ResidualClassifier:
    return ResidualClassifier(config, rng_seed)


def forward(model: ResidualClassifier, x, latent=None) -> Tensor:
    return model.forward(x, latent)


# ---------------------------------------------------------------------------
# training and prediction


def _latents(model: ResidualClassifier, vae, maps: Sequence[WaferMap]) -> Optional[np.ndarray]:
    if not model.fused:
        return None
    if vae is None:
        raise InvalidArgumentError("a fused network needs a VAE to supply latent vectors")
    if vae.latent_dim != model.config.latent_dim:
        raise InvalidArgumentError(
            f"VAE latent_dim {vae.latent_dim} != network latent_dim {model.config.latent_dim}")
    from .vae import latents_for
    return latents_for(vae, maps)


def _labels(maps: Sequence[WaferMap]) -> np.ndarray:
    labels = [m.label for m in maps]
    if any(lab is None for lab in labels):
        raise InvalidArgumentError("training maps must all carry labels")
    return np.array(labels, dtype=np.int64)


def train_supervised(model: ResidualClassifier, vae, labeled: Sequence[WaferMap],
                     config: TrainConfig = TrainConfig()) -> tuple[ResidualClassifier, list[dict]]:
    """Minimize cross-entropy with Adam; trains ``model`` in place.

    The learning rate starts at ``config.lr`` and follows a cosine decay over
    all steps unless the schedule is ``"constant"``. Latents (for fused
    networks) are computed once per map before the first epoch. History rows
    hold the mean loss and accuracy seen during each epoch.
    """
    if not labeled:
        raise InvalidArgumentError("train_supervised: empty labeled set")
    x = to_array(list(labeled))
    y = _labels(labeled)
    lat = _latents(model, vae, labeled)
    opt = Adam(model.parameters(), lr=config.lr)
    rng = np.random.default_rng(config.seed)
    history = []
    steps_per_epoch = -(-len(x) // config.batch_size)
    total = steps_per_epoch * config.epochs
    step = 0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(x))
        loss_sum = 0.0
        correct = 0
        for start in range(0, len(x), config.batch_size):
            idx = order[start:start + config.batch_size]
            opt.state.lr = config.lr_at(step, total)
            step += 1
            logits = model.forward(Tensor(x[idx]), None if lat is None else Tensor(lat[idx]))
            loss = ops.cross_entropy(logits, y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            loss_sum += loss.item() * len(idx)
            correct += int((logits.data.argmax(axis=1) == y[idx]).sum())
        row = {"epoch": epoch, "loss": loss_sum / len(x), "accuracy": correct / len(x)}
        history.append(row)
        log.debug("epoch %d loss %.4f acc %.4f", epoch, row["loss"], row["accuracy"])
    model.trained = True
    model.optimizer_state = opt.state
    return model, history


def predict_logits(model: ResidualClassifier, vae, maps: Sequence[WaferMap],
                   batch_size: int = 256) -> np.ndarray:
    maps = list(maps)
    lat = _latents(model, vae, maps)
    out = []
    for start in range(0, len(maps), batch_size):
        x = to_array(maps[start:start + batch_size])
        z = None if lat is None else Tensor(lat[start:start + batch_size])
        out.append(model.forward(Tensor(x), z).data)
    return np.concatenate(out) if out else np.zeros((0, model.config.num_classes))


def predict_batch(model: ResidualClassifier, vae, maps: Sequence[WaferMap]) -> tuple[np.ndarray, np.ndarray]:
    """Predicted classes and max-softmax confidences for a list of maps."""
    probs = ops.softmax(Tensor(predict_logits(model, vae, maps)), axis=1).data
    return probs.argmax(axis=1), probs.max(axis=1)


def predict(model: ResidualClassifier, vae, wafer: WaferMap) -> tuple[int, float]:
    s = model.config.image_size
    if wafer.shape != (s, s):
        raise InvalidArgumentError(f"map is {wafer.shape}, network expects ({s}, {s})")
    cls, conf = predict_batch(model, vae, [wafer])
    return int(cls[0]), float(conf[0])


def mean_loss(model: ResidualClassifier, vae, labeled: Sequence[WaferMap]) -> float:
    logits = predict_logits(model, vae, labeled)
    return ops.cross_entropy(Tensor(logits), _labels(labeled)).item()


def save_classifier(model: ResidualClassifier, path, extra: Optional[dict] = None) -> None:
    header = {"kind": "classifier", "config": asdict(model.config), "trained": model.trained,
              **(extra or {})}
    save_checkpoint(path, model.state_dict(), header)


def load_classifier(path) -> ResidualClassifier:
    params, header = load_checkpoint(path)
    if header.get("kind") != "classifier":
        raise InvalidArgumentError(f"{path} is not a classifier checkpoint")
    model = ResidualClassifier(NetworkConfig(**header["config"]))
    model.load_state_dict(params)
    model.trained = bool(header.get("trained", True))
    return model
