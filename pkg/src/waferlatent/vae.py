"""Convolutional VAE over one-hot wafer maps.

The encoder halves the spatial size three times (3x3 kernels on odd sizes,
4x4 on even ones, so any square input works) and ends in two linear heads for
the posterior mean and log-variance. The decoder mirrors it with
nearest-neighbour upsampling followed by 3x3 convolutions and emits per-die
logits over the three die states. A per-die output bias, initialized from the
training maps' die-state frequencies, carries the structure every wafer
shares (the disk outline); without it the encoder learns that shared
structure as a common latent offset, which the KL term removes only slowly.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np

from . import ops
from .data import WaferMap, to_array
from .errors import InvalidArgumentError
from .nn import Module, he_normal, load_checkpoint, save_checkpoint, zeros
from .optim import Adam
from .tensor import Tensor, as_tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class VaeConfig:
    image_size: int = 27
    latent_dim: int = 16
    channels: tuple[int, ...] = (16, 32, 32)

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.latent_dim < 1 or not self.channels or min(self.channels) < 1:
            raise InvalidArgumentError(f"invalid VAE config {self}")
        if self.image_size < 3:
            raise InvalidArgumentError("image_size must be at least 3")


@dataclass(frozen=True)
class VaeTrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 0.002
    kl_weight: float = 1.0
    seed: int = 0


class LatentCode(NamedTuple):
    mean: Tensor
    logvar: Tensor
    sample: Tensor
    epsilon: np.ndarray


class _Conv(Module):
    def __init__(self, rng, cin, cout, k, gain=1.0):
        self.weight = he_normal(rng, (cout, cin, k, k), cin * k * k, gain)
        self.bias = zeros((cout,))


class _Dense(Module):
    def __init__(self, rng, din, dout, gain=1.0):
        self.weight = he_normal(rng, (dout, din), din, gain)
        self.bias = zeros((dout,))


def _halve(size: int) -> tuple[int, int]:
    """Kernel size and output size of a stride-2, padding-1 downsampling conv."""
    k = 3 if size % 2 else 4
    return k, (size + 2 - k) // 2 + 1


class VaeModel(Module):
    def __init__(self, config: VaeConfig = VaeConfig(), rng_seed: int = 0):
        self.config = config
        rng = np.random.default_rng(rng_seed)
        sizes = [config.image_size]
        kernels = []
        for _ in config.channels:
            k, s = _halve(sizes[-1])
            kernels.append(k)
            sizes.append(s)
        self._sizes = sizes
        self._kernels = kernels
        cins = (3,) + config.channels[:-1]
        self.enc = [_Conv(rng, ci, co, k) for ci, co, k in zip(cins, config.channels, kernels)]
        flat = config.channels[-1] * sizes[-1] ** 2
        self.mean_head = _Dense(rng, flat, config.latent_dim, gain=0.1)
        self.logvar_head = _Dense(rng, flat, config.latent_dim, gain=0.1)
        self.dec_in = _Dense(rng, config.latent_dim, flat)
        couts = tuple(reversed(cins))
        self.dec = [_Conv(rng, ci, co, 3, gain=1.0 if co != 3 else 0.5)
                    for ci, co in zip(reversed(config.channels), couts)]
        s = config.image_size
        self.out_bias = zeros((3, s, s))

    @property
    def latent_dim(self) -> int:
        return self.config.latent_dim

    def _check_input(self, x: Tensor) -> Tensor:
        s = self.config.image_size
        if x.ndim == 3:
            x = ops.reshape(x, (1,) + x.shape)
        if x.ndim != 4 or x.shape[1:] != (3, s, s):
            raise InvalidArgumentError(f"VAE expects input (3, {s}, {s}), got {x.shape}")
        return x

    def encoder_forward(self, x) -> tuple[Tensor, Tensor]:
        h = self._check_input(as_tensor(x))
        for layer, k in zip(self.enc, self._kernels):
            h = ops.relu(ops.conv2d(h, layer.weight, layer.bias, stride=2, padding=1))
        h = ops.reshape(h, (h.shape[0], -1))
        mean = ops.linear(h, self.mean_head.weight, self.mean_head.bias)
        logvar = ops.linear(h, self.logvar_head.weight, self.logvar_head.bias)
        return mean, logvar

    def decoder_forward(self, z) -> Tensor:
        z = as_tensor(z)
        if z.ndim == 1:
            z = ops.reshape(z, (1, -1))
        if z.ndim != 2 or z.shape[1] != self.latent_dim:
            raise InvalidArgumentError(f"decoder expects latent length {self.latent_dim}, got {z.shape}")
        s = self._sizes[-1]
        h = ops.linear(z, self.dec_in.weight, self.dec_in.bias)
        h = ops.reshape(h, (z.shape[0], self.config.channels[-1], s, s))
        targets = list(reversed(self._sizes[:-1]))
        for i, (layer, size) in enumerate(zip(self.dec, targets)):
            h = ops.resize_nearest(h, (size, size))
            h = ops.conv2d(h, layer.weight, layer.bias, stride=1, padding=1)
            if i < len(self.dec) - 1:
                h = ops.relu(h)
        return ops.add(h, self.out_bias)

    def init_output_bias(self, x: np.ndarray) -> None:
        """Set the per-die output bias to log die-state frequencies of one-hot maps ``x``."""
        freq = x.mean(axis=0) * 0.98 + 0.01
        self.out_bias.data = np.log(freq)


def reparameterize(mean, logvar, epsilon) -> Tensor:
    """``mean + exp(logvar / 2) * epsilon``, differentiable in mean and logvar."""
    mean, logvar = as_tensor(mean), as_tensor(logvar)
    eps = np.asarray(epsilon.data if isinstance(epsilon, Tensor) else epsilon, dtype=np.float64)
    if mean.shape != logvar.shape or mean.shape != eps.shape:
        raise InvalidArgumentError(
            f"reparameterize: shapes {mean.shape}, {logvar.shape}, {eps.shape} differ")
    return ops.add(mean, ops.mul(ops.exp(ops.scale(logvar, 0.5)), Tensor(eps)))


def encode(model: VaeModel, x, epsilon: Optional[np.ndarray] = None, rng_seed: int = 0) -> LatentCode:
    """Posterior parameters plus one reparameterized draw.

    A single (3, H, W) image gives 1-D vectors; a batch gives (N, D).
    """
    x = as_tensor(x)
    single = x.ndim == 3
    mean, logvar = model.encoder_forward(x)
    if epsilon is None:
        epsilon = np.random.default_rng(rng_seed).standard_normal(mean.shape)
    epsilon = np.asarray(epsilon, dtype=np.float64).reshape(mean.shape)
    sample = reparameterize(mean, logvar, epsilon)
    if single:
        d = model.latent_dim
        return LatentCode(ops.reshape(mean, (d,)), ops.reshape(logvar, (d,)),
                          ops.reshape(sample, (d,)), epsilon.reshape(d))
    return LatentCode(mean, logvar, sample, epsilon)


def decode(model: VaeModel, z) -> Tensor:
    z = as_tensor(z)
    out = model.decoder_forward(z)
    return ops.reshape(out, out.shape[1:]) if z.ndim == 1 else out


def kl_divergence(mean, logvar) -> Tensor:
    """Summed KL(N(mean, exp(logvar)) || N(0, I)) over every entry."""
    mean, logvar = as_tensor(mean), as_tensor(logvar)
    if mean.shape != logvar.shape:
        raise InvalidArgumentError(f"kl_divergence: {mean.shape} vs {logvar.shape}")
    inner = ops.sub(ops.add(ops.mul(mean, mean), ops.exp(logvar)), ops.add(logvar, 1.0))
    return ops.scale(ops.sum(inner), 0.5)


def elbo_terms(x, logits, mean, logvar, kl_weight: float = 1.0) -> tuple[Tensor, Tensor, Tensor]:
    """(loss, reconstruction, kl), each averaged over the batch."""
    target = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    logits = as_tensor(logits)
    mean, logvar = as_tensor(mean), as_tensor(logvar)
    if target.shape != logits.shape:
        raise InvalidArgumentError(f"elbo_loss: image {target.shape} vs logits {logits.shape}")
    if mean.shape != logvar.shape:
        raise InvalidArgumentError(f"elbo_loss: mean {mean.shape} vs logvar {logvar.shape}")
    n = target.shape[0] if target.ndim == 4 else 1
    axis = 1 if target.ndim == 4 else 0
    recon = ops.scale(ops.categorical_nll(logits, target, axis=axis), 1.0 / n)
    kl = ops.scale(kl_divergence(mean, logvar), 1.0 / n)
    return ops.add(recon, ops.scale(kl, kl_weight)), recon, kl


def elbo_loss(x, logits, mean, logvar, kl_weight: float = 1.0) -> Tensor:
    return elbo_terms(x, logits, mean, logvar, kl_weight)[0]


def pretrain_vae(maps: Sequence[WaferMap], config: VaeTrainConfig = VaeTrainConfig(),
                 model_config: Optional[VaeConfig] = None) -> tuple[VaeModel, list[dict]]:
    """Fit a VAE on every available map, labeled or not.

    Returns the model and one history row per epoch with the mean total,
    reconstruction and KL loss per map.
    """
    if not maps:
        raise InvalidArgumentError("pretrain_vae: empty dataset")
    size = maps[0].shape[0]
    model_config = model_config or VaeConfig(image_size=size)
    if model_config.image_size != size:
        raise InvalidArgumentError(f"maps are {size}x{size}, config expects {model_config.image_size}")
    model = VaeModel(model_config, rng_seed=config.seed)
    data = to_array(list(maps))
    model.init_output_bias(data)
    rng = np.random.default_rng(config.seed + 1)
    opt = Adam(model.parameters(), lr=config.lr)
    history = []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(data))
        tot = rec = kld = 0.0
        for start in range(0, len(data), config.batch_size):
            batch = data[order[start:start + config.batch_size]]
            mean, logvar = model.encoder_forward(Tensor(batch))
            z = reparameterize(mean, logvar, rng.standard_normal(mean.shape))
            logits = model.decoder_forward(z)
            loss, recon, kl = elbo_terms(batch, logits, mean, logvar, config.kl_weight)
            opt.zero_grad()
            loss.backward()
            opt.step()
            nb = len(batch)
            tot += loss.item() * nb
            rec += recon.item() * nb
            kld += kl.item() * nb
        row = {"epoch": epoch, "loss": tot / len(data), "recon": rec / len(data), "kl": kld / len(data)}
        history.append(row)
        log.info("vae epoch %d loss %.4f recon %.4f kl %.4f", epoch, row["loss"], row["recon"], row["kl"])
    return model, history


def extract_latent(model: VaeModel, x) -> np.ndarray:
    """Posterior mean for one image (D,) or a batch (N, D)."""
    mean, _ = model.encoder_forward(as_tensor(x))
    return mean.data[0].copy() if as_tensor(x).ndim == 3 else mean.data.copy()


def latents_for(model: VaeModel, maps: Sequence[WaferMap], batch_size: int = 256) -> np.ndarray:
    out = [extract_latent(model, to_array(list(maps[i:i + batch_size])))
           for i in range(0, len(maps), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, model.latent_dim))


def reconstruction_accuracy(model: VaeModel, maps: Sequence[WaferMap]) -> float:
    """Fraction of dies whose argmax decoded state matches, decoding the posterior mean."""
    hits = total = 0
    for i in range(0, len(maps), 256):
        chunk = list(maps[i:i + 256])
        x = to_array(chunk)
        logits = model.decoder_forward(extract_latent(model, x)).data
        hits += int((logits.argmax(axis=1) == np.stack([m.grid for m in chunk])).sum())
        total += x.shape[0] * x.shape[2] * x.shape[3]
    return hits / total


def save_vae(model: VaeModel, path) -> None:
    header = {"kind": "vae", "latent_dim": model.latent_dim, "config": asdict(model.config)}
    save_checkpoint(path, model.state_dict(), header)


def load_vae(path) -> VaeModel:
    params, header = load_checkpoint(path)
    if header.get("kind") != "vae":
        raise InvalidArgumentError(f"{path} is not a VAE checkpoint")
    model = VaeModel(VaeConfig(**header["config"]))
    model.load_state_dict(params)
    return model
