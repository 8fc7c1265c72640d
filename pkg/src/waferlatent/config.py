"""Experiment configuration files (JSON) with strict key checking."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Optional, Union

from .classifier import NetworkConfig, TrainConfig
from .data import NUM_CLASSES, WM811K_SKEW
from .errors import InvalidArgumentError
from .semisup import PipelineConfig
from .vae import VaeConfig, VaeTrainConfig


@dataclass(frozen=True)
class DataSection:
    path: Optional[str] = None  # JSONL file; synthetic data when absent
    total: int = 6300
    image_size: int = 27
    noise_rate: float = 0.03
    class_weights: Union[str, tuple[float, ...]] = "uniform"
    seed: int = 100
    split: tuple[float, float, float] = (900 / 6300, 4500 / 6300, 900 / 6300)
    balance_target: Optional[int] = 100

    def weights(self) -> tuple[float, ...]:
        if self.class_weights == "uniform":
            return (1.0,) * NUM_CLASSES
        if self.class_weights == "wm811k":
            return WM811K_SKEW
        if isinstance(self.class_weights, str) or len(self.class_weights) != NUM_CLASSES:
            raise InvalidArgumentError(
                "data.class_weights must be 'uniform', 'wm811k' or a list of 9 numbers")
        return tuple(float(w) for w in self.class_weights)


@dataclass(frozen=True)
class VaeSection:
    latent_dim: int = 16
    channels: tuple[int, ...] = (16, 32, 32)
    epochs: int = 8
    batch_size: int = 32
    lr: float = 0.002


@dataclass(frozen=True)
class NetworkSection:
    stem_kernel: int = 7
    stem_stride: int = 2
    stem_channels: int = 8
    block_counts: tuple[int, ...] = (1, 1, 2, 1)
    widths: tuple[int, ...] = (8, 16, 32, 64)
    expansion: int = 2
    fusion_point: str = "after_stage2"
    teacher_fusion_point: str = "none"


@dataclass(frozen=True)
class TrainSection:
    epochs: int = 25
    batch_size: int = 32
    lr: float = 0.002
    schedule: str = "cosine"


@dataclass(frozen=True)
class SemisupSection:
    confidence_threshold: float = 0.9
    top_k: int = 50
    fine_tune_epochs: int = 5
    fine_tune_lr_factor: float = 0.1


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataSection = DataSection()
    vae: VaeSection = VaeSection()
    network: NetworkSection = NetworkSection()
    train: TrainSection = TrainSection()
    semisup: SemisupSection = SemisupSection()
    seeds: tuple[int, ...] = (1, 2, 3)
    output_dir: str = "runs/default"

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def pipeline(self, seed: int, fusion_point: Optional[str] = None) -> PipelineConfig:
        net = self.network
        base = dict(image_size=self.data.image_size, stem_kernel=net.stem_kernel,
                    stem_stride=net.stem_stride, stem_channels=net.stem_channels,
                    block_counts=net.block_counts, widths=net.widths, expansion=net.expansion,
                    latent_dim=self.vae.latent_dim)
        return PipelineConfig(
            confidence_threshold=self.semisup.confidence_threshold,
            top_k=self.semisup.top_k,
            teacher=NetworkConfig(**base, fusion_point=net.teacher_fusion_point),
            student=NetworkConfig(**base, fusion_point=fusion_point or net.fusion_point),
            train=TrainConfig(epochs=self.train.epochs, batch_size=self.train.batch_size,
                              lr=self.train.lr, schedule=self.train.schedule, seed=seed),
            fine_tune_epochs=self.semisup.fine_tune_epochs,
            fine_tune_lr_factor=self.semisup.fine_tune_lr_factor,
            vae_model=VaeConfig(image_size=self.data.image_size, latent_dim=self.vae.latent_dim,
                                channels=self.vae.channels),
            vae_train=VaeTrainConfig(epochs=self.vae.epochs, batch_size=self.vae.batch_size,
                                     lr=self.vae.lr, seed=seed),
            seed=seed,
        )


_SECTIONS = {"data": DataSection, "vae": VaeSection, "network": NetworkSection,
             "train": TrainSection, "semisup": SemisupSection}


def _tuplify(value):
    return tuple(_tuplify(v) for v in value) if isinstance(value, list) else value


def _section(cls, raw: Any, name: str):
    if not isinstance(raw, dict):
        raise InvalidArgumentError(f"config section '{name}' must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise InvalidArgumentError(f"unknown key(s) in '{name}': {', '.join(unknown)}")
    return cls(**{k: _tuplify(v) for k, v in raw.items()})


def config_from_dict(raw: dict[str, Any]) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise InvalidArgumentError("config must be a JSON object")
    top = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(raw) - top)
    if unknown:
        raise InvalidArgumentError(f"unknown top-level key(s): {', '.join(unknown)}")
    kwargs: dict[str, Any] = {}
    for name, cls in _SECTIONS.items():
        if name in raw:
            kwargs[name] = _section(cls, raw[name], name)
    if "seeds" in raw:
        seeds = raw["seeds"]
        if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
            raise InvalidArgumentError("seeds must be a non-empty list of integers")
        kwargs["seeds"] = tuple(seeds)
    if "output_dir" in raw:
        kwargs["output_dir"] = str(raw["output_dir"])
    cfg = ExperimentConfig(**kwargs)
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    """Build every derived config once so range errors surface at load time."""
    cfg.data.weights()
    if cfg.data.path is None and cfg.data.total < 1:
        raise InvalidArgumentError("data.total must be positive")
    if len(cfg.data.split) != 3:
        raise InvalidArgumentError("data.split needs three fractions")
    cfg.pipeline(cfg.seeds[0])


def load_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise InvalidArgumentError(f"{path}: invalid JSON ({exc})") from None
    return config_from_dict(raw)
