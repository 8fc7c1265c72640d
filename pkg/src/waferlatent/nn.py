"""Parameter containers, initializers and the checkpoint format."""

from __future__ import annotations

import copy
import json
from collections import OrderedDict
from pathlib import Path
from typing import Any, Iterator

import numpy as np

from .errors import InvalidArgumentError
from .tensor import Tensor

CHECKPOINT_FORMAT = "waferlatent-params/1"


class Module:
    """Base class that discovers parameters through attributes.

    Parameter paths are dotted attribute names; lists of modules contribute
    their index (``stages.0.blocks.1.conv1.weight``).
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            path = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")

    def parameters(self) -> "OrderedDict[str, Tensor]":
        return OrderedDict(self.named_parameters())

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters().values()))

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, p.data.copy()) for k, p in self.parameters().items())

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise InvalidArgumentError(
                f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise InvalidArgumentError(f"{k}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()
            p.grad = None

    def clone(self):
        out = copy.deepcopy(self)
        for p in out.parameters().values():
            p.grad = None
        return out


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, gain: float = 1.0) -> Tensor:
    return parameter(rng.standard_normal(shape) * gain * np.sqrt(2.0 / fan_in))


def zeros(shape: tuple[int, ...]) -> Tensor:
    return parameter(np.zeros(shape))


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: dict[str, np.ndarray], header: dict[str, Any] | None = None) -> None:
    """Write named arrays as JSON; floats use shortest round-trip repr, so reads are bit-exact."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "header": header or {},
        "params": {
            name: {"shape": list(arr.shape), "data": [float(v) for v in np.asarray(arr).reshape(-1)]}
            for name, arr in params.items()
        },
    }
    Path(path).write_text(json.dumps(doc, separators=(",", ":")) + "\n")


def load_checkpoint(path) -> tuple["OrderedDict[str, np.ndarray]", dict[str, Any]]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise InvalidArgumentError(f"{path}: not a {CHECKPOINT_FORMAT} checkpoint")
    params = OrderedDict()
    for name, entry in doc["params"].items():
        shape = tuple(entry["shape"])
        data = np.array(entry["data"], dtype=np.float64)
        if data.size != int(np.prod(shape)):
            raise InvalidArgumentError(f"{path}: {name} has {data.size} values for shape {shape}")
        params[name] = data.reshape(shape)
    return params, doc.get("header", {})
