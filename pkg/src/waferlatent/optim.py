"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import InvalidArgumentError
from .tensor import Tensor


@dataclass
class AdamState:
    lr: float = 0.002
    beta1: float = 0.9
    beta2: float = 0.99
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr < 0:
            raise InvalidArgumentError(f"learning rate must be non-negative, got {self.lr}")
        for name in ("beta1", "beta2"):
            b = getattr(self, name)
            if not 0.0 < b < 1.0:
                raise InvalidArgumentError(f"{name} must lie in (0, 1), got {b}")
        if self.epsilon <= 0:
            raise InvalidArgumentError("epsilon must be positive")


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: AdamState) -> None:
    """Apply one Adam update to ``params`` in place and advance ``state``.

    ``params`` and ``grads`` map the same names to equally shaped arrays.
    """
    if params.keys() != grads.keys():
        raise InvalidArgumentError("adam_step: parameter and gradient names differ")
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise InvalidArgumentError(f"adam_step: gradient for {name} has shape {g.shape}, "
                                       f"parameter has {p.shape}")
        m = state.first_moment.get(name)
        if m is not None and m.shape != p.shape:
            raise InvalidArgumentError(f"adam_step: moment buffer for {name} has shape {m.shape}")

    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name]
        m = state.first_moment.setdefault(name, np.zeros_like(p))
        v = state.second_moment.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + state.epsilon)
        p -= state.lr * update


class Adam:
    """Optimizer bound to a named set of tensors; reads their ``.grad`` buffers."""

    def __init__(self, params: Mapping[str, Tensor], lr: float = 0.002, beta1: float = 0.9,
                 beta2: float = 0.99, epsilon: float = 1e-8):
        self.params = dict(params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, epsilon=epsilon)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        grads = {}
        for name, p in self.params.items():
            grads[name] = p.grad if p.grad is not None else np.zeros_like(p.data)
        adam_step({k: p.data for k, p in self.params.items()}, grads, self.state)
