"""Central finite-difference oracle shared by the gradient tests."""

from __future__ import annotations

from typing import Callable

import numpy as np

from waferlatent.tensor import Tensor, backward

H = 1e-5
TOLERANCE = 1e-4


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    num = np.linalg.norm(analytic - numeric)
    den = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-10)
    return float(num / den)


def numeric_gradient(f: Callable[[], float], arr: np.ndarray, h: float = H,
                     max_entries: int | None = None, rng=None) -> tuple[np.ndarray, np.ndarray]:
    """Central differences of ``f`` w.r.t. ``arr`` (mutated in place, restored).

    Returns (flat indices probed, derivative at those indices).
    """
    flat = arr.reshape(-1)
    idx = np.arange(flat.size)
    if max_entries is not None and flat.size > max_entries:
        idx = np.sort((rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False))
    out = np.empty(idx.size)
    for j, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        out[j] = (up - down) / (2 * h)
    return idx, out


def check_gradients(build_loss: Callable[[], Tensor], params: dict[str, Tensor],
                    max_entries: int | None = None, seed: int = 0) -> dict[str, float]:
    """Relative error per parameter between backward() and central differences."""
    for p in params.values():
        p.grad = None
    loss = build_loss()
    backward(loss)
    analytic = {k: np.zeros_like(p.data) if p.grad is None else p.grad.copy() for k, p in params.items()}
    rng = np.random.default_rng(seed)
    errors = {}
    for name, p in params.items():
        idx, numeric = numeric_gradient(lambda: build_loss().item(), p.data, max_entries=max_entries, rng=rng)
        errors[name] = relative_error(analytic[name].reshape(-1)[idx], numeric)
    return errors


def leaf(arr) -> Tensor:
    return Tensor(np.array(arr, dtype=np.float64), requires_grad=True)
