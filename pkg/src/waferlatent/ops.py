"""Differentiable operations on :class:`~waferlatent.tensor.Tensor`.

Every function validates shapes, computes the forward value with numpy and
registers a backward closure. Image tensors are laid out as (N, C, H, W).
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidArgumentError
from .tensor import Tensor, as_tensor


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, opname: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise InvalidArgumentError(f"{opname}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(x, y) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)
    _broadcast_shape(x, y, "add")

    def bw(g):
        return _unbroadcast(g, x.shape), _unbroadcast(g, y.shape)

    return Tensor._from_op(x.data + y.data, (x, y), bw, "add")


def sub(x, y) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)
    _broadcast_shape(x, y, "sub")

    def bw(g):
        return _unbroadcast(g, x.shape), _unbroadcast(-g, y.shape)

    return Tensor._from_op(x.data - y.data, (x, y), bw, "sub")


def mul(x, y) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)
    _broadcast_shape(x, y, "mul")

    def bw(g):
        return _unbroadcast(g * y.data, x.shape), _unbroadcast(g * x.data, y.shape)

    return Tensor._from_op(x.data * y.data, (x, y), bw, "mul")


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return Tensor._from_op(x.data * c, (x,), lambda g: (g * c,), "scale")


def exp(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):  # overflow is reported as NonFiniteError below
        out = np.exp(x.data)
    return Tensor._from_op(out, (x,), lambda g: (g * out,), "exp")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return Tensor._from_op(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ez = np.exp(x.data[~pos])
    out[~pos] = ez / (1.0 + ez)
    return Tensor._from_op(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


# ---------------------------------------------------------------------------
# reductions and shape manipulation


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor._from_op(np.asarray(out, dtype=np.float64), (x,), bw, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise InvalidArgumentError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None
    return Tensor._from_op(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def concat(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise InvalidArgumentError("concat: empty input list")
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as exc:
        raise InvalidArgumentError(f"concat: {exc}") from None
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._from_op(out, xs, bw, "concat")


def take(x, index: np.ndarray, axis: int) -> Tensor:
    """Gather along ``axis``; indices may repeat (used for nearest upsampling)."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.intp)
    axis = axis % x.ndim
    if index.ndim != 1 or (index.size and (index.min() < 0 or index.max() >= x.shape[axis])):
        raise InvalidArgumentError(f"take: bad index for axis of length {x.shape[axis]}")

    def bw(g):
        onehot = np.zeros((index.size, x.shape[axis]))
        onehot[np.arange(index.size), index] = 1.0
        gx = np.moveaxis(g, axis, -1) @ onehot
        return (np.ascontiguousarray(np.moveaxis(gx, -1, axis)),)

    return Tensor._from_op(np.take(x.data, index, axis=axis), (x,), bw, "take")


def resize_nearest(x, size: tuple[int, int]) -> Tensor:
    """Nearest-neighbour resize of an (N, C, H, W) tensor to ``size``."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise InvalidArgumentError(f"resize_nearest expects 4-D input, got {x.shape}")
    h, w = x.shape[2:]
    rows = (np.arange(size[0]) * h) // size[0]
    cols = (np.arange(size[1]) * w) // size[1]
    return take(take(x, rows, axis=2), cols, axis=3)


# ---------------------------------------------------------------------------
# linear algebra and layers


def matmul(x, y) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[0]:
        raise InvalidArgumentError(f"matmul: incompatible shapes {x.shape} and {y.shape}")

    def bw(g):
        return g @ y.data.T, x.data.T @ g

    return Tensor._from_op(x.data @ y.data, (x, y), bw, "matmul")


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` shaped (out, in)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise InvalidArgumentError(f"linear: input {x.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data.T
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise InvalidArgumentError(f"linear: bias shape {bias.shape} != ({weight.shape[0]},)")
        out = out + bias.data
        parents.append(bias)

    def bw(g):
        grads = [g @ weight.data, g.T @ x.data]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return Tensor._from_op(out, parents, bw, "linear")


def _conv_output_size(size: int, k: int, stride: int, padding: int, what: str) -> int:
    # floor semantics: trailing rows/columns a strided window cannot reach are dropped
    span = size + 2 * padding - k
    if span < 0:
        raise InvalidArgumentError(
            f"conv2d: {what} size {size} with kernel {k} and padding {padding} gives no output")
    return span // stride + 1


def conv2d(x, kernel, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of (N, C, H, W) input with an (F, C, kH, kW) kernel."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise InvalidArgumentError(f"conv2d: expected 4-D operands, got {x.shape} and {kernel.shape}")
    if stride < 1 or padding < 0:
        raise InvalidArgumentError(f"conv2d: stride {stride} / padding {padding} out of range")
    n, c, h, w = x.shape
    f, kc, kh, kw = kernel.shape
    if c != kc:
        raise InvalidArgumentError(f"conv2d: input has {c} channels, kernel expects {kc}")
    ho = _conv_output_size(h, kh, stride, padding, "height")
    wo = _conv_output_size(w, kw, stride, padding, "width")

    # Column buffer laid out (C, kH, kW, N, Ho, Wo): one contiguous block per
    # kernel offset, so both matmuls and the backward scatter stay contiguous.
    xcn = x.data.transpose(1, 0, 2, 3)
    if padding:
        xcn = np.pad(xcn, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((c, kh, kw, n, ho, wo))
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xcn[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    cols = cols.reshape(c * kh * kw, n * ho * wo)
    kmat = kernel.data.reshape(f, c * kh * kw)
    out = (kmat @ cols).reshape(f, n, ho, wo).transpose(1, 0, 2, 3)
    parents = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (f,):
            raise InvalidArgumentError(f"conv2d: bias shape {bias.shape} != ({f},)")
        out = out + bias.data[None, :, None, None]
        parents.append(bias)
    out = np.ascontiguousarray(out)

    def bw(g):
        gmat = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(f, n * ho * wo)
        gk = (gmat @ cols.T).reshape(kernel.shape)
        gx = None
        if x.requires_grad:
            dcols = (kmat.T @ gmat).reshape(c, kh, kw, n, ho, wo)
            gxcn = np.zeros(xcn.shape)
            for i in range(kh):
                for j in range(kw):
                    gxcn[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j]
            if padding:
                gxcn = gxcn[:, :, padding:padding + h, padding:padding + w]
            gx = np.ascontiguousarray(gxcn.transpose(1, 0, 2, 3))
        grads = [gx, gk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return Tensor._from_op(out, parents, bw, "conv2d")


def max_pool2d(x, k: int, stride: int | None = None) -> Tensor:
    x = as_tensor(x)
    stride = k if stride is None else stride
    if x.ndim != 4:
        raise InvalidArgumentError(f"max_pool2d expects 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    ho = _conv_output_size(h, k, stride, 0, "height")
    wo = _conv_output_size(w, k, stride, 0, "width")
    win = sliding_window_view(x.data, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = win.reshape(n, c, ho, wo, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gx = np.zeros(x.shape)
        for p in range(k * k):
            i, j = divmod(p, k)
            gx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += g * (arg == p)
        return (gx,)

    return Tensor._from_op(np.ascontiguousarray(out), (x,), bw, "max_pool2d")


def mean_pool_global(x) -> Tensor:
    """(N, C, H, W) -> (N, C) spatial average."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise InvalidArgumentError(f"mean_pool_global expects 4-D input, got {x.shape}")
    return mean(x, axis=(2, 3))


# ---------------------------------------------------------------------------
# probabilities and losses


def _log_softmax_data(z: np.ndarray, axis: int) -> np.ndarray:
    shifted = z - z.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax(logits, axis: int = -1) -> Tensor:
    logits = as_tensor(logits)
    out = np.exp(_log_softmax_data(logits.data, axis))

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(out, (logits,), bw, "softmax")


def log_softmax(logits, axis: int = -1) -> Tensor:
    logits = as_tensor(logits)
    out = _log_softmax_data(logits.data, axis)
    prob = np.exp(out)

    def bw(g):
        return (g - prob * g.sum(axis=axis, keepdims=True),)

    return Tensor._from_op(out, (logits,), bw, "log_softmax")


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under (N, K) ``logits``.

    A 1-D logits vector with a scalar label is treated as a batch of one.
    """
    logits = as_tensor(logits)
    labels = np.atleast_1d(np.asarray(labels))
    if logits.ndim == 1:
        logits = reshape(logits, (1, -1))
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise InvalidArgumentError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise InvalidArgumentError("cross_entropy: labels must be integers")
    n, k = logits.shape
    if labels.min() < 0 or labels.max() >= k:
        raise InvalidArgumentError(f"cross_entropy: labels outside 0..{k - 1}")
    logp = _log_softmax_data(logits.data, 1)
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def bw(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        return (grad * (g / n),)

    return Tensor._from_op(np.asarray(loss), (logits,), bw, "cross_entropy")


def categorical_nll(logits, target: np.ndarray, axis: int = 1) -> Tensor:
    """Summed cross-entropy between one-hot/probability ``target`` and ``logits`` along ``axis``."""
    logits = as_tensor(logits)
    target = np.asarray(target, dtype=np.float64)
    if target.shape != logits.shape:
        raise InvalidArgumentError(f"categorical_nll: target {target.shape} vs logits {logits.shape}")
    logp = _log_softmax_data(logits.data, axis)
    loss = -(target * logp).sum()
    tsum = target.sum(axis=axis, keepdims=True)

    def bw(g):
        return (g * (np.exp(logp) * tsum - target),)

    return Tensor._from_op(np.asarray(loss), (logits,), bw, "categorical_nll")
