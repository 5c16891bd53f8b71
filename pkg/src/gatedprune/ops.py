"""Differentiable primitives used by the gated networks.

Every function takes and returns :class:`~gatedprune.tensor.Tensor` values and
records itself on the active tape.  Activations are NCHW, conv weights are
(Cout, Cin, Kh, Kw), dense weights are (D, M).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, TensorError, emit

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def _out_extent(size: int, k: int, stride: int, padding: int, what: str) -> int:
    span = size + 2 * padding - k
    if span < 0:
        raise TensorError(f"{what}: window {k} larger than padded input {size + 2 * padding}")
    if span % stride:
        raise TensorError(
            f"{what}: output extent ({size} + 2*{padding} - {k})/{stride} + 1 is not integral"
        )
    return span // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    if x.ndim != 4 or w.ndim != 4:
        raise TensorError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    n, cin, h, wd = x.shape
    cout, wcin, kh, kw = w.shape
    if cin != wcin:
        raise TensorError(f"conv2d channel mismatch: input {x.shape} vs weight {w.shape}")
    if b is not None and b.shape != (cout,):
        raise TensorError(f"conv2d bias shape {b.shape} does not match weight {w.shape}")
    ho = _out_extent(h, kh, stride, padding, "conv2d")
    wo = _out_extent(wd, kw, stride, padding, "conv2d")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.tensordot(win, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def grad_fn(g):
        gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                contrib = np.tensordot(g, w.data[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += contrib
        gx = gxp[:, :, padding : padding + h, padding : padding + wd] if padding else gxp
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        return (np.ascontiguousarray(gx), gw, gb)

    inputs = (x, w) if b is None else (x, w, b)
    return emit(inputs, out, lambda g: grad_fn(g)[: len(inputs)])


def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise TensorError(f"dense dimension mismatch: input {x.shape} vs weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise TensorError(f"dense bias shape {b.shape} does not match weight {w.shape}")
    out = x.data @ w.data
    if b is not None:
        out = out + b.data

    def grad_fn(g):
        grads = [g @ w.data.T, x.data.T @ g]
        if b is not None:
            grads.append(g.sum(axis=0))
        return grads

    return emit((x, w) if b is None else (x, w, b), out, grad_fn)


def pool2d(x: Tensor, mode: str, window: int, stride: int | None = None) -> Tensor:
    """Max or average pooling without padding.

    Max-pool gradient goes to the first maximum in row-major window order.
    """
    stride = window if stride is None else stride
    if mode not in ("max", "avg"):
        raise TensorError(f"unknown pool mode {mode!r}")
    if x.ndim != 4:
        raise TensorError(f"pool2d expects 4-D input, got {x.shape}")
    n, c, h, wd = x.shape
    if window > h or window > wd:
        raise TensorError(f"pool window {window} larger than input {h}x{wd}")
    ho = _out_extent(h, window, stride, 0, "pool2d")
    wo = _out_extent(wd, window, stride, 0, "pool2d")
    win = sliding_window_view(x.data, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    k = window * window

    if mode == "avg":
        out = win.mean(axis=(4, 5))

        def grad_fn(g):
            gx = np.zeros_like(x.data)
            share = g / k
            for i in range(window):
                for j in range(window):
                    gx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += share
            return (gx,)

        return emit((x,), out, grad_fn)

    flat = win.reshape(n, c, ho, wo, k)
    arg = flat.argmax(axis=4)
    out = np.take_along_axis(flat, arg[..., None], axis=4)[..., 0]

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        for i in range(window):
            for j in range(window):
                hit = arg == i * window + j
                gx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += g * hit
        return (gx,)

    return emit((x,), out, grad_fn)


@dataclass
class RunningStats:
    mean: np.ndarray
    var: np.ndarray
    momentum: float = BN_MOMENTUM

    @classmethod
    def fresh(cls, channels: int, momentum: float = BN_MOMENTUM) -> "RunningStats":
        return cls(np.zeros(channels), np.ones(channels), momentum)


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    stats: RunningStats,
    mode: str = "train",
    eps: float = BN_EPS,
) -> Tensor:
    """Batch normalization over (N,C) or (N,C,H,W) inputs.

    In train mode the running statistics are updated in place with
    ``running = momentum * running + (1 - momentum) * batch``; the running
    variance uses the unbiased batch estimate.
    """
    if x.ndim not in (2, 4):
        raise TensorError(f"batchnorm expects 2-D or 4-D input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,) or stats.mean.shape != (c,):
        raise TensorError(
            f"batchnorm channel mismatch: input {x.shape}, gamma {gamma.shape}, "
            f"beta {beta.shape}, running {stats.mean.shape}"
        )
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, c) if x.ndim == 2 else (1, c, 1, 1)
    count = x.data.size // c

    if mode == "eval":
        inv = 1.0 / np.sqrt(stats.var + eps)
        mult = gamma.data * inv
        out = (x.data - stats.mean.reshape(bshape)) * mult.reshape(bshape) + beta.data.reshape(bshape)
        xhat = (x.data - stats.mean.reshape(bshape)) * inv.reshape(bshape)

        def grad_eval(g):
            return (
                g * mult.reshape(bshape),
                (g * xhat).sum(axis=axes),
                g.sum(axis=axes),
            )

        return emit((x, gamma, beta), out, grad_eval)

    if mode != "train":
        raise TensorError(f"unknown batchnorm mode {mode!r}")
    if count < 2:
        raise TensorError("batchnorm in train mode needs at least 2 values per channel")
    mean = x.data.mean(axis=axes)
    var = x.data.var(axis=axes)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean.reshape(bshape)) * inv.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
    m = stats.momentum
    stats.mean[...] = m * stats.mean + (1 - m) * mean
    stats.var[...] = m * stats.var + (1 - m) * var * count / (count - 1)

    def grad_train(g):
        gxhat = g * gamma.data.reshape(bshape)
        s1 = gxhat.mean(axis=axes, keepdims=True)
        s2 = (gxhat * xhat).mean(axis=axes, keepdims=True)
        gx = (gxhat - s1 - xhat * s2) * inv.reshape(bshape)
        return (gx, (g * xhat).sum(axis=axes), g.sum(axis=axes))

    return emit((x, gamma, beta), out, grad_train)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return emit((x,), np.maximum(x.data, 0.0), lambda g: (g * mask,))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise TensorError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return emit((a, b), a.data + b.data, lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise TensorError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    return emit((a, b), a.data * b.data, lambda g: (g * b.data, g * a.data))


def scale(x: Tensor, factor: float) -> Tensor:
    return emit((x,), x.data * factor, lambda g: (g * factor,))


def channel_scale(x: Tensor, s: Tensor) -> Tensor:
    """Multiply channel c of ``x`` (axis 1) by ``s[c]``."""
    if x.ndim < 2 or s.shape != (x.shape[1],):
        raise TensorError(f"channel_scale: {s.shape} does not match channels of {x.shape}")
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    sb = s.data.reshape(bshape)
    red = tuple(i for i in range(x.ndim) if i != 1)
    return emit((x, s), x.data * sb, lambda g: (g * sb, (g * x.data).sum(axis=red)))


def scalar_scale(x: Tensor, s: Tensor) -> Tensor:
    """Multiply every element of ``x`` by the single entry of ``s``."""
    if s.data.size != 1:
        raise TensorError(f"scalar_scale expects a one-element factor, got {s.shape}")
    v = s.data.reshape(())
    return emit((x, s), x.data * v, lambda g: (g * v, np.full(s.shape, (g * x.data).sum())))


def channel_scatter(x: Tensor, index: list[int] | np.ndarray, width: int) -> Tensor:
    """Place channel i of ``x`` at channel ``index[i]`` of a zero tensor with ``width`` channels."""
    index = np.asarray(index, dtype=np.int64)
    if index.shape != (x.shape[1],):
        raise TensorError(f"channel_scatter: {len(index)} indices for {x.shape[1]} channels")
    out = np.zeros((x.shape[0], width) + x.shape[2:])
    out[:, index] = x.data
    return emit((x,), out, lambda g: (np.ascontiguousarray(g[:, index]),))


def flatten(x: Tensor) -> Tensor:
    shape = x.shape
    return emit((x,), x.data.reshape(shape[0], -1), lambda g: (g.reshape(shape),))


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, mode: str = "train") -> Tensor:
    """Inverted dropout; identity in eval mode or with rate 0."""
    if mode == "eval" or rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return emit((x,), x.data * keep, lambda g: (g * keep,))


def clamp(x: Tensor, lo: float = 0.0, hi: float = 1.0) -> Tensor:
    """Clip to [lo, hi]; gradient passes where lo <= x <= hi."""
    inside = (x.data >= lo) & (x.data <= hi)
    return emit((x,), np.clip(x.data, lo, hi), lambda g: (g * inside,))


def total(x: Tensor) -> Tensor:
    return emit((x,), np.asarray(x.data.sum()), lambda g: (np.full(x.shape, float(g)),))


def abs_sum(x: Tensor) -> Tensor:
    sign = np.sign(x.data)
    return emit((x,), np.asarray(np.abs(x.data).sum()), lambda g: (g * sign,))


def sum_scalars(values: list[Tensor]) -> Tensor:
    if not values:
        return Tensor(0.0)
    for v in values:
        if v.data.size != 1:
            raise TensorError(f"sum_scalars expects scalars, got {v.shape}")
    out = np.asarray(sum(float(v.data) for v in values))
    return emit(tuple(values), out, lambda g: [np.full(v.shape, float(g)) for v in values])


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise TensorError(f"cross entropy: logits {logits.shape} vs labels {labels.shape}")
    n, k = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise TensorError(f"label out of range [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = np.asarray((logsum - z[rows, labels]).mean())

    def grad_fn(g):
        p = np.exp(z - logsum[:, None])
        p[rows, labels] -= 1.0
        return (p * (float(g) / n),)

    return emit((logits,), loss, grad_fn)


def l2_penalty(weights: list[Tensor], coefficient: float) -> Tensor:
    """coefficient * sum of squared entries over ``weights``."""
    if not weights:
        return Tensor(0.0)
    out = np.asarray(coefficient * sum(float(np.sum(w.data * w.data)) for w in weights))
    return emit(tuple(weights), out, lambda g: [2.0 * coefficient * float(g) * w.data for w in weights])

