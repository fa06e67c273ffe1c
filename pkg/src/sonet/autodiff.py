"""Minimal reverse-mode differentiation over dense numpy arrays.

Operations record themselves on the innermost active :class:`Tape`; without
an active tape they run as plain forward computations.

    >>> W = Tensor(np.eye(2), requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum_all(dense(Tensor(np.ones((1, 2))), W, Tensor(np.zeros(2))))
    >>> tape.backward(loss)
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeMismatchError
from .grouping import Groups, _as_groups, group_reduce_max

DEBUG = False

_local = threading.local()


class Tensor:
    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        if self.data.dtype.kind != "f":
            self.data = self.data.astype(np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self.node_id = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, dtype={self.dtype})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, scalar):
        return scale(self, scalar)

    __rmul__ = __mul__

    def __getitem__(self, idx):
        return getitem(self, idx)


class Tape:
    """Ordered record of operations; backward replays it in exact reverse."""

    def __init__(self):
        self.records = []

    def __enter__(self):
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()

    def backward(self, loss: Tensor, grad=None):
        loss.grad = np.ones_like(loss.data) if grad is None else np.asarray(grad, dtype=loss.dtype)
        for out, inputs, fn in reversed(self.records):
            if out.grad is None:
                continue
            grads = fn(out.grad)
            for t, g in zip(inputs, grads):
                if g is None or not t.requires_grad:
                    continue
                t.grad = g if t.grad is None else t.grad + g
        return loss


def current_tape() -> Tape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data, inputs, backward) -> Tensor:
    if DEBUG and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value produced in forward pass")
    out = Tensor(data)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node_id = len(tape.records)
        tape.records.append((out, inputs, backward))
    return out


# --- elementwise and structural ------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _t(a), _t(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(a.data + b.data, (a, b), backward)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def scale(x, c: float) -> Tensor:
    x = _t(x)
    return _record(x.data * c, (x,), lambda g: (g * c,))


def sum_all(x) -> Tensor:
    x = _t(x)
    return _record(x.data.sum(), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean_all(x) -> Tensor:
    x = _t(x)
    n = x.data.size
    return _record(x.data.mean(), (x,), lambda g: (np.full(x.shape, g / n, dtype=x.dtype),))


def reshape(x, shape) -> Tensor:
    x = _t(x)
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes) -> Tensor:
    x = _t(x)
    inv = np.argsort(axes)
    return _record(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def getitem(x, idx) -> Tensor:
    x = _t(x)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _record(x.data[idx], (x,), backward)


def gather_rows(x, index) -> Tensor:
    """Rows ``x[index]`` along axis 0; gradients are scattered back with summation."""
    x = _t(x)
    index = np.asarray(index)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return _record(x.data[index], (x,), backward)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [_t(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


# --- layers ----------------------------------------------------------------------


def dense(x, W, b) -> Tensor:
    """``x @ W + b`` for x of shape B x F_in."""
    x, W, b = _t(x), _t(W), _t(b)
    if x.data.ndim != 2 or W.data.ndim != 2 or x.shape[1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ShapeMismatchError(f"dense: x{x.shape} W{W.shape} b{b.shape}")

    def backward(g):
        return g @ W.data.T, x.data.T @ g, g.sum(axis=0)

    return _record(x.data @ W.data + b.data, (x, W, b), backward)


def relu(x) -> Tensor:
    x = _t(x)
    mask = x.data > 0
    return _record(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def create(cls, features: int, dtype=np.float64) -> "BatchNormState":
        return cls(np.zeros(features, dtype), np.ones(features, dtype))


def _bn_axes(x):
    if x.ndim == 2:
        return (0,), (1, -1)
    if x.ndim == 4:
        return (0, 2, 3), (1, -1, 1, 1)
    raise ShapeMismatchError(f"batchnorm expects B x F or B x C x H x W, got {x.shape}")


def batchnorm(x, gamma, beta, state: BatchNormState, train: bool) -> Tensor:
    """Batch normalization over all axes but the channel axis (1).

    Train mode uses batch statistics and updates the running estimates;
    eval mode is a fixed affine map of the stored state.
    """
    x, gamma, beta = _t(x), _t(gamma), _t(beta)
    axes, bshape = _bn_axes(x.data)
    g_b, b_b = gamma.data.reshape(bshape), beta.data.reshape(bshape)
    if not train:
        inv = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (x.data - state.running_mean.reshape(bshape)) * inv.reshape(bshape)

        def backward_eval(g):
            return g * g_b * inv.reshape(bshape), (g * xhat).sum(axis=axes), g.sum(axis=axes)

        return _record((xhat * g_b + b_b).astype(x.dtype), (x, gamma, beta), backward_eval)

    n = x.data.size // x.shape[1]
    if x.shape[0] < 2:
        raise ValueError("batchnorm in train mode needs a batch of at least 2")
    mu = x.data.mean(axis=axes)
    var = x.data.var(axis=axes)
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = (x.data - mu.reshape(bshape)) * inv.reshape(bshape)
    m = state.momentum
    state.running_mean = ((1 - m) * state.running_mean + m * mu).astype(state.running_mean.dtype)
    unbiased = var * n / max(n - 1, 1)
    state.running_var = ((1 - m) * state.running_var + m * unbiased).astype(state.running_var.dtype)

    def backward(g):
        dxhat = g * g_b
        s1 = dxhat.sum(axis=axes).reshape(bshape)
        s2 = (dxhat * xhat).sum(axis=axes).reshape(bshape)
        gx = inv.reshape(bshape) / n * (n * dxhat - s1 - xhat * s2)
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _record((xhat * g_b + b_b).astype(x.dtype), (x, gamma, beta), backward)


def conv2d(x, K, b) -> Tensor:
    """Stride-1 cross-correlation with zero padding that preserves H x W (odd kernels)."""
    x, K, b = _t(x), _t(K), _t(b)
    if x.data.ndim != 4 or K.data.ndim != 4 or K.shape[1] != x.shape[1] or b.shape != (K.shape[0],):
        raise ShapeMismatchError(f"conv2d: x{x.shape} K{K.shape} b{b.shape}")
    kh, kw = K.shape[2:]
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeMismatchError("conv2d needs odd kernel sizes")
    B, C, H, W = x.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))  # B C H W kh kw
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * H * W, C * kh * kw)
    Kf = K.data.reshape(K.shape[0], -1)
    y = (cols @ Kf.T + b.data).reshape(B, H, W, -1).transpose(0, 3, 1, 2)

    def backward(g):
        gf = g.transpose(0, 2, 3, 1).reshape(B * H * W, -1)
        gK = (gf.T @ cols).reshape(K.shape)
        gcols = (gf @ Kf).reshape(B, H, W, C, kh, kw)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + H, j : j + W] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return gxp[:, :, ph : ph + H, pw : pw + W], gK, gf.sum(axis=0)

    return _record(np.ascontiguousarray(y), (x, K, b), backward)


def conv2d_3x3(x, K, b) -> Tensor:
    if _t(K).shape[2:] != (3, 3):
        raise ShapeMismatchError("expected a 3x3 kernel")
    return conv2d(x, K, b)


def conv2d_1x1(x, K, b) -> Tensor:
    if _t(K).shape[2:] != (1, 1):
        raise ShapeMismatchError("expected a 1x1 kernel")
    return conv2d(x, K, b)


def upsample_nn_2x(x) -> Tensor:
    x = _t(x)
    B, C, H, W = x.shape
    y = x.data.repeat(2, axis=2).repeat(2, axis=3)
    return _record(y, (x,), lambda g: (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),))


# --- grouped reductions ------------------------------------------------------------


def group_max(x, groups, fill=None) -> Tensor:
    """Channel-wise max over row groups; empty groups produce ``fill`` (zeros)."""
    x = _t(x)
    out, arg = group_reduce_max(x.data, groups, fill)

    def backward(g):
        gx = np.zeros_like(x.data)
        hit = arg >= 0
        chan = np.broadcast_to(np.arange(x.shape[1]), arg.shape)
        np.add.at(gx, (arg[hit], chan[hit]), g[hit])
        return (gx,)

    return _record(out, (x,), backward)


def group_mean(x, groups) -> Tensor:
    """Average of member rows per group; empty groups give zeros."""
    x = _t(x)
    groups = _as_groups(groups)
    sizes = groups.sizes
    out = np.zeros((len(groups), x.shape[1]), dtype=x.dtype)
    nonempty = sizes > 0
    if nonempty.any():
        sums = np.add.reduceat(x.data[groups.index], groups.offsets[:-1][nonempty], axis=0)
        out[nonempty] = sums / sizes[nonempty, None]
    seg = np.repeat(np.arange(len(groups)), sizes)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, groups.index, g[seg] / sizes[seg, None])
        return (gx,)

    return _record(out, (x,), backward)


# --- regularization and losses ------------------------------------------------------


def dropout(x, keep: float, rng, train: bool = True) -> Tensor:
    """Inverted dropout: keep each unit with probability ``keep`` and rescale by 1/keep."""
    if not 0 < keep <= 1:
        raise ValueError("keep ratio must lie in (0, 1]")
    x = _t(x)
    if not train or keep == 1:
        return x
    mask = (rng.random(x.shape) < keep).astype(x.dtype) / keep
    return _record(x.data * mask, (x,), lambda g: (g * mask,))


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    logits = _t(logits)
    labels = np.asarray(labels, dtype=np.int64)
    B, K = logits.shape
    if labels.shape != (B,):
        raise ShapeMismatchError("one label per row is required")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= K:
        raise ValueError(f"label out of range [0, {K})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(B), labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[np.arange(B), labels] -= 1.0
        return (p * (g / B),)

    return _record(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# --- checking -------------------------------------------------------------------------


def gradcheck(f, params, eps: float = 1e-5) -> float:
    """Max elementwise |analytic - numeric| / max(1, |analytic|, |numeric|).

    ``f`` builds a scalar from ``params`` each call; it must be deterministic.
    Numeric gradients use central differences.
    """
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f().data)
            flat[i] = orig - eps
            lo = float(f().data)
            flat[i] = orig
            num = (hi - lo) / (2 * eps)
            a = float(analytic.reshape(-1)[i])
            worst = max(worst, abs(a - num) / max(1.0, abs(a), abs(num)))
    return worst
