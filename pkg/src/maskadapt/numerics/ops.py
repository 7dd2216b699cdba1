"""Differentiable primitives on :class:`Tensor`.

Image-like tensors are channels-last with an optional leading batch axis:
``(H, W, C)`` or ``(N, H, W, C)``.
"""
from __future__ import annotations

import contextlib
import functools
from typing import Iterator, Optional

import numpy as np

from .tensor import DimensionError, Tensor, as_tensor, make_node

IGNORE_INDEX = 255

# multiply counter used by complexity instrumentation
_mult_counter: Optional[list] = None


@contextlib.contextmanager
def count_multiplies() -> Iterator[list]:
    """Count scalar multiplies performed by matmul-like forward ops in the block.

    Yields a one-element list whose entry holds the running total.
    """
    global _mult_counter
    prev = _mult_counter
    _mult_counter = [0]
    try:
        yield _mult_counter
    finally:
        _mult_counter = prev


def _count(n: int) -> None:
    if _mult_counter is not None:
        _mult_counter[0] += int(n)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _pair(a, b):
    a = as_tensor(a)
    b = as_tensor(b, dtype=a.dtype)
    return a, b


# -- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_node(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_node(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_node(a.data * b.data, (a, b), backward)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    return make_node(out, (x,), lambda g: (np.where(out > 0, g, 0).astype(g.dtype, copy=False),))


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return make_node(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward)


def mean(x: Tensor) -> Tensor:
    return mul(sum(x), 1.0 / x.data.size)


# -- shape ops -------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    return make_node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return make_node(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def getitem(x: Tensor, idx) -> Tensor:
    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return make_node(x.data[idx], (x,), backward)


def concat(tensors, axis: int = -1) -> Tensor:
    """Concatenate along ``axis`` (channel axis by default)."""
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise DimensionError(f"cannot concatenate shapes {ref} and {t.shape} along axis {axis}")
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=ax))

    return make_node(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward)


# -- linear algebra --------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, batched over any leading axes."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = np.matmul(a.data, b.data)
    _count(out.size * a.shape[-1])

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return make_node(out, (a, b), backward)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax along the last axis, stabilised by subtracting the row max."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return make_node(s, (x,), backward)


# -- spatial ops -----------------------------------------------------------

def resize_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """(n_out, n_in) linear-interpolation weights, half-pixel centres (align_corners=False)."""
    return _resize_matrix(int(n_in), int(n_out)).astype(dtype)


@functools.lru_cache(maxsize=None)
def _resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for j in range(n_out):
        src = max((j + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        m[j, i0] += 1.0 - lam
        m[j, i1] += lam
    m.setflags(write=False)
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resampling of an ``(..., H, W, C)`` tensor; separable, so exact adjoint."""
    if int(out_h) < 1 or int(out_w) < 1:
        raise ValueError(f"target size must be positive, got {out_h}x{out_w}")
    if x.ndim < 3:
        raise DimensionError(f"bilinear_resize expects (..., H, W, C), got {x.shape}")
    h, w = x.shape[-3], x.shape[-2]
    if (h, w) == (out_h, out_w):
        return x
    ry = resize_matrix(h, out_h, x.dtype)
    rx = resize_matrix(w, out_w, x.dtype)
    lead = x.shape[:-3]
    c = x.shape[-1]
    b = int(np.prod(lead, dtype=np.int64))

    def apply(a, my, mx, hi, wi, ho, wo):
        # rows: (b, ho, hi) @ (b, hi, wi*c); columns: (b*ho, wo, wi) @ (b*ho, wi, c)
        t = np.matmul(my, a.reshape(b, hi, wi * c))
        t = np.matmul(mx, t.reshape(b * ho, wi, c))
        return t.reshape(lead + (ho, wo, c))

    out = apply(x.data, ry, rx, h, w, out_h, out_w)

    def backward(g):
        return (apply(g, ry.T, rx.T, out_h, out_w, h, w),)

    return make_node(out, (x,), backward)


def conv1x1(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Per-pixel affine map: ``x[..., cin] @ w[cin, cout] + b[cout]``."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise DimensionError(f"conv1x1 channel mismatch: input {x.shape}, weight {w.shape}")
    if b.shape != (w.shape[1],):
        raise DimensionError(f"conv1x1 bias shape {b.shape} does not match weight {w.shape}")
    return add(matmul(x, w), b)


def _im2col(xp: np.ndarray, ho: int, wo: int, stride: int) -> np.ndarray:
    cols = [
        xp[:, dy:dy + stride * (ho - 1) + 1:stride, dx:dx + stride * (wo - 1) + 1:stride, :]
        for dy in range(3)
        for dx in range(3)
    ]
    return np.concatenate(cols, axis=-1)


def conv3x3(x: Tensor, w: Tensor, b: Tensor, stride: int = 1) -> Tensor:
    """3x3 convolution with zero padding 1 on ``(N, H, W, Cin)`` input.

    ``w`` has shape ``(3, 3, Cin, Cout)``.
    """
    if x.ndim != 4:
        raise DimensionError(f"conv3x3 expects (N, H, W, C), got {x.shape}")
    if w.shape[:3] != (3, 3, x.shape[-1]):
        raise DimensionError(f"conv3x3 weight {w.shape} does not fit input channels {x.shape[-1]}")
    n, h, wd, cin = x.shape
    cout = w.shape[3]
    ho = (h - 1) // stride + 1
    wo = (wd - 1) // stride + 1
    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = _im2col(xp, ho, wo, stride)
    wm = w.data.reshape(9 * cin, cout)
    out = cols @ wm + b.data
    _count(n * ho * wo * 9 * cin * cout)

    def backward(g):
        gw = gb = gx = None
        if w.requires_grad:
            gw = (cols.reshape(-1, 9 * cin).T @ g.reshape(-1, cout)).reshape(w.shape)
        if b.requires_grad:
            gb = g.sum(axis=(0, 1, 2))
        if x.requires_grad:
            gcols = g @ wm.T
            gxp = np.zeros_like(xp)
            k = 0
            for dy in range(3):
                for dx in range(3):
                    gxp[:, dy:dy + stride * (ho - 1) + 1:stride, dx:dx + stride * (wo - 1) + 1:stride, :] += \
                        gcols[..., k * cin:(k + 1) * cin]
                    k += 1
            gx = gxp[:, 1:-1, 1:-1, :]
        return gx, gw, gb

    return make_node(out, (x, w, b), backward)


# -- losses ----------------------------------------------------------------

def cross_entropy(logits: Tensor, labels, ignore_index: int = IGNORE_INDEX, weights=None) -> Tensor:
    """Softmax cross-entropy over the last axis of ``logits``.

    Returns ``sum(w * nll) / n_valid`` over pixels whose label is not
    ``ignore_index``; ``w`` defaults to 1, giving the plain mean.  When every
    pixel is ignored the loss is 0 with zero gradient.
    """
    labels = np.asarray(labels)
    k = logits.shape[-1]
    if labels.shape != logits.shape[:-1]:
        raise DimensionError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    valid = labels != ignore_index
    bad = valid & ((labels < 0) | (labels >= k))
    if bad.any():
        raise ValueError(f"labels must lie in [0, {k}) or equal ignore_index={ignore_index}; "
                         f"found {np.unique(labels[bad]).tolist()}")
    n_valid = int(valid.sum())
    if n_valid == 0:
        return make_node(np.zeros((), dtype=logits.dtype), (logits,), lambda g: (np.zeros_like(logits.data),))
    w = valid.astype(logits.dtype)
    if weights is not None:
        w = w * np.asarray(weights, dtype=logits.dtype)
    w = w / n_valid
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    safe = np.where(valid, labels, 0).astype(np.intp)
    nll = -np.take_along_axis(logp, safe[..., None], axis=-1)[..., 0]
    loss = np.asarray((w * nll).sum(), dtype=logits.dtype)

    def backward(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, safe[..., None], 1.0, axis=-1)
        return ((p - onehot) * (w * g)[..., None],)

    return make_node(loss, (logits,), backward)
