"""Spatial depth-gradient magnitude maps and their channel-wise concatenation."""
from __future__ import annotations

import numpy as np

from .numerics import DimensionError, Tensor, concat, make_node


def _forward_diffs(f: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # forward differences, replicate boundary: last column / row differences are 0
    dx = np.zeros_like(f)
    dy = np.zeros_like(f)
    dx[..., :, :-1, :] = f[..., :, 1:, :] - f[..., :, :-1, :]
    dy[..., :-1, :, :] = f[..., 1:, :, :] - f[..., :-1, :, :]
    return dx, dy


def depth_gradient(f: Tensor) -> Tensor:
    """Per-pixel gradient magnitude of an ``(..., H, W, C)`` feature map, averaged over channels.

    Returns an ``(..., H, W, 1)`` tensor.  At points where both differences
    vanish the magnitude is 0 and its subgradient is taken as 0.
    """
    if f.ndim < 3 or f.shape[-3] < 2 or f.shape[-2] < 2:
        raise ValueError(f"depth_gradient needs H, W >= 2, got shape {f.shape}")
    c = f.shape[-1]
    dx, dy = _forward_diffs(f.data)
    mag = np.sqrt(dx * dx + dy * dy)
    out = mag.mean(axis=-1, keepdims=True)

    def backward(g):
        inv = np.divide(1.0, mag, out=np.zeros_like(mag), where=mag > 0)
        scale = g / c * inv
        gx = scale * dx
        gy = scale * dy
        # adjoint of the forward-difference stencil
        gf = np.zeros_like(f.data)
        gf[..., :, 1:, :] += gx[..., :, :-1, :]
        gf[..., :, :-1, :] -= gx[..., :, :-1, :]
        gf[..., 1:, :, :] += gy[..., :-1, :, :]
        gf[..., :-1, :, :] -= gy[..., :-1, :, :]
        return (gf,)

    return make_node(out, (f,), backward)


def concat_depth_grad(f_depth: Tensor, g: Tensor) -> Tensor:
    """Append the gradient map as channel ``C`` of the depth features."""
    if f_depth.shape[:-1] != g.shape[:-1] or g.shape[-1] != 1:
        raise DimensionError(f"cannot concatenate depth features {f_depth.shape} with gradient map {g.shape}")
    return concat([f_depth, g], axis=-1)
