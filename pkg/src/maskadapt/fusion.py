"""Depth-gradient-guided cross-attention fusion of RGB and depth pyramids.

Per level: depth features with their gradient magnitude channel give queries
and keys, RGB features give values; both are pooled by bilinear resampling
before projection, and the attended values are upsampled and added back to the
RGB features through a 1x1 convolution.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .depth_features import concat_depth_grad, depth_gradient
from .encoders import NUM_LEVELS, FeaturePyramid
from .numerics import Tensor


class FusionConfigError(ValueError):
    pass


@dataclass
class AttentionWeights:
    wq: Tensor  # (C+1, d_k)
    wk: Tensor  # (C+1, d_k)
    wv: Tensor  # (C, d_v)
    wr: Tensor  # (d_v, C) residual 1x1 conv
    br: Tensor  # (C,)

    @property
    def d_k(self) -> int:
        return self.wq.shape[1]

    def tensors(self) -> dict:
        return {"wq": self.wq, "wk": self.wk, "wv": self.wv, "wr": self.wr, "br": self.br}


def init_attention(rng: np.random.Generator, channels: int, d_k: int | None = None,
                   dtype=np.float32) -> AttentionWeights:
    """Random Q/K/V projections; the residual conv starts at zero so fusion begins as identity."""
    d_k = channels if d_k is None else d_k
    if d_k <= 0:
        raise FusionConfigError(f"d_k must be positive, got {d_k}")
    c = channels

    def lin(fan_in, fan_out):
        return Tensor(rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_in, fan_out)), dtype=dtype,
                      requires_grad=True)

    return AttentionWeights(
        wq=lin(c + 1, d_k),
        wk=lin(c + 1, d_k),
        wv=lin(c, d_k),
        wr=Tensor(np.zeros((d_k, c)), dtype=dtype, requires_grad=True),
        br=Tensor(np.zeros(c), dtype=dtype, requires_grad=True),
    )


def init_fusion(seed: int, channels: int, d_k: int | None = None, dtype=np.float32) -> list:
    rng = np.random.default_rng(seed)
    return [init_attention(rng, channels, d_k, dtype) for _ in range(NUM_LEVELS)]


@dataclass(frozen=True)
class PoolingConfig:
    train_factors: tuple = (8, 4, 2, 1)
    infer_factors: tuple = (4, 2, 1, 1)

    def __post_init__(self):
        for name in ("train_factors", "infer_factors"):
            f = getattr(self, name)
            if len(f) != NUM_LEVELS or any(int(p) < 1 for p in f):
                raise FusionConfigError(f"{name} needs {NUM_LEVELS} positive integers, got {f}")
        bad = [i + 1 for i, (t, s) in enumerate(zip(self.train_factors, self.infer_factors)) if s > t]
        if bad:
            raise FusionConfigError(f"inference pooling exceeds training pooling at levels {bad}")

    def factors(self, mode: str) -> tuple:
        if mode == "train":
            return self.train_factors
        if mode == "infer":
            return self.infer_factors
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")

    def check(self, height: int, width: int) -> None:
        for mode in ("train", "infer"):
            for i, p in enumerate(self.factors(mode)):
                hi, wi = height >> i, width >> i
                if hi % p or wi % p:
                    raise FusionConfigError(f"{mode} pooling factor {p} does not divide level {i + 1} size {hi}x{wi}")


def attention_map(f_dg_pooled: Tensor, w: AttentionWeights) -> Tensor:
    """Row-stochastic ``(..., n, n)`` attention over the flattened pooled positions."""
    lead = f_dg_pooled.shape[:-3]
    n = f_dg_pooled.shape[-3] * f_dg_pooled.shape[-2]
    seq = nx.reshape(f_dg_pooled, lead + (n, f_dg_pooled.shape[-1]))
    q = nx.matmul(seq, w.wq)
    k = nx.matmul(seq, w.wk)
    kt = nx.transpose(k, tuple(range(len(lead))) + (len(lead) + 1, len(lead)))
    return nx.softmax_rows(nx.mul(nx.matmul(q, kt), 1.0 / math.sqrt(w.d_k)))


def fuse_level(f_rgb: Tensor, f_dg: Tensor, w: AttentionWeights, p: int) -> Tensor:
    """Refine one RGB level: ``F_rgb + conv1x1(up(softmax(Q K^T / sqrt(d_k)) V))``."""
    h, wd, c = f_rgb.shape[-3:]
    if f_dg.shape[:-1] != f_rgb.shape[:-1] or f_dg.shape[-1] != c + 1:
        raise nx.DimensionError(f"depth+grad features {f_dg.shape} do not pair with RGB features {f_rgb.shape}")
    if w.d_k <= 0:
        raise FusionConfigError("d_k must be positive")
    if p < 1 or h % p or wd % p:
        raise ValueError(f"pooling factor {p} must divide level size {h}x{wd}")
    hp, wp = h // p, wd // p
    lead = f_rgb.shape[:-3]
    dg_pooled = nx.bilinear_resize(f_dg, hp, wp)
    rgb_pooled = nx.bilinear_resize(f_rgb, hp, wp)
    attn = attention_map(dg_pooled, w)
    v = nx.matmul(nx.reshape(rgb_pooled, lead + (hp * wp, c)), w.wv)
    glob = nx.reshape(nx.matmul(attn, v), lead + (hp, wp, v.shape[-1]))
    up = nx.bilinear_resize(glob, h, wd)
    return nx.add(f_rgb, nx.conv1x1(up, w.wr, w.br))


def depth_guidance(f_depth: Tensor, use_gradients: bool = True) -> Tensor:
    """Depth features with their gradient channel appended (zeros when gradients are disabled)."""
    if use_gradients:
        g = depth_gradient(f_depth)
    else:
        g = Tensor(np.zeros(f_depth.shape[:-1] + (1,), dtype=f_depth.dtype))
    return concat_depth_grad(f_depth, g)


def fuse_pyramid(rgb: FeaturePyramid, depth: FeaturePyramid, weights: list, cfg: PoolingConfig,
                 mode: str = "train", use_gradients: bool = True) -> FeaturePyramid:
    if rgb.shapes != depth.shapes:
        raise nx.DimensionError(f"RGB pyramid {rgb.shapes} and depth pyramid {depth.shapes} differ")
    factors = cfg.factors(mode)
    out = [
        fuse_level(rgb[i], depth_guidance(depth[i], use_gradients), weights[i], factors[i])
        for i in range(NUM_LEVELS)
    ]
    return FeaturePyramid(out)


@dataclass(frozen=True)
class AttentionCost:
    quadratic: int
    linear: int

    @property
    def total(self) -> int:
        return self.quadratic + self.linear


def attention_complexity(h: int, w: int, c: int, p: int, d_k: int | None = None) -> AttentionCost:
    """Multiply count of :func:`fuse_level` on an ``h x w x c`` level pooled by ``p``.

    The quadratic term covers ``Q K^T`` and the attention-weighted sum of values;
    the linear term covers the Q/K/V projections and the residual 1x1 conv.
    """
    if min(h, w, c, p) < 1:
        raise ValueError("dimensions must be positive")
    d = c if d_k is None else d_k
    n = (h * w) // (p * p)
    quadratic = 2 * n * n * d
    linear = n * (2 * (c + 1) * d + c * d) + h * w * d * c
    return AttentionCost(quadratic, linear)
