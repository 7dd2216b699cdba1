"""Geometry-aware complementary block masks and their schedules."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .numerics import DimensionError

GEOMETRIES = ("horizontal", "vertical", "stochastic")
MASK_MODES = {
    "none": (),
    "stochastic_only": ("stochastic",),
    "vertical_only": ("vertical",),
    "horizontal_only": ("horizontal",),
    "all": GEOMETRIES,
}


@dataclass(frozen=True)
class MaskPair:
    """Complementary visibility grids (1 = visible, 0 = masked)."""

    rgb_mask: np.ndarray
    depth_mask: np.ndarray
    geometry: str
    ratio: float
    block: int

    @property
    def masked_fraction(self) -> float:
        return float(1.0 - self.rgb_mask.mean())


def _block_gammas(n: int, rng: np.random.Generator) -> np.ndarray:
    # Stratified draws: each gamma is marginally Uniform(0, 1] but the set covers
    # every 1/n stratum once, so the masked count is floor or ceil of m_t * n.
    u = 1.0 - rng.random()
    return (rng.permutation(n) + u) / n


def sample_mask(h: int, w: int, geometry: str, m_t: float, block: int, rng: np.random.Generator) -> MaskPair:
    """Sample one complementary mask pair; a block is hidden from RGB iff its gamma <= m_t."""
    if geometry not in GEOMETRIES:
        raise ValueError(f"geometry must be one of {GEOMETRIES}, got {geometry!r}")
    if not 0.0 <= m_t <= 1.0:
        raise ValueError(f"mask ratio must lie in [0, 1], got {m_t}")
    if block < 1:
        raise ValueError(f"block must be positive, got {block}")
    need_h = geometry in ("horizontal", "stochastic")
    need_w = geometry in ("vertical", "stochastic")
    if (need_h and h % block) or (need_w and w % block):
        raise ValueError(f"block {block} does not divide the {geometry} mask grid of {h}x{w}")
    if geometry == "horizontal":
        grid = _block_gammas(h // block, rng)[:, None]
        visible = np.repeat(grid > m_t, block, axis=0) * np.ones((1, w), dtype=bool)
    elif geometry == "vertical":
        grid = _block_gammas(w // block, rng)[None, :]
        visible = np.repeat(grid > m_t, block, axis=1) * np.ones((h, 1), dtype=bool)
    else:
        nh, nw = h // block, w // block
        grid = _block_gammas(nh * nw, rng).reshape(nh, nw)
        visible = np.kron(grid > m_t, np.ones((block, block), dtype=bool))
    rgb = visible.astype(np.uint8)
    return MaskPair(rgb_mask=rgb, depth_mask=(1 - rgb).astype(np.uint8), geometry=geometry, ratio=float(m_t),
                    block=block)


def choose_geometry(rng: np.random.Generator, allowed=GEOMETRIES) -> str:
    """Pick one of the allowed geometries uniformly at random."""
    allowed = tuple(allowed)
    if not allowed:
        raise ValueError("no geometries to choose from")
    return allowed[int(rng.integers(len(allowed)))]


def apply_mask(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Replace masked pixels by the per-channel mean of the masked region.

    Works on ``(H, W, ch)`` or ``(N, H, W, ch)`` with a matching ``(H, W)`` /
    ``(N, H, W)`` mask.  Filling with the masked-region mean keeps the image
    mean unchanged and leaves visible pixels bitwise intact.
    """
    image = np.asarray(image)
    mask = np.asarray(mask)
    if mask.shape not in (image.shape[:-1], image.shape[-3:-1]):
        raise DimensionError(f"mask shape {mask.shape} does not match image shape {image.shape}")
    hidden = np.broadcast_to(mask == 0, image.shape[:-1])
    if not hidden.any():
        return image.copy()
    out = image.copy()
    flat_img = image.reshape(-1, image.shape[-3] * image.shape[-2], image.shape[-1])
    flat_hid = hidden.reshape(-1, image.shape[-3] * image.shape[-2])
    out_flat = out.reshape(flat_img.shape)
    for i in range(flat_img.shape[0]):
        sel = flat_hid[i]
        if sel.any():
            out_flat[i, sel] = flat_img[i, sel].mean(axis=0)
    return out


@dataclass(frozen=True)
class MaskSchedule:
    m_start: float = 0.15
    m_end: float = 0.80
    t_total: int = 2000
    warm_frac: float = 0.1
    conf_threshold: float = 0.9
    domain_phase: str = "source"

    def __post_init__(self):
        if not 0.0 <= self.m_start <= self.m_end <= 1.0:
            raise ValueError(f"need 0 <= m_start <= m_end <= 1, got {self.m_start}, {self.m_end}")
        if self.t_total < 1 or not 0.0 <= self.warm_frac < 1.0:
            raise ValueError("t_total must be >= 1 and warm_frac in [0, 1)")
        if self.domain_phase not in ("source", "target"):
            raise ValueError(f"domain_phase must be 'source' or 'target', got {self.domain_phase!r}")


def ratio_at(t: float, sched: MaskSchedule) -> float:
    """Masking ratio: flat at ``m_start`` during warm-up, then linear up to ``m_end``."""
    if not 0 <= t <= sched.t_total:
        raise ValueError(f"iteration {t} outside [0, {sched.t_total}]")
    t0 = sched.warm_frac * sched.t_total
    if t < t0:
        return sched.m_start
    return sched.m_start + (sched.m_end - sched.m_start) * (t - t0) / (sched.t_total - t0)


def update_phase(confidence: float, sched: MaskSchedule) -> MaskSchedule:
    """Latch the switch from source to target masking once confidence reaches the threshold."""
    if sched.domain_phase == "source" and confidence >= sched.conf_threshold:
        return dataclasses.replace(sched, domain_phase="target")
    return sched
