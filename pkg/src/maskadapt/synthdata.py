"""Procedural RGB-D crop-row scenes with exact labels and parametric domain shifts.

Labels: 0 soil/background, 1 crop, 2 weed.  Depth is the camera-to-surface
distance in metres, so plants are closer (smaller depth) than the soil.
"""
from __future__ import annotations

import dataclasses
import json
import math
import os
import zlib
from dataclasses import dataclass

import numpy as np

from . import pnm

CLASS_NAMES = ("background", "crop", "weed")
DEPTH_UNIT = 1e-4  # metres per 16-bit depth count
DATASET_VERSION = 1


class SpecError(ValueError):
    """Invalid DomainSpec; ``fields`` lists every offending field."""

    def __init__(self, problems: list):
        super().__init__("invalid domain spec: " + "; ".join(problems))
        self.fields = [p.split(":")[0] for p in problems]


class DatasetError(ValueError):
    pass


# field -> (low, high) valid range
SPEC_RANGES = {
    "row_orientation_deg": (-90.0, 90.0),
    "row_spacing_px": (8.0, 32.0),
    "plant_radius_mean": (1.5, 8.0),
    "plant_radius_std": (0.0, 2.0),
    "weed_density": (0.0, 20.0),
    "soil_texture_amp": (0.0, 0.3),
    "illumination": (0.3, 1.5),
    "hue_shift_deg": (-180.0, 180.0),
    "depth_noise_sigma": (0.0, 0.05),
    "occlusion_prob": (0.0, 1.0),
    "camera_height": (0.5, 3.0),
    "crop_height": (0.02, 0.4),
    "weed_height_delta": (0.0, 0.1),
}


@dataclass(frozen=True)
class DomainSpec:
    """Scene-generation parameters for one domain (field, camera, season)."""

    name: str = "source"
    row_orientation_deg: float = 0.0
    row_spacing_px: float = 16.0
    plant_radius_mean: float = 3.5
    plant_radius_std: float = 0.5
    weed_density: float = 8.0  # expected weeds per 64x64 scene
    soil_texture_amp: float = 0.06
    illumination: float = 1.0
    hue_shift_deg: float = 0.0
    depth_noise_sigma: float = 0.003
    occlusion_prob: float = 0.3
    camera_height: float = 1.0
    crop_height: float = 0.12
    weed_height_delta: float = 0.03

    def validate(self) -> None:
        problems = []
        for name, (lo, hi) in SPEC_RANGES.items():
            v = getattr(self, name)
            if not isinstance(v, (int, float)) or not math.isfinite(v) or not lo <= v <= hi:
                problems.append(f"{name}: {v!r} not in [{lo}, {hi}]")
        if problems:
            raise SpecError(problems)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DomainSpec":
        unknown = sorted(set(d) - {f.name for f in dataclasses.fields(cls)})
        if unknown:
            raise SpecError([f"{k}: unknown field" for k in unknown])
        return cls(**d)


@dataclass
class SceneSample:
    rgb: np.ndarray  # (H, W, 3) float32 in [0, 1]
    depth: np.ndarray  # (H, W, 1) float32 metres
    labels: np.ndarray  # (H, W) uint8
    domain: str


def benchmark_pair(shift: str = "medium") -> tuple:
    """Source/target DomainSpec pairs of increasing shift ("small", "medium", "large")."""
    src = DomainSpec(name="source")
    targets = {
        "small": dict(illumination=0.9, hue_shift_deg=10.0, soil_texture_amp=0.08, row_orientation_deg=5.0),
        "medium": dict(illumination=0.75, hue_shift_deg=35.0, soil_texture_amp=0.12, row_orientation_deg=5.0,
                       plant_radius_mean=3.75, depth_noise_sigma=0.005, camera_height=1.2),
        "large": dict(illumination=0.6, hue_shift_deg=60.0, soil_texture_amp=0.2, row_orientation_deg=35.0,
                      plant_radius_mean=4.5, depth_noise_sigma=0.008, camera_height=1.5, row_spacing_px=20.0,
                      weed_density=11.0),
    }
    if shift not in targets:
        raise ValueError(f"shift must be one of {sorted(targets)}, got {shift!r}")
    return src, dataclasses.replace(src, name=f"target_{shift}", **targets[shift])


def domain_gap(a: DomainSpec, b: DomainSpec) -> dict:
    """Per-axis absolute differences normalised by each axis' valid range."""
    return {k: abs(getattr(a, k) - getattr(b, k)) / (hi - lo) for k, (lo, hi) in SPEC_RANGES.items()}


# -- rendering -----------------------------------------------------------

_SOIL = np.array([0.46, 0.34, 0.22])
# crops and weeds share one base colour; they differ in shape and height only
_PLANT = np.array([0.26, 0.53, 0.18])


def _hue_matrix(deg: float) -> np.ndarray:
    # rotation about the grey axis
    th = math.radians(deg)
    c, s = math.cos(th), math.sin(th)
    k = 1.0 / 3.0
    sq = math.sqrt(k)
    return np.array([
        [c + (1 - c) * k, k * (1 - c) - sq * s, k * (1 - c) + sq * s],
        [k * (1 - c) + sq * s, c + k * (1 - c), k * (1 - c) - sq * s],
        [k * (1 - c) - sq * s, k * (1 - c) + sq * s, c + k * (1 - c)],
    ])


def _smooth_field(rng, h, w, cells=4):
    grid = rng.normal(size=(cells + 1, cells + 1))
    ys = np.linspace(0, cells, h)
    xs = np.linspace(0, cells, w)
    y0 = np.minimum(ys.astype(int), cells - 1)
    x0 = np.minimum(xs.astype(int), cells - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    g00 = grid[y0][:, x0]
    g01 = grid[y0][:, x0 + 1]
    g10 = grid[y0 + 1][:, x0]
    g11 = grid[y0 + 1][:, x0 + 1]
    return (1 - fy) * ((1 - fx) * g00 + fx * g01) + fy * ((1 - fx) * g10 + fx * g11)


def _render(spec: DomainSpec, rng: np.random.Generator, size: int) -> SceneSample:
    h = w = size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    th = math.radians(spec.row_orientation_deg)
    # rows run along (cos th, sin th); s is the coordinate across rows, u along them
    s_coord = -xx * math.sin(th) + yy * math.cos(th)
    u_coord = xx * math.cos(th) + yy * math.sin(th)

    soil_depth = (spec.camera_height + 0.004 * _smooth_field(rng, h, w, 2)
                  + rng.uniform(-0.003, 0.003) * (xx / w - 0.5))
    best = soil_depth.copy()
    labels = np.zeros((h, w), dtype=np.uint8)
    shade = np.ones((h, w))
    tint = np.zeros((h, w, 3))

    def stamp(inside, rho, height, cls, color):
        nonlocal best
        d = soil_depth - height * (0.75 + 0.25 * (1.0 - rho ** 2))
        take = inside & (d < best)
        best = np.where(take, d, best)
        labels[take] = cls
        shade[take] = (0.8 + 0.3 * (1.0 - rho ** 2))[take]
        tint[take] = color

    spacing = spec.row_spacing_px
    offset = rng.uniform(0, spacing)
    s_min, s_max = s_coord.min(), s_coord.max()
    u_min, u_max = u_coord.min(), u_coord.max()
    crops = []
    k0 = math.floor((s_min - offset) / spacing) - 1
    k1 = math.ceil((s_max - offset) / spacing) + 1
    pitch = 0.9 * spacing
    for k in range(k0, k1 + 1):
        s_row = offset + k * spacing
        phase = rng.uniform(0, pitch)
        n_along = int((u_max - u_min) / pitch) + 3
        for j in range(-1, n_along):
            u_c = u_min + phase + j * pitch + rng.uniform(-1.0, 1.0)
            s_c = s_row + rng.uniform(-0.8, 0.8)
            r = float(np.clip(rng.normal(spec.plant_radius_mean, spec.plant_radius_std), 1.5, 10.0))
            crops.append((u_c, s_c, r))

    # weeds below crops in height; drawn first so the taller layer wins by depth
    n_weeds = rng.poisson(spec.weed_density)
    weed_h = spec.crop_height - 0.5 * spec.weed_height_delta
    for _ in range(n_weeds):
        if crops and rng.random() < spec.occlusion_prob:
            cu, cs, cr = crops[int(rng.integers(len(crops)))]
            ang = rng.uniform(0, 2 * math.pi)
            dist = cr + rng.uniform(0.0, 2.0)
            cx = cu * math.cos(th) - cs * math.sin(th) + dist * math.cos(ang)
            cy = cu * math.sin(th) + cs * math.cos(th) + dist * math.sin(ang)
        else:
            cx, cy = rng.uniform(0, w), rng.uniform(0, h)
        a = spec.plant_radius_mean * rng.uniform(1.2, 1.7)
        b = a * rng.uniform(0.3, 0.45)
        phi = rng.uniform(0, math.pi)
        du, dv = xx - cx, yy - cy
        pu = du * math.cos(phi) + dv * math.sin(phi)
        pv = -du * math.sin(phi) + dv * math.cos(phi)
        rho = np.sqrt((pu / a) ** 2 + (pv / b) ** 2)
        color = _PLANT + rng.normal(0, 0.03, size=3)
        stamp(rho <= 1.0, np.minimum(rho, 1.0), weed_h, 2, color)

    for u_c, s_c, r in crops:
        cx = u_c * math.cos(th) - s_c * math.sin(th)
        cy = u_c * math.sin(th) + s_c * math.cos(th)
        if cx < -r or cx > w + r or cy < -r or cy > h + r:
            continue
        du, dv = xx - cx, yy - cy
        ang = np.arctan2(dv, du)
        lobes = r * (1.0 + 0.18 * np.cos(5 * ang + rng.uniform(0, 2 * math.pi)))
        rho = np.sqrt(du ** 2 + dv ** 2) / lobes
        color = _PLANT + rng.normal(0, 0.03, size=3)
        stamp(rho <= 1.0, np.minimum(rho, 1.0), spec.crop_height, 1, color)

    texture = 1.0 + spec.soil_texture_amp * (_smooth_field(rng, h, w, 8) + 0.5 * rng.normal(size=(h, w)))
    rgb = _SOIL[None, None, :] * texture[..., None]
    plant = labels > 0
    rgb[plant] = tint[plant] * shade[plant][:, None]
    rgb = rgb @ _hue_matrix(spec.hue_shift_deg).T
    rgb = rgb * spec.illumination + rng.normal(0, 0.01, size=rgb.shape)
    depth = best + rng.normal(0, spec.depth_noise_sigma, size=(h, w)) if spec.depth_noise_sigma else best
    return SceneSample(
        rgb=np.clip(rgb, 0.0, 1.0).astype(np.float32),
        depth=np.clip(depth, 0.0, 65535 * DEPTH_UNIT)[..., None].astype(np.float32),
        labels=labels,
        domain=spec.name,
    )


def sample_seed(seed: int, index: int, name: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), int(index), zlib.crc32(name.encode())])


def generate(spec: DomainSpec, n: int, seed: int, size: int = 64) -> list:
    """``n`` scenes; sample ``i`` depends only on ``(spec, seed, i)``."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    spec.validate()
    return [_render(spec, np.random.default_rng(sample_seed(seed, i, spec.name)), size) for i in range(n)]


def stack(samples: list) -> tuple:
    """Batch arrays ``(rgb (N,H,W,3), depth (N,H,W,1), labels (N,H,W))``."""
    return (np.stack([s.rgb for s in samples]), np.stack([s.depth for s in samples]),
            np.stack([s.labels for s in samples]))


# -- on-disk layout --------------------------------------------------------

def write_dataset(path: str, samples: list, spec: DomainSpec | None = None) -> None:
    """Write ``manifest.json`` plus ``NNNNN_rgb.ppm`` / ``_depth.pgm`` / ``_labels.pgm`` per sample."""
    os.makedirs(path, exist_ok=True)
    entries = []
    for i, s in enumerate(samples):
        stem = f"{i:05d}"
        files = {"rgb": f"{stem}_rgb.ppm", "depth": f"{stem}_depth.pgm", "labels": f"{stem}_labels.pgm"}
        rgb8 = np.clip(np.rint(s.rgb * 255.0), 0, 255).astype(np.uint8)
        d16 = np.clip(np.rint(s.depth[..., 0] / DEPTH_UNIT), 0, 65535).astype(np.uint16)
        for key, (arr, maxval) in {"rgb": (rgb8, 255), "depth": (d16, 65535),
                                   "labels": (s.labels.astype(np.uint8), 255)}.items():
            with open(os.path.join(path, files[key]), "wb") as fh:
                fh.write(pnm.encode(arr, maxval))
        entries.append({"index": i, "domain": s.domain, **files})
    manifest = {
        "version": DATASET_VERSION,
        "count": len(samples),
        "height": int(samples[0].labels.shape[0]) if samples else 0,
        "width": int(samples[0].labels.shape[1]) if samples else 0,
        "classes": list(CLASS_NAMES),
        "depth_unit_m": DEPTH_UNIT,
        "spec": spec.to_dict() if spec else None,
        "samples": entries,
    }
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1)


def _read_file(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    try:
        return pnm.decode(buf)
    except pnm.PNMError as exc:
        raise DatasetError(f"{path}: {exc}") from exc


def read_dataset(path: str) -> list:
    """Load every sample listed in the manifest; raises on any malformed file."""
    mpath = os.path.join(path, "manifest.json")
    try:
        with open(mpath) as fh:
            manifest = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{mpath}: malformed manifest at byte offset {exc.pos}") from exc
    if manifest.get("version") != DATASET_VERSION:
        raise DatasetError(f"{mpath}: unsupported dataset version {manifest.get('version')!r}")
    unit = float(manifest["depth_unit_m"])
    h, w = manifest["height"], manifest["width"]
    out = []
    for e in manifest["samples"]:
        rgb = _read_file(os.path.join(path, e["rgb"]))
        depth = _read_file(os.path.join(path, e["depth"]))
        labels = _read_file(os.path.join(path, e["labels"]))
        if rgb.shape != (h, w, 3) or depth.shape != (h, w) or labels.shape != (h, w):
            raise DatasetError(f"{path}: sample {e['index']} does not match manifest size {h}x{w}")
        if depth.dtype != np.uint16:
            raise DatasetError(f"{os.path.join(path, e['depth'])}: depth must be 16-bit")
        out.append(SceneSample(
            rgb=(rgb.astype(np.float32) / 255.0),
            depth=(depth.astype(np.float32) * np.float32(unit))[..., None],
            labels=labels.astype(np.uint8),
            domain=e["domain"],
        ))
    if len(out) != manifest["count"]:
        raise DatasetError(f"{mpath}: manifest count {manifest['count']} != {len(out)} listed samples")
    return out
