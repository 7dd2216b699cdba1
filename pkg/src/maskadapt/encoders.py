"""Hierarchical convolutional encoders (4-level pyramids) and a light decoder."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .checkpoint import load_arrays, save_arrays
from .numerics import Tensor

NUM_LEVELS = 4


@dataclass(frozen=True)
class EncoderConfig:
    channels: int = 16
    in_channels: int = 3


@dataclass
class EncoderParams:
    modality: str
    config: EncoderConfig
    weights: dict = field(default_factory=dict)
    trainable: bool = True

    def freeze(self) -> None:
        self.trainable = False
        for t in self.weights.values():
            t.requires_grad = False
            t.grad = None

    def unfreeze(self) -> None:
        self.trainable = True
        for t in self.weights.values():
            t.requires_grad = True


@dataclass
class FeaturePyramid:
    """Four feature maps; level ``i`` is ``H / 2**i`` by ``W / 2**i`` (0-based) with ``C`` channels."""

    levels: list

    def __post_init__(self):
        if len(self.levels) != NUM_LEVELS:
            raise ValueError(f"a pyramid has {NUM_LEVELS} levels, got {len(self.levels)}")
        h, w, c = self.levels[0].shape[-3:]
        for i, lvl in enumerate(self.levels):
            expect = (h >> i, w >> i, c)
            if tuple(lvl.shape[-3:]) != expect:
                raise ValueError(f"level {i + 1} has shape {lvl.shape[-3:]}, expected {expect}")

    @property
    def shapes(self) -> list:
        return [tuple(lvl.shape[-3:]) for lvl in self.levels]

    def __getitem__(self, i):
        return self.levels[i]

    def __len__(self):
        return len(self.levels)


def _he(rng, shape, fan_in, dtype):
    return Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape), dtype=dtype, requires_grad=True)


def init_params(seed: int, config: EncoderConfig, modality: str = "rgb", dtype=np.float32) -> EncoderParams:
    """Fan-in (He) scaled normal conv weights, zero biases; reproducible per seed."""
    if modality not in ("rgb", "depth"):
        raise ValueError(f"modality must be 'rgb' or 'depth', got {modality!r}")
    rng = np.random.default_rng(seed)
    c = config.channels
    weights = {}
    cin = config.in_channels
    for s in range(NUM_LEVELS):
        for j in range(2):
            fan_in = 9 * cin
            weights[f"s{s}.c{j}.w"] = _he(rng, (3, 3, cin, c), fan_in, dtype)
            weights[f"s{s}.c{j}.b"] = Tensor(np.zeros(c), dtype=dtype, requires_grad=True)
            cin = c
    return EncoderParams(modality=modality, config=config, weights=weights)


def encode(image: Tensor, params: EncoderParams) -> FeaturePyramid:
    """Run the four conv stages; stage 1 keeps full resolution, the rest halve it."""
    x = image if image.ndim == 4 else nx.reshape(image, (1,) + image.shape)
    h, w, ch = x.shape[1:]
    if h % 8 or w % 8:
        raise ValueError(f"image height and width must be divisible by 8, got {h}x{w}")
    if ch != params.config.in_channels:
        raise ValueError(f"{params.modality} encoder expects {params.config.in_channels} input channels, got {ch}")
    wt = params.weights
    levels = []
    for s in range(NUM_LEVELS):
        x = nx.relu(nx.conv3x3(x, wt[f"s{s}.c0.w"], wt[f"s{s}.c0.b"], stride=1 if s == 0 else 2))
        x = nx.relu(nx.conv3x3(x, wt[f"s{s}.c1.w"], wt[f"s{s}.c1.b"]))
        levels.append(x)
    if image.ndim == 3:
        levels = [nx.reshape(lvl, lvl.shape[1:]) for lvl in levels]
    return FeaturePyramid(levels)


@dataclass
class DecoderParams:
    num_classes: int
    weights: dict = field(default_factory=dict)


def init_decoder(seed: int, channels: int, num_classes: int, hidden: int = 32, dtype=np.float32) -> DecoderParams:
    if num_classes < 2:
        raise ValueError(f"need at least 2 classes, got {num_classes}")
    rng = np.random.default_rng(seed)
    cin = NUM_LEVELS * channels
    weights = {
        "mix.w": _he(rng, (cin, hidden), cin, dtype),
        "mix.b": Tensor(np.zeros(hidden), dtype=dtype, requires_grad=True),
        "cls.w": Tensor(rng.normal(0.0, np.sqrt(1.0 / hidden), size=(hidden, num_classes)), dtype=dtype,
                        requires_grad=True),
        "cls.b": Tensor(np.zeros(num_classes), dtype=dtype, requires_grad=True),
    }
    return DecoderParams(num_classes=num_classes, weights=weights)


def decode(refined: FeaturePyramid, params: DecoderParams) -> Tensor:
    """Upsample every level to full resolution, concatenate, and map to class logits."""
    h, w = refined[0].shape[-3:-1]
    ups = [nx.bilinear_resize(lvl, h, w) for lvl in refined.levels]
    x = nx.relu(nx.conv1x1(nx.concat(ups, axis=-1), params.weights["mix.w"], params.weights["mix.b"]))
    return nx.conv1x1(x, params.weights["cls.w"], params.weights["cls.b"])


def save_encoder(path: str, params: EncoderParams) -> None:
    save_arrays(path, {k: t.data for k, t in params.weights.items()},
                meta={"modality": params.modality, "channels": params.config.channels,
                      "in_channels": params.config.in_channels, "trainable": params.trainable})


def load_encoder(path: str) -> EncoderParams:
    arrays, meta = load_arrays(path)
    config = EncoderConfig(channels=meta["channels"], in_channels=meta["in_channels"])
    expected = {k: t.shape for k, t in init_params(0, config, meta["modality"]).weights.items()}
    arrays, _ = load_arrays(path, expected)
    weights = {k: Tensor(arrays[k], requires_grad=meta["trainable"]) for k in expected}
    return EncoderParams(meta["modality"], config, weights, trainable=meta["trainable"])
