"""Declarative run configuration (strict JSON with a ``version`` field)."""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from typing import Any, Optional

from .masking import MASK_MODES
from .synthdata import DomainSpec, SpecError

CONFIG_VERSION = 1
SCHEDULING = ("source_only", "target_only", "scheduled")


class ConfigError(ValueError):
    """Every violation found in a config, reported at once."""

    def __init__(self, problems: list):
        super().__init__("invalid config: " + "; ".join(problems))
        self.problems = problems


def _f(default, lo=None, hi=None, help="", choices=None):
    return field(default=default, metadata={"lo": lo, "hi": hi, "help": help, "choices": choices})


@dataclass(frozen=True)
class RunConfig:
    version: int = _f(CONFIG_VERSION, CONFIG_VERSION, CONFIG_VERSION, "config schema version")
    seed: int = _f(0, 0, 2**64 - 1, "root seed for init, masks, augmentation and batch sampling")
    # data
    benchmark: str = _f("medium", help="built-in source/target pair when no spec/paths are given",
                        choices=("small", "medium", "large"))
    source_spec: Optional[dict] = _f(None, help="inline DomainSpec overriding the benchmark source")
    target_spec: Optional[dict] = _f(None, help="inline DomainSpec overriding the benchmark target")
    source_path: Optional[str] = _f(None, help="dataset directory for labelled source training data")
    target_path: Optional[str] = _f(None, help="dataset directory for unlabelled target training data")
    val_path: Optional[str] = _f(None, help="dataset directory for labelled target validation data")
    data_seed: int = _f(0, 0, 2**64 - 1, "seed for generated datasets")
    n_source: int = _f(200, 1, 100_000, "generated source training scenes")
    n_target: int = _f(200, 1, 100_000, "generated target training scenes")
    n_val: int = _f(100, 1, 100_000, "generated target validation scenes")
    image_size: int = _f(64, 16, 512, "generated scene side length (multiple of 8)")
    # model
    channels: int = _f(16, 2, 256, "feature channels C at every pyramid level")
    d_k: Optional[int] = _f(None, 1, 256, "attention key/value width (default C)")
    hidden: int = _f(32, 2, 512, "decoder hidden width")
    num_classes: int = _f(3, 2, 3, "segmentation classes")
    pool_train: tuple = _f((8, 4, 2, 1), 1, 64, "per-level pooling factors while training")
    pool_infer: tuple = _f((4, 2, 1, 1), 1, 64, "per-level pooling factors at inference")
    depth_input_gradient: bool = _f(False, help="also feed the raw depth-map gradient to the depth encoder")
    # ablation toggles
    enable_fusion: bool = _f(True, help="depth-guided cross-attention fusion")
    enable_depth_gradients: bool = _f(True, help="append depth-gradient magnitude to queries/keys")
    mask_mode: str = _f("all", help="mask geometries", choices=tuple(MASK_MODES))
    scheduling: str = _f("scheduled", help="which domain receives the masked pass", choices=SCHEDULING)
    use_target: bool = _f(True, help="use target data (False = source-only training)")
    two_stage: bool = _f(True, help="pretrain RGB path, then freeze it and train depth/fusion")
    pretrain_frac: float = _f(0.5, 0.0, 1.0, "fraction of iterations in the RGB pretraining stage")
    stage_lr_restart: bool = _f(True, help="each training stage gets its own warm-up and decay")
    # masking schedule
    block: int = _f(16, 1, 512, "mask block edge in pixels")
    m_start: float = _f(0.15, 0.0, 1.0, "initial masking ratio")
    m_end: float = _f(0.80, 0.0, 1.0, "final masking ratio")
    mask_warm_frac: float = _f(0.1, 0.0, 0.99, "fraction of training at m_start before the ramp")
    conf_threshold: float = _f(0.9, 0.0, 1.0, "teacher confidence that switches masking to the target")
    conf_every: int = _f(100, 1, 1_000_000, "iterations between confidence estimates")
    # self-training
    ema_alpha: float = _f(0.999, 0.0, 1.0, "teacher EMA momentum")
    ema_ramp: bool = _f(True, help="cap the momentum at 1 - 1/(t+1) early in training")
    pseudo_threshold: float = _f(0.9, 0.0, 1.0, "per-pixel teacher confidence needed to use a pseudo-label")
    target_weight: float = _f(0.5, 0.0, 10.0, "weight of the unmasked target loss during the source phase")
    unmasked_every: int = _f(10, 0, 1_000_000, "period of the extra fully unmasked pass (0 = never)")
    # optimisation
    iterations: int = _f(2000, 0, 10_000_000, "training iterations")
    batch_size: int = _f(2, 1, 256, "images per domain per step")
    lr_rgb: float = _f(5e-4, 0.0, 1.0, "RGB encoder learning rate (pretraining stage)")
    lr_depth: float = _f(5e-5, 0.0, 1.0, "depth encoder learning rate")
    lr_decoder: float = _f(5e-4, 0.0, 1.0, "decoder and fusion learning rate")
    warmup_iters: int = _f(150, 0, 10_000_000, "linear learning-rate warm-up iterations")
    poly_power: float = _f(0.9, 0.0, 10.0, "polynomial decay power")
    weight_decay: float = _f(0.01, 0.0, 1.0, "decoupled weight decay")
    brightness: tuple = _f((0.7, 1.3), 0.0, 5.0, "student brightness scale range")
    noise_sigma: float = _f(0.02, 0.0, 1.0, "student Gaussian pixel noise")
    # bookkeeping
    eval_every: int = _f(500, 1, 10_000_000, "iterations between validation evaluations")
    checkpoint_every: int = _f(0, 0, 10_000_000, "iterations between checkpoints (0 = final only)")
    out_dir: Optional[str] = _f(None, help="output directory for logs and checkpoints")

    @property
    def pretrain_iters(self) -> int:
        return int(round(self.pretrain_frac * self.iterations)) if self.two_stage else 0

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    def replace(self, **kw) -> "RunConfig":
        return validate(dataclasses.replace(self, **kw))


def _check_value(name: str, value: Any, meta: dict, default: Any) -> list:
    problems = []
    lo, hi, choices = meta["lo"], meta["hi"], meta["choices"]
    if value is None:
        if default is not None:
            problems.append(f"{name}: must not be null")
        return problems
    if choices is not None:
        if value not in choices:
            problems.append(f"{name}: {value!r} not one of {list(choices)}")
        return problems
    if isinstance(default, bool):
        if not isinstance(value, bool):
            problems.append(f"{name}: expected true/false, got {value!r}")
        return problems
    items = value if isinstance(default, tuple) else [value]
    if isinstance(default, tuple) and len(value) != len(default):
        return [f"{name}: expected {len(default)} values, got {len(value)}"]
    for v in items:
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            if not (default is None and isinstance(v, (dict, str))):
                problems.append(f"{name}: expected a number, got {v!r}")
            continue
        if isinstance(v, float) and not math.isfinite(v):
            problems.append(f"{name}: must be finite")
        elif (isinstance(default, int) or (default is None and lo is not None)) and isinstance(v, float) \
                and not v.is_integer():
            problems.append(f"{name}: expected an integer, got {v!r}")
        elif lo is not None and not lo <= v <= hi:
            problems.append(f"{name}: {v!r} not in [{lo}, {hi}]")
    return problems


def validate(cfg: RunConfig) -> RunConfig:
    problems = []
    for f in dataclasses.fields(cfg):
        problems += _check_value(f.name, getattr(cfg, f.name), f.metadata, f.default)
    for key in ("source_spec", "target_spec"):
        spec = getattr(cfg, key)
        if spec is not None:
            try:
                DomainSpec.from_dict(spec).validate()
            except (SpecError, TypeError) as exc:
                problems.append(f"{key}: {exc}")
    if not problems:
        if cfg.m_start > cfg.m_end:
            problems.append("m_start: must not exceed m_end")
        if cfg.image_size % 8:
            problems.append("image_size: must be a multiple of 8")
        if any(s > t for s, t in zip(cfg.pool_infer, cfg.pool_train)):
            problems.append("pool_infer: must not exceed pool_train at any level")
        for i, (pt, pi) in enumerate(zip(cfg.pool_train, cfg.pool_infer)):
            side = cfg.image_size >> i
            if side % pt or side % pi:
                problems.append(f"pool_train/pool_infer: level {i + 1} size {side} not divisible")
        if cfg.image_size % cfg.block:
            problems.append("block: must divide image_size")
        if cfg.brightness[0] > cfg.brightness[1]:
            problems.append("brightness: low bound exceeds high bound")
    if problems:
        raise ConfigError(problems)
    return cfg


def from_dict(d: dict) -> RunConfig:
    names = {f.name: f for f in dataclasses.fields(RunConfig)}
    problems = [f"{k}: unknown key" for k in sorted(set(d) - set(names))]
    if "version" not in d:
        problems.append("version: required")
    kw = {}
    for k, v in d.items():
        if k in names:
            kw[k] = tuple(v) if isinstance(names[k].default, tuple) and isinstance(v, list) else v
    if problems:
        # still report value problems for the known keys
        try:
            validate(RunConfig(**kw))
        except ConfigError as exc:
            problems += exc.problems
        raise ConfigError(problems)
    return validate(RunConfig(**kw))


def load(path: str) -> RunConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc.strerror}") from exc
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}"]) from exc
    if not isinstance(d, dict):
        raise ConfigError([f"{path}: top level must be a JSON object"])
    return from_dict(d)


def describe() -> str:
    """One line per config key with its default and valid range, for ``--help``."""
    lines = []
    for f in dataclasses.fields(RunConfig):
        m = f.metadata
        if m["choices"]:
            rng = "one of " + ", ".join(m["choices"])
        elif isinstance(f.default, bool):
            rng = "true|false"
        elif m["lo"] is not None:
            rng = f"[{m['lo']}, {m['hi']}]"
            if isinstance(f.default, tuple):
                rng = f"{len(f.default)} values in " + rng
        else:
            rng = "DomainSpec object or null" if f.name.endswith("_spec") else "path or null"
        default = list(f.default) if isinstance(f.default, tuple) else f.default
        lines.append(f"  {f.name:<24} {rng:<28} default={json.dumps(default)}  {m['help']}".replace(
            f"{rng}default", f"{rng} default"))
    return "\n".join(lines)


VARIANTS = {
    "source_only": dict(use_target=False, mask_mode="none", enable_fusion=False),
    "no_fusion": dict(enable_fusion=False),
    "fusion_no_grad": dict(enable_depth_gradients=False),
    "full": {},
    "no_masking": dict(mask_mode="none"),
    "stochastic_only": dict(mask_mode="stochastic_only"),
    "vertical_only": dict(mask_mode="vertical_only"),
    "horizontal_only": dict(mask_mode="horizontal_only"),
    "mask_source_only": dict(scheduling="source_only"),
    "mask_target_only": dict(scheduling="target_only"),
}


def variant(cfg: RunConfig, name: str) -> RunConfig:
    if name not in VARIANTS:
        raise ConfigError([f"variant: {name!r} not one of {sorted(VARIANTS)}"])
    return cfg.replace(**VARIANTS[name])
