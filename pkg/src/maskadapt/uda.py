"""EMA teacher-student self-training with geometry-aware complementary masking."""
from __future__ import annotations

import copy
import dataclasses
import json
import logging
import math
import os
import zlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import numerics as nx
from .checkpoint import load_arrays, save_arrays
from .config import RunConfig, validate
from .encoders import (
    DecoderParams,
    EncoderConfig,
    EncoderParams,
    FeaturePyramid,
    decode,
    encode,
    init_decoder,
    init_params,
)
from .evaluation import ConfusionMatrix, boundary_f1, iou
from .fusion import PoolingConfig, fuse_pyramid, init_fusion
from .masking import MASK_MODES, MaskSchedule, apply_mask, choose_geometry, ratio_at, sample_mask, update_phase
from .numerics import Tensor
from .synthdata import benchmark_pair, DomainSpec, generate, read_dataset, stack

logger = logging.getLogger(__name__)

DTYPE = np.float32
RGB_MEAN, RGB_STD = 0.4, 0.2
DEPTH_SCALE = 10.0  # per-image centred depth, metres -> network units
CHECKPOINT_KIND = "maskadapt-trainer"


class ContractError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, msg: str, snapshot: dict):
        super().__init__(msg)
        self.snapshot = snapshot


# -- model -----------------------------------------------------------------

@dataclass
class ModelParams:
    rgb_encoder: EncoderParams
    depth_encoder: EncoderParams
    fusion: list
    decoder: DecoderParams
    role: str = "student"

    def named(self) -> dict:
        out = {f"rgb.{k}": t for k, t in self.rgb_encoder.weights.items()}
        out.update({f"depth.{k}": t for k, t in self.depth_encoder.weights.items()})
        for i, w in enumerate(self.fusion):
            out.update({f"fusion{i}.{k}": t for k, t in w.tensors().items()})
        out.update({f"decoder.{k}": t for k, t in self.decoder.weights.items()})
        return out

    def copy(self, role: str) -> "ModelParams":
        other = copy.deepcopy(self)
        other.role = role
        for t in other.named().values():
            t.requires_grad = False
            t.grad = None
        return other


def init_model(cfg: RunConfig, rng: np.random.Generator) -> ModelParams:
    seeds = rng.integers(0, 2**63 - 1, size=4)
    c = cfg.channels
    depth_in = 2 if cfg.depth_input_gradient else 1
    return ModelParams(
        rgb_encoder=init_params(int(seeds[0]), EncoderConfig(c, 3), "rgb", DTYPE),
        depth_encoder=init_params(int(seeds[1]), EncoderConfig(c, depth_in), "depth", DTYPE),
        fusion=init_fusion(int(seeds[2]), c, cfg.d_k, DTYPE),
        decoder=init_decoder(int(seeds[3]), c, cfg.num_classes, cfg.hidden, DTYPE),
    )


def prepare_rgb(rgb: np.ndarray) -> np.ndarray:
    return ((rgb - RGB_MEAN) / RGB_STD).astype(DTYPE)


def prepare_depth(depth: np.ndarray, with_gradient: bool = False) -> np.ndarray:
    """Centre each depth map on its own mean (removes camera height) and rescale."""
    d = (depth - depth.mean(axis=(-3, -2), keepdims=True)) * DEPTH_SCALE
    if with_gradient:
        from .depth_features import depth_gradient
        d = np.concatenate([d, depth_gradient(Tensor(d)).data], axis=-1)
    return d.astype(DTYPE)


def forward(params: ModelParams, rgb: np.ndarray, depth: np.ndarray, cfg: RunConfig, fused: bool,
            mode: str = "train") -> Tensor:
    """Logits ``(N, H, W, K)`` from raw ``rgb (N,H,W,3)`` in [0,1] and ``depth (N,H,W,1)`` in metres."""
    pyr = encode(Tensor(prepare_rgb(rgb)), params.rgb_encoder)
    if fused:
        dpyr = encode(Tensor(prepare_depth(depth, cfg.depth_input_gradient)), params.depth_encoder)
        pyr = fuse_pyramid(pyr, dpyr, params.fusion, PoolingConfig(cfg.pool_train, cfg.pool_infer), mode,
                           use_gradients=cfg.enable_depth_gradients)
    return decode(pyr, params.decoder)


def softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def pseudo_label(teacher: ModelParams, rgb: np.ndarray, depth: np.ndarray, cfg: RunConfig, fused: bool,
                 mode: str = "train"):
    """Teacher argmax labels on full (unmasked) inputs, per-pixel max-probability, and its mean."""
    if teacher.role != "teacher":
        raise ContractError(f"pseudo-labels must come from the teacher, got {teacher.role} parameters")
    with nx.no_grad():
        probs = softmax_np(forward(teacher, rgb, depth, cfg, fused, mode).data.astype(np.float64))
    labels = probs.argmax(axis=-1)
    maxp = probs.max(axis=-1)
    return labels, maxp, float(maxp.mean())


def ema_update(teacher: ModelParams, student: ModelParams, alpha: float) -> None:
    """``theta_T <- alpha * theta_T + (1 - alpha) * theta_S`` for every parameter."""
    t, s = teacher.named(), student.named()
    if t.keys() != s.keys() or any(t[k].shape != s[k].shape for k in t):
        raise ContractError("teacher and student parameter trees differ")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    for k, tt in t.items():
        # arithmetic in the parameter's own precision
        a = tt.data.dtype.type(alpha)
        tt.data = a * tt.data + (tt.data.dtype.type(1.0) - a) * s[k].data.astype(tt.data.dtype)


def lr_at(t: float, base: float, warmup: int, total: int, power: float = 0.9) -> float:
    """Linear warm-up to ``base`` then polynomial decay to 0 at ``total`` (clamped beyond)."""
    if t < 0:
        raise ValueError(f"iteration must be non-negative, got {t}")
    t = min(t, total)
    if warmup > 0 and t < warmup:
        return base * t / warmup
    if total <= warmup:
        return base
    return base * (1.0 - (t - warmup) / (total - warmup)) ** power


def stage_clock(cfg: RunConfig, t: int) -> tuple:
    """``(t relative to the stage start, stage length)`` for the learning-rate schedule."""
    p = cfg.pretrain_iters
    if not cfg.stage_lr_restart or p == 0:
        return t, cfg.iterations
    if t < p:
        return t, p
    return t - p, cfg.iterations - p


# -- optimiser -------------------------------------------------------------

@dataclass
class AdamW:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    steps: dict = field(default_factory=dict)

    def step(self, named: dict, lrs: dict) -> None:
        """Update each tensor in ``named`` that has a gradient, with ``lrs[name]``."""
        for k, p in named.items():
            g = p.grad
            if g is None:
                continue
            lr = lrs[k]
            n = self.steps.get(k, 0) + 1
            self.steps[k] = n
            m = self.m.get(k)
            m = (1 - self.beta1) * g if m is None else self.beta1 * m + (1 - self.beta1) * g
            v = self.v.get(k)
            v = (1 - self.beta2) * g * g if v is None else self.beta2 * v + (1 - self.beta2) * g * g
            self.m[k], self.v[k] = m.astype(DTYPE), v.astype(DTYPE)
            mhat = m / (1 - self.beta1 ** n)
            vhat = v / (1 - self.beta2 ** n)
            p.data = (p.data * (1 - lr * self.weight_decay) - lr * mhat / (np.sqrt(vhat) + self.eps)).astype(DTYPE)


# -- trainer state ---------------------------------------------------------

def named_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]))


RNG_STREAMS = ("init", "data", "mask", "aug")


@dataclass
class TrainerState:
    cfg: RunConfig
    student: ModelParams
    teacher: ModelParams
    optim: AdamW
    schedule: MaskSchedule
    rngs: dict
    t: int = 0
    confidence: float = 0.0
    loss_trace: list = field(default_factory=list)

    @property
    def alpha(self) -> float:
        """EMA momentum for the update after step ``t``; ramps up as ``1 - 1/(t+1)`` when enabled."""
        if self.cfg.ema_ramp:
            return min(1.0 - 1.0 / (self.t + 1), self.cfg.ema_alpha)
        return self.cfg.ema_alpha

    @property
    def num_classes(self) -> int:
        return self.cfg.num_classes

    def fused(self, t: Optional[int] = None) -> bool:
        t = self.t if t is None else t
        return self.cfg.enable_fusion and t >= self.cfg.pretrain_iters

    def rgb_frozen(self, t: Optional[int] = None) -> bool:
        t = self.t if t is None else t
        return self.cfg.two_stage and t >= self.cfg.pretrain_iters


def initial_schedule(cfg: RunConfig) -> MaskSchedule:
    phase = "target" if cfg.scheduling == "target_only" else "source"
    return MaskSchedule(m_start=cfg.m_start, m_end=cfg.m_end, t_total=max(cfg.iterations, 1),
                        warm_frac=cfg.mask_warm_frac, conf_threshold=cfg.conf_threshold, domain_phase=phase)


def init_state(cfg: RunConfig) -> TrainerState:
    cfg = validate(cfg)
    rngs = {name: named_rng(cfg.seed, name) for name in RNG_STREAMS}
    student = init_model(cfg, rngs["init"])
    teacher = student.copy("teacher")
    state = TrainerState(cfg, student, teacher, AdamW(weight_decay=cfg.weight_decay), initial_schedule(cfg), rngs)
    _apply_trainability(state)
    return state


def _groups(state: TrainerState) -> dict:
    """Parameter name -> optimiser group for the current stage (frozen/unused ones excluded)."""
    cfg = state.cfg
    out = {}
    for k in state.student.named():
        prefix = k.split(".")[0]
        if prefix == "rgb":
            if not state.rgb_frozen():
                out[k] = "rgb"
        elif prefix == "depth":
            if state.fused():
                out[k] = "depth"
        elif prefix.startswith("fusion"):
            if state.fused():
                out[k] = "decoder"
        else:
            out[k] = "decoder"
    return out


def _apply_trainability(state: TrainerState) -> None:
    groups = _groups(state)
    for k, t in state.student.named().items():
        t.requires_grad = k in groups
        t.grad = None
    state.student.rgb_encoder.trainable = not state.rgb_frozen()
    state.student.depth_encoder.trainable = state.fused()


# -- data ------------------------------------------------------------------

@dataclass
class DomainData:
    """Stacked arrays for one split; labels are None for unlabelled target data."""

    rgb: np.ndarray
    depth: np.ndarray
    labels: Optional[np.ndarray]

    def __len__(self):
        return len(self.rgb)

    @classmethod
    def from_samples(cls, samples: list, labelled: bool = True) -> "DomainData":
        rgb, depth, labels = stack(samples)
        return cls(rgb, depth, labels if labelled else None)


@dataclass
class DomainBatch:
    src_rgb: np.ndarray
    src_depth: np.ndarray
    src_labels: np.ndarray
    tgt_rgb: np.ndarray
    tgt_depth: np.ndarray


def load_data(cfg: RunConfig) -> tuple:
    """``(source_train, target_train, target_val)`` from dataset paths or the generator."""
    src_spec, tgt_spec = benchmark_pair(cfg.benchmark)
    if cfg.source_spec:
        src_spec = DomainSpec.from_dict(cfg.source_spec)
    if cfg.target_spec:
        tgt_spec = DomainSpec.from_dict(cfg.target_spec)
    if cfg.source_path:
        src = read_dataset(cfg.source_path)
    else:
        src = generate(src_spec, cfg.n_source, cfg.data_seed, cfg.image_size)
    if cfg.target_path:
        tgt = read_dataset(cfg.target_path)
    else:
        tgt = generate(tgt_spec, cfg.n_target, cfg.data_seed, cfg.image_size)
    if cfg.val_path:
        val = read_dataset(cfg.val_path)
    else:
        val = generate(tgt_spec, cfg.n_val, cfg.data_seed + 1_000_003, cfg.image_size)
    return DomainData.from_samples(src), DomainData.from_samples(tgt, labelled=False), DomainData.from_samples(val)


def sample_batch(state: TrainerState, src: DomainData, tgt: DomainData) -> DomainBatch:
    rng = state.rngs["data"]
    n = state.cfg.batch_size
    si = rng.integers(len(src), size=n)
    ti = rng.integers(len(tgt), size=n)
    return DomainBatch(src.rgb[si], src.depth[si], src.labels[si], tgt.rgb[ti], tgt.depth[ti])


def augment(rgb: np.ndarray, cfg: RunConfig, rng: np.random.Generator) -> np.ndarray:
    """Student-side photometric augmentation: brightness scale and Gaussian pixel noise."""
    lo, hi = cfg.brightness
    scale = rng.uniform(lo, hi, size=(len(rgb), 1, 1, 1))
    noise = rng.normal(0.0, cfg.noise_sigma, size=rgb.shape) if cfg.noise_sigma else 0.0
    return np.clip(rgb * scale + noise, 0.0, 1.0).astype(DTYPE)


# -- one step --------------------------------------------------------------

def masking_active(cfg: RunConfig) -> bool:
    return cfg.use_target and bool(MASK_MODES[cfg.mask_mode])


def train_step(state: TrainerState, batch: DomainBatch, hold_in: Optional[DomainData] = None) -> dict:
    """Advance ``state`` by one iteration in place and return the step metrics."""
    cfg = state.cfg
    t = state.t
    _apply_trainability(state)
    fused = state.fused()
    h, w = batch.src_rgb.shape[1:3]
    m_t = ratio_at(t, state.schedule) if masking_active(cfg) else 0.0
    pair = None
    if masking_active(cfg):
        geometry = choose_geometry(state.rngs["mask"], MASK_MODES[cfg.mask_mode])
        pair = sample_mask(h, w, geometry, m_t, cfg.block, state.rngs["mask"])

    aug = state.rngs["aug"]
    src_rgb = augment(batch.src_rgb, cfg, aug)
    tgt_rgb = augment(batch.tgt_rgb, cfg, aug) if cfg.use_target else None
    n = len(src_rgb)

    phase = state.schedule.domain_phase
    if cfg.scheduling == "source_only":
        phase = "source"
    losses = {}

    if not cfg.use_target:
        logits = forward(state.student, src_rgb, batch.src_depth, cfg, fused)
        total = nx.cross_entropy(logits, batch.src_labels)
        losses["source"] = total.item()
    else:
        pl, maxp, conf = pseudo_label(state.teacher, batch.tgt_rgb, batch.tgt_depth, cfg, fused)
        pl_weight = (maxp >= cfg.pseudo_threshold).astype(DTYPE)
        losses["pseudo_confidence"] = conf

        def masked(rgb, depth):
            if pair is None:
                return rgb, depth
            return apply_mask(rgb, pair.rgb_mask), apply_mask(depth, pair.depth_mask)

        if phase == "source":
            s_rgb, s_depth = masked(src_rgb, batch.src_depth)
            t_rgb, t_depth = tgt_rgb, batch.tgt_depth
            w_src, w_tgt = 1.0, cfg.target_weight
        else:
            s_rgb, s_depth = src_rgb, batch.src_depth
            t_rgb, t_depth = masked(tgt_rgb, batch.tgt_depth)
            w_src, w_tgt = 1.0, 1.0
        logits = forward(state.student, np.concatenate([s_rgb, t_rgb]), np.concatenate([s_depth, t_depth]),
                         cfg, fused)
        l_src = nx.cross_entropy(logits[:n], batch.src_labels)
        l_tgt = nx.cross_entropy(logits[n:], pl, weights=pl_weight)
        total = nx.add(nx.mul(l_src, w_src), nx.mul(l_tgt, w_tgt))
        losses["source"] = l_src.item()
        losses["target"] = l_tgt.item()
        if pair is not None and cfg.unmasked_every and t % cfg.unmasked_every == 0:
            logits_u = forward(state.student, np.concatenate([src_rgb, tgt_rgb]),
                               np.concatenate([batch.src_depth, batch.tgt_depth]), cfg, fused)
            l_u = nx.add(nx.cross_entropy(logits_u[:n], batch.src_labels),
                         nx.cross_entropy(logits_u[n:], pl, weights=pl_weight))
            losses["unmasked"] = l_u.item()
            total = nx.add(total, l_u)

    loss = total.item()
    if not math.isfinite(loss):
        raise TrainingDiverged(f"non-finite loss {loss} at iteration {t}",
                               {"iteration": t, "losses": losses, "m_t": m_t, "phase": phase})
    total.backward()

    groups = _groups(state)
    base = {"rgb": cfg.lr_rgb, "depth": cfg.lr_depth, "decoder": cfg.lr_decoder}
    t_rel, span = stage_clock(cfg, t)
    rates = {g: lr_at(t_rel, b, cfg.warmup_iters, span, cfg.poly_power) for g, b in base.items()}
    named = state.student.named()
    state.optim.step({k: named[k] for k in groups}, {k: rates[g] for k, g in groups.items()})
    for t_ in named.values():
        t_.grad = None
    ema_update(state.teacher, state.student, state.alpha)

    if cfg.use_target and cfg.scheduling == "scheduled" and hold_in is not None and t % cfg.conf_every == 0:
        _, _, state.confidence = pseudo_label(state.teacher, hold_in.rgb, hold_in.depth, cfg, state.fused(t + 1))
        state.schedule = update_phase(state.confidence, state.schedule)

    state.t = t + 1
    state.loss_trace.append(loss)
    return {"iteration": t, "loss": loss, "losses": losses, "m_t": m_t, "phase": phase,
            "geometry": pair.geometry if pair is not None else None, "confidence": state.confidence,
            "lr_decoder": rates["decoder"]}


# -- evaluation ------------------------------------------------------------

def predict(params: ModelParams, data: DomainData, cfg: RunConfig, fused: bool, chunk: int = 25) -> np.ndarray:
    preds = []
    with nx.no_grad():
        for i in range(0, len(data), chunk):
            logits = forward(params, data.rgb[i:i + chunk], data.depth[i:i + chunk], cfg, fused, mode="infer")
            preds.append(logits.data.argmax(axis=-1))
    return np.concatenate(preds)


def evaluate(params: ModelParams, data: DomainData, cfg: RunConfig, fused: bool) -> dict:
    pred = predict(params, data, cfg, fused)
    cm = ConfusionMatrix(cfg.num_classes).accumulate(pred, data.labels)
    rep = iou(cm).as_dict()
    rep["boundary_f1"] = float(np.mean([boundary_f1(p, t, radius=2) for p, t in zip(pred, data.labels)]))
    return rep


# -- checkpoints -----------------------------------------------------------

def save_checkpoint(path: str, state: TrainerState) -> None:
    arrays = {f"student/{k}": t.data for k, t in state.student.named().items()}
    arrays.update({f"teacher/{k}": t.data for k, t in state.teacher.named().items()})
    arrays.update({f"adam_m/{k}": v for k, v in state.optim.m.items()})
    arrays.update({f"adam_v/{k}": v for k, v in state.optim.v.items()})
    meta = {
        "kind": CHECKPOINT_KIND,
        "config": state.cfg.to_dict(),
        "t": state.t,
        "confidence": state.confidence,
        "schedule": dataclasses.asdict(state.schedule),
        "adam_steps": state.optim.steps,
        "rngs": {k: g.bit_generator.state for k, g in state.rngs.items()},
        "loss_trace": state.loss_trace,
    }
    save_arrays(path, arrays, meta)


def load_checkpoint(path: str) -> TrainerState:
    from .config import from_dict

    arrays, meta = load_arrays(path)
    if meta.get("kind") != CHECKPOINT_KIND:
        raise ContractError(f"{path}: not a trainer checkpoint")
    cfg = from_dict(meta["config"])
    state = init_state(cfg)
    for role, params in (("student", state.student), ("teacher", state.teacher)):
        for k, t in params.named().items():
            key = f"{role}/{k}"
            if key not in arrays or arrays[key].shape != t.shape:
                raise ContractError(f"{path}: array {key} missing or mis-shaped")
            t.data = arrays[key].astype(DTYPE)
    for k in meta["adam_steps"]:
        state.optim.m[k] = arrays[f"adam_m/{k}"]
        state.optim.v[k] = arrays[f"adam_v/{k}"]
    state.optim.steps = dict(meta["adam_steps"])
    for k, st in meta["rngs"].items():
        state.rngs[k].bit_generator.state = st
    state.t = meta["t"]
    state.confidence = meta["confidence"]
    state.schedule = MaskSchedule(**meta["schedule"])
    state.loss_trace = list(meta["loss_trace"])
    _apply_trainability(state)
    return state


# -- full run --------------------------------------------------------------

def _hold_in(tgt: DomainData, k: int = 8) -> DomainData:
    return DomainData(tgt.rgb[:k], tgt.depth[:k], None)


def run_training(cfg: RunConfig, data: Optional[tuple] = None, state: Optional[TrainerState] = None,
                 stop_at: Optional[int] = None, log_path: Optional[str] = None) -> tuple:
    """Train to ``cfg.iterations`` (or ``stop_at``) and return ``(state, eval_log)``.

    The eval log holds one event per validation pass.  When ``log_path`` is set
    each event is also appended to it as one JSON line.  Passing a restored
    ``state`` resumes from its iteration counter.
    """
    cfg = validate(cfg)
    if state is None:
        state = init_state(cfg)
    if data is None:
        data = load_data(cfg)
    src, tgt, val = data
    hold = _hold_in(tgt)
    end = cfg.iterations if stop_at is None else min(stop_at, cfg.iterations)
    log = []
    out_dir = cfg.out_dir
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    last = None
    while state.t < end:
        batch = sample_batch(state, src, tgt)
        last = train_step(state, batch, hold)
        if state.t % cfg.eval_every == 0 or state.t == cfg.iterations:
            event = {
                "iteration": state.t,
                "loss": last["loss"],
                "losses": last["losses"],
                "m_t": last["m_t"],
                "phase": state.schedule.domain_phase,
                "confidence": state.confidence,
                **evaluate(state.student, val, cfg, state.fused()),
            }
            log.append(event)
            logger.info("iter %d loss %.4f mIoU %.4f phase %s", state.t, event["loss"], event["miou"],
                        event["phase"])
            if log_path:
                try:
                    with open(log_path, "a") as fh:
                        fh.write(json.dumps(event, sort_keys=True) + "\n")
                except OSError as exc:
                    raise OSError(f"cannot append metrics to {log_path}: {exc.strerror}") from exc
        if out_dir and cfg.checkpoint_every and state.t % cfg.checkpoint_every == 0:
            save_checkpoint(os.path.join(out_dir, f"checkpoint_{state.t:07d}.npz"), state)
    if out_dir:
        save_checkpoint(os.path.join(out_dir, "checkpoint_final.npz"), state)
    return state, log
