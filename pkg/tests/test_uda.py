import copy

import numpy as np
import pytest

from maskadapt import uda
from maskadapt.config import RunConfig, variant
from maskadapt.encoders import DecoderParams, EncoderConfig, EncoderParams
from maskadapt.numerics import Tensor
from maskadapt.uda import (
    ContractError,
    ModelParams,
    TrainingDiverged,
    ema_update,
    forward,
    init_state,
    load_checkpoint,
    load_data,
    lr_at,
    pseudo_label,
    run_training,
    sample_batch,
    save_checkpoint,
    train_step,
)

TINY = dict(image_size=16, pool_train=(2, 1, 1, 1), pool_infer=(1, 1, 1, 1), block=4, channels=4, hidden=8,
            n_source=6, n_target=6, n_val=4, iterations=20, eval_every=10, warmup_iters=4, conf_every=5,
            batch_size=2)


def tiny(**kw):
    return RunConfig(**{**TINY, **kw})


@pytest.fixture(scope="module")
def tiny_data():
    return load_data(tiny())


def toy(values, role="student"):
    return ModelParams(
        rgb_encoder=EncoderParams("rgb", EncoderConfig(2, 3)),
        depth_encoder=EncoderParams("depth", EncoderConfig(2, 1)),
        fusion=[],
        decoder=DecoderParams(2, {"theta": Tensor(np.array(values, dtype=np.float64))}),
        role=role,
    )


# -- EMA ---------------------------------------------------------------------

def test_ema_closed_form_1000_steps():
    alpha = 0.999
    rng = np.random.default_rng(0)
    theta0 = np.array([0.3, -1.2])
    teacher = toy(theta0, "teacher")
    student = toy([0.0, 0.0])
    trajectory = []
    for _ in range(1000):
        student.decoder.weights["theta"].data = rng.normal(size=2)
        trajectory.append(student.decoder.weights["theta"].data.copy())
        ema_update(teacher, student, alpha)
    n = len(trajectory)
    closed = alpha ** n * theta0 + (1 - alpha) * sum(alpha ** (n - 1 - k) * s for k, s in enumerate(trajectory))
    assert np.max(np.abs(teacher.decoder.weights["theta"].data - closed)) < 1e-6


@pytest.mark.parametrize("alpha, expected", [(1.0, 0.0), (0.0, 1.0), (0.999, 0.001)])
def test_ema_examples(alpha, expected):
    teacher, student = toy([0.0, 0.0], "teacher"), toy([1.0, 1.0])
    ema_update(teacher, student, alpha)
    np.testing.assert_allclose(teacher.decoder.weights["theta"].data, expected, atol=1e-12)


def test_ema_tree_mismatch():
    with pytest.raises(ContractError):
        ema_update(toy([0.0, 0.0], "teacher"), toy([0.0, 0.0, 0.0]), 0.5)
    with pytest.raises(ValueError):
        ema_update(toy([0.0], "teacher"), toy([0.0]), 1.5)


# -- learning rate -------------------------------------------------------------

def test_lr_endpoints():
    assert lr_at(0, 5e-4, 150, 2000) == 0.0
    assert lr_at(150, 5e-4, 150, 2000) == 5e-4
    assert abs(lr_at(2000, 5e-4, 150, 2000)) < 1e-9
    assert lr_at(5000, 5e-4, 150, 2000) == lr_at(2000, 5e-4, 150, 2000)
    assert lr_at(75, 5e-4, 150, 2000) == pytest.approx(2.5e-4)
    t = 1000
    assert lr_at(t, 1.0, 150, 2000) == pytest.approx((1 - (t - 150) / 1850) ** 0.9)
    with pytest.raises(ValueError):
        lr_at(-1, 1.0, 10, 100)


def test_lr_monotone_after_warmup():
    rates = [lr_at(t, 1.0, 10, 100) for t in range(10, 101)]
    assert all(a >= b for a, b in zip(rates, rates[1:]))


# -- pseudo-labels ---------------------------------------------------------------

def test_pseudo_label_argmax_oracle(tiny_data):
    cfg = tiny()
    state = init_state(cfg)
    _, tgt, _ = tiny_data
    labels, maxp, conf = pseudo_label(state.teacher, tgt.rgb[:3], tgt.depth[:3], cfg, fused=True)
    logits = forward(state.teacher, tgt.rgb[:3], tgt.depth[:3], cfg, True).data
    oracle = np.empty(logits.shape[:3], dtype=int)
    for idx in np.ndindex(*logits.shape[:3]):
        row = list(logits[idx])
        oracle[idx] = row.index(max(row))
    assert np.array_equal(labels, oracle)
    assert 1 / cfg.num_classes <= conf <= 1.0
    assert np.all((maxp >= 1 / cfg.num_classes - 1e-12) & (maxp <= 1 + 1e-12))


def test_pseudo_label_constant_input_constant_map():
    cfg = tiny()
    state = init_state(cfg)
    rgb = np.full((1, 16, 16, 3), 0.4, dtype=np.float32)
    depth = np.full((1, 16, 16, 1), 1.0, dtype=np.float32)
    labels, _, _ = pseudo_label(state.teacher, rgb, depth, cfg, fused=True)
    assert len(np.unique(labels)) == 1


def test_pseudo_label_refuses_student(tiny_data):
    cfg = tiny()
    state = init_state(cfg)
    _, tgt, _ = tiny_data
    with pytest.raises(ContractError):
        pseudo_label(state.student, tgt.rgb[:1], tgt.depth[:1], cfg, fused=True)


def test_teacher_never_gets_gradients(tiny_data):
    cfg = tiny(iterations=4)
    state = init_state(cfg)
    src, tgt, _ = tiny_data
    for _ in range(4):
        train_step(state, sample_batch(state, src, tgt))
        assert all(not t.requires_grad and t.grad is None for t in state.teacher.named().values())


# -- train_step --------------------------------------------------------------------

def _one_step(cfg, data):
    state = init_state(cfg)
    src, tgt, _ = data
    return train_step(state, sample_batch(state, src, tgt))


def test_zero_ratio_mask_equals_unmasked(tiny_data):
    kw = dict(m_start=0.0, m_end=0.0, unmasked_every=0, two_stage=False)
    masked = _one_step(tiny(mask_mode="all", **kw), tiny_data)
    plain = _one_step(tiny(mask_mode="none", **kw), tiny_data)
    assert masked["geometry"] is not None and plain["geometry"] is None
    assert abs(masked["losses"]["source"] - plain["losses"]["source"]) < 1e-6
    assert abs(masked["losses"]["target"] - plain["losses"]["target"]) < 1e-6


def test_masks_complementary_every_step(tiny_data, monkeypatch):
    seen = []
    original = uda.apply_mask

    def spy(image, mask):
        seen.append(mask.copy())
        return original(image, mask)

    monkeypatch.setattr(uda, "apply_mask", spy)
    cfg = tiny(iterations=12, two_stage=False)
    state = init_state(cfg)
    src, tgt, _ = tiny_data
    for _ in range(12):
        train_step(state, sample_batch(state, src, tgt))
    assert len(seen) == 24
    for rgb_mask, depth_mask in zip(seen[::2], seen[1::2]):
        assert np.array_equal(rgb_mask + depth_mask, np.ones_like(rgb_mask))


def test_step_metrics_fields(tiny_data):
    m = _one_step(tiny(), tiny_data)
    assert m["iteration"] == 0 and m["phase"] == "source"
    assert {"source", "target", "pseudo_confidence"} <= set(m["losses"])
    assert m["m_t"] == pytest.approx(0.15)
    assert np.isfinite(m["loss"])


def test_nan_loss_aborts_with_snapshot(tiny_data):
    cfg = tiny()
    state = init_state(cfg)
    state.student.decoder.weights["cls.b"].data[:] = np.nan
    src, tgt, _ = tiny_data
    with pytest.raises(TrainingDiverged) as err:
        train_step(state, sample_batch(state, src, tgt))
    assert err.value.snapshot["iteration"] == 0
    assert state.t == 0


def test_frozen_rgb_encoder_untouched(tiny_data):
    cfg = tiny(iterations=12, pretrain_frac=0.5)
    state = init_state(cfg)
    src, tgt, _ = tiny_data
    for _ in range(6):
        train_step(state, sample_batch(state, src, tgt))
    before = {k: t.data.copy() for k, t in state.student.rgb_encoder.weights.items()}
    depth_before = {k: t.data.copy() for k, t in state.student.depth_encoder.weights.items()}
    for _ in range(6):
        train_step(state, sample_batch(state, src, tgt))
        for k, t in state.student.rgb_encoder.weights.items():
            assert t.grad is None and not t.requires_grad
            assert t.data.tobytes() == before[k].tobytes()
    assert all(k not in state.optim.steps or state.optim.steps[k] == 6 for k in
               (f"rgb.{n}" for n in before))
    changed = [not np.array_equal(t.data, depth_before[k]) for k, t in state.student.depth_encoder.weights.items()]
    assert any(changed)


def test_source_only_ignores_target_and_depth(tiny_data):
    cfg = variant(tiny(), "source_only")
    m = _one_step(cfg, tiny_data)
    assert set(m["losses"]) == {"source"} and m["geometry"] is None


def test_loss_decreases_on_single_sample():
    cfg = variant(tiny(n_source=1, iterations=200, warmup_iters=10, lr_rgb=2e-3, lr_decoder=2e-3,
                       noise_sigma=0.0, brightness=(1.0, 1.0)), "source_only")
    state, _ = run_training(cfg, stop_at=200)
    trace = state.loss_trace
    assert np.mean(trace[-20:]) < 0.5 * np.mean(trace[:20])


# -- runs ------------------------------------------------------------------------

def test_determinism_replay(tiny_data):
    a, log_a = run_training(tiny(), tiny_data)
    b, log_b = run_training(tiny(), tiny_data)
    assert a.loss_trace == b.loss_trace
    assert log_a == log_b
    assert [e["iteration"] for e in log_a] == [10, 20]


def test_resume_reproduces_uninterrupted(tiny_data, tmp_path):
    cfg = tiny()
    full, log_full = run_training(cfg, tiny_data)
    half, log_half = run_training(cfg, tiny_data, stop_at=7)
    path = str(tmp_path / "ck.npz")
    save_checkpoint(path, half)
    resumed, log_rest = run_training(cfg, tiny_data, state=load_checkpoint(path))
    assert resumed.loss_trace == full.loss_trace
    assert log_half + log_rest == log_full
    for k, t in full.teacher.named().items():
        assert t.data.tobytes() == resumed.teacher.named()[k].data.tobytes()


def test_zero_iterations_empty_log(tiny_data, tmp_path):
    cfg = tiny(iterations=0, out_dir=str(tmp_path / "run"))
    state, log = run_training(cfg, tiny_data)
    assert log == [] and state.t == 0
    assert (tmp_path / "run" / "checkpoint_final.npz").exists()


def test_metric_log_written(tiny_data, tmp_path):
    import json

    path = tmp_path / "metrics.ndjson"
    run_training(tiny(), tiny_data, log_path=str(path))
    events = [json.loads(line) for line in path.read_text().splitlines()]
    assert [e["iteration"] for e in events] == [10, 20]
    assert {"miou", "iou_background", "iou_crop", "iou_weed", "m_t", "phase", "confidence", "losses"} <= set(events[0])


def test_log_path_error_has_path(tiny_data, tmp_path):
    bad = tmp_path / "missing" / "m.ndjson"
    with pytest.raises(OSError, match="missing"):
        run_training(tiny(), tiny_data, log_path=str(bad))


def test_bad_checkpoint_kind(tmp_path):
    from maskadapt.checkpoint import save_arrays

    path = str(tmp_path / "x.npz")
    save_arrays(path, {"a": np.zeros(2)}, {"kind": "other"})
    with pytest.raises(ContractError):
        load_checkpoint(path)


@pytest.mark.parametrize("name", ["no_fusion", "no_masking", "mask_target_only", "fusion_no_grad"])
def test_variants_run(name, tiny_data):
    state, log = run_training(variant(tiny(iterations=10, eval_every=10), name), tiny_data)
    assert len(log) == 1 and 0.0 <= log[0]["miou"] <= 1.0


def test_stage_clock_restarts_schedule():
    cfg = RunConfig(iterations=2000, pretrain_frac=0.5)
    assert uda.stage_clock(cfg, 999) == (999, 1000)
    assert uda.stage_clock(cfg, 1000) == (0, 1000)
    assert uda.stage_clock(cfg.replace(stage_lr_restart=False), 1000) == (1000, 2000)
    assert uda.stage_clock(cfg.replace(two_stage=False), 1500) == (1500, 2000)


def test_ema_momentum_ramp():
    state = init_state(tiny(ema_alpha=0.99))
    assert state.alpha == 0.0
    state.t = 9
    assert state.alpha == pytest.approx(0.9)
    state.t = 5000
    assert state.alpha == 0.99
    fixed = init_state(tiny(ema_alpha=0.99, ema_ramp=False))
    assert fixed.alpha == 0.99
