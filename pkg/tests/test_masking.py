import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maskadapt.masking import (
    GEOMETRIES,
    MaskSchedule,
    apply_mask,
    choose_geometry,
    ratio_at,
    sample_mask,
    update_phase,
)
from maskadapt.numerics import DimensionError


@pytest.mark.parametrize("geometry", GEOMETRIES)
def test_boundaries(geometry):
    rng = np.random.default_rng(0)
    for _ in range(50):
        m0 = sample_mask(64, 64, geometry, 0.0, 16, rng)
        assert m0.rgb_mask.all() and not m0.depth_mask.any()
        m1 = sample_mask(64, 64, geometry, 1.0, 16, rng)
        assert not m1.rgb_mask.any() and m1.depth_mask.all()


def test_stochastic_monte_carlo_fraction():
    rng = np.random.default_rng(1)
    fr = [sample_mask(64, 64, "stochastic", 0.5, 16, rng).masked_fraction for _ in range(10_000)]
    assert abs(np.mean(fr) - 0.5) <= 0.02


@settings(max_examples=200, deadline=None)
@given(st.sampled_from(GEOMETRIES), st.floats(0, 1), st.sampled_from([4, 8, 16]), st.integers(0, 2**32 - 1))
def test_mask_invariants(geometry, m_t, block, seed):
    pair = sample_mask(32, 48, geometry, m_t, block, np.random.default_rng(seed))
    assert np.array_equal(pair.rgb_mask + pair.depth_mask, np.ones((32, 48), dtype=np.uint8))
    r = pair.rgb_mask
    if geometry == "horizontal":
        assert (r == r[:, :1]).all()
        n = 32 // block
    elif geometry == "vertical":
        assert (r == r[:1, :]).all()
        n = 48 // block
    else:
        n = (32 // block) * (48 // block)
    # constant within blocks
    for y in range(0, 32, block):
        for x in range(0, 48, block):
            tile = r[y:y + block, x:x + block]
            if geometry == "stochastic":
                assert (tile == tile[0, 0]).all()
    assert abs(pair.masked_fraction - m_t) <= 1.0 / n + 1e-12


def test_block_must_divide():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        sample_mask(60, 64, "horizontal", 0.5, 16, rng)
    with pytest.raises(ValueError):
        sample_mask(64, 60, "vertical", 0.5, 16, rng)
    # horizontal masks only need the block to divide the height
    sample_mask(64, 60, "horizontal", 0.5, 16, rng)


def test_geometry_uniform():
    rng = np.random.default_rng(2)
    draws = [choose_geometry(rng) for _ in range(10_000)]
    for g in GEOMETRIES:
        assert abs(draws.count(g) / 10_000 - 1 / 3) <= 0.03


def test_ratio_schedule():
    s = MaskSchedule(t_total=1000)
    assert ratio_at(0, s) == 0.15
    assert ratio_at(1000, s) == pytest.approx(0.80)
    assert ratio_at(550, s) == pytest.approx((0.15 + 0.80) / 2)
    values = [ratio_at(t, s) for t in range(0, 1001)]
    assert all(b >= a for a, b in zip(values, values[1:]))
    assert min(values) == 0.15 and max(values) == pytest.approx(0.8)
    with pytest.raises(ValueError):
        ratio_at(1001, s)
    with pytest.raises(ValueError):
        ratio_at(-1, s)


def test_phase_latch():
    s = MaskSchedule()
    assert update_phase(0.89, s).domain_phase == "source"
    t = update_phase(0.90, s)
    assert t.domain_phase == "target"
    assert update_phase(0.10, t).domain_phase == "target"


def test_apply_mask():
    rng = np.random.default_rng(3)
    img = rng.uniform(size=(8, 8, 3))
    assert apply_mask(img, np.ones((8, 8))).tobytes() == img.tobytes()
    flat = apply_mask(img, np.zeros((8, 8)))
    np.testing.assert_allclose(flat, np.broadcast_to(img.mean(axis=(0, 1)), img.shape), atol=1e-12)
    mask = sample_mask(8, 8, "stochastic", 0.5, 2, rng).rgb_mask
    out = apply_mask(img, mask)
    np.testing.assert_allclose(out.mean(axis=(0, 1)), img.mean(axis=(0, 1)), atol=1e-5)
    vis = mask.astype(bool)
    assert np.array_equal(out[vis], img[vis])
    with pytest.raises(DimensionError):
        apply_mask(img, np.ones((4, 8)))


def test_apply_mask_batched_shared_mask():
    rng = np.random.default_rng(4)
    imgs = rng.uniform(size=(3, 8, 8, 1))
    mask = sample_mask(8, 8, "vertical", 0.5, 2, rng).rgb_mask
    out = apply_mask(imgs, mask)
    for i in range(3):
        np.testing.assert_array_equal(out[i], apply_mask(imgs[i], mask))
