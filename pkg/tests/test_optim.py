import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kvdistill.optim import AdamWState, ScheduleConfig, adamw_step, clip_global_norm, cosine_warmup_lr, global_norm

from oracles import adamw_scalar


def test_first_step_moves_by_lr_against_gradient_sign():
    p = {"w": np.array([1.0, -2.0, 0.5])}
    g = {"w": np.array([0.3, -4.0, 1e-3])}
    assert adamw_step(p, g, AdamWState(), 0.1)
    assert np.allclose(p["w"], [0.9, -1.9, 0.4], atol=1e-6)


def test_weight_decay_is_decoupled():
    p = {"w": np.array([2.0])}
    adamw_step(p, {"w": np.array([0.0])}, AdamWState(weight_decay=0.1), 0.01)
    # zero gradient: only the decay term acts
    assert p["w"][0] == pytest.approx(2.0 - 0.01 * 0.1 * 2.0, abs=1e-15)


def test_matches_scalar_oracle_over_steps():
    rng = np.random.default_rng(0)
    p = {"w": rng.normal(size=5)}
    state = AdamWState(weight_decay=0.01)
    ref = [(float(x), 0.0, 0.0) for x in p["w"]]
    for t in range(1, 21):
        g = rng.normal(size=5)
        lr = 0.01 * t / 20
        adamw_step(p, {"w": g.copy()}, state, lr)
        ref = [adamw_scalar(pi, float(gi), mi, vi, t, lr, wd=0.01) for (pi, mi, vi), gi in zip(ref, g)]
    assert np.allclose(p["w"], [r[0] for r in ref], rtol=0, atol=1e-13)
    assert state.step == 20


def test_non_finite_gradient_skips_without_touching_state():
    p = {"a": np.ones(2), "b": np.ones(2)}
    state = AdamWState()
    assert not adamw_step(p, {"a": np.ones(2), "b": np.array([1.0, np.nan])}, state, 0.1)
    assert state.step == 0 and not state.m
    assert np.array_equal(p["a"], np.ones(2))


def test_gradient_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        adamw_step({"w": np.ones(3)}, {"w": np.ones(2)}, AdamWState(), 0.1)


def test_clip_example():
    grads, norm = clip_global_norm({"g": np.array([3.0, 4.0])}, 1.0)
    assert norm == 5.0
    assert np.allclose(grads["g"], [0.6, 0.8], rtol=0, atol=1e-15)


def test_clip_leaves_small_gradients_alone():
    g = {"g": np.array([0.3, 0.4])}
    out, norm = clip_global_norm(g, 1.0)
    assert out["g"] is g["g"] and norm == pytest.approx(0.5)


def test_clip_rejects_non_positive_max():
    with pytest.raises(ValueError):
        clip_global_norm({"g": np.ones(2)}, 0.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.floats(0.01, 10.0), st.sampled_from([np.float32, np.float64]))
def test_clipped_norm_never_exceeds_max(seed, max_norm, dtype):
    rng = np.random.default_rng(seed)
    grads = {k: (rng.normal(size=(3, 4)) * rng.uniform(0.1, 100)).astype(dtype) for k in "abc"}
    out, _ = clip_global_norm(grads, max_norm)
    assert global_norm(out.values()) <= max_norm + 1e-12


def test_schedule_values():
    s = ScheduleConfig(peak_lr=1e-3, warmup_fraction=0.1, total_steps=100)
    assert s.warmup_steps == 10
    assert cosine_warmup_lr(0, s) == 0.0
    assert cosine_warmup_lr(5, s) == pytest.approx(5e-4)
    assert cosine_warmup_lr(10, s) == 1e-3
    assert cosine_warmup_lr(55, s) == pytest.approx(5e-4)
    assert cosine_warmup_lr(100, s) == pytest.approx(0.0, abs=1e-18)
    with pytest.raises(ValueError):
        cosine_warmup_lr(101, s)


def test_schedule_floor_and_no_warmup():
    s = ScheduleConfig(peak_lr=1.0, warmup_fraction=0.0, total_steps=10, floor_lr=0.1)
    assert cosine_warmup_lr(0, s) == 1.0
    assert cosine_warmup_lr(10, s) == pytest.approx(0.1)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 500), st.floats(0.0, 0.5))
def test_schedule_is_bounded_and_decays_after_warmup(total, frac):
    s = ScheduleConfig(peak_lr=1.0, warmup_fraction=frac, total_steps=total)
    lrs = [cosine_warmup_lr(k, s) for k in range(total + 1)]
    assert all(0.0 <= x <= 1.0 + 1e-15 for x in lrs)
    tail = lrs[s.warmup_steps:]
    assert all(a >= b - 1e-15 for a, b in zip(tail, tail[1:]))


def test_global_norm_accumulates_in_double():
    g = [np.full(10, 1e-3, dtype=np.float32)] * 4
    assert global_norm(g) == pytest.approx(math.sqrt(40) * 1e-3, rel=1e-7)
