import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dnd.controller import (
    ControllerConfig,
    clamp_tau,
    compute_error,
    controller_step,
    ema_sync,
    ideal_topk_threshold,
    proportional_update,
    simulate,
)
from dnd.dnd_layer import TAU_EPS, RouterState, SelectionMask, build_mask
from dnd.transformer import ContractError


def sel_from_counts(counts, lengths):
    lengths = np.asarray(lengths)
    N = int(lengths.max())
    m = np.zeros((len(lengths), N), dtype=bool)
    for b, c in enumerate(counts):
        m[b, :c] = True
    return SelectionMask(m.astype(float), m, m.sum(axis=1), lengths)


def sort_oracle(p, k):
    flat = sorted(np.asarray(p).ravel(), reverse=True)
    s = int(np.floor(k * len(flat) + 1e-9))
    return flat[min(s, len(flat) - 1)]


@pytest.mark.parametrize(
    "kwargs",
    [
        {"k_target": 0.0},
        {"k_target": 1.0},
        {"alpha": 0.0},
        {"gamma": 1.5},
        {"buffer_capacity": 0},
        {"sync_period": 0},
    ],
)
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        ControllerConfig(**kwargs)


def test_config_defaults():
    c = ControllerConfig()
    assert (c.k_target, c.alpha, c.gamma, c.buffer_capacity, c.sync_period) == (0.2, 5e-3, 0.2, 5, 50)


def test_compute_error_examples():
    assert compute_error(sel_from_counts([3], [10]), 0.2) == pytest.approx(0.1, abs=1e-15)
    assert compute_error(sel_from_counts([2], [10]), 0.2) == 0.0
    assert compute_error(sel_from_counts([1, 9], [10, 30]), 0.2) == pytest.approx(0.05, abs=1e-15)


def test_compute_error_pools_across_masks():
    a = sel_from_counts([1], [10])
    b = sel_from_counts([9], [30])
    assert compute_error([a, b], 0.2) == pytest.approx(0.05, abs=1e-15)


def test_compute_error_empty_batch():
    empty = SelectionMask(np.zeros((1, 0)), np.zeros((1, 0), bool), np.zeros(1, int), np.zeros(1, int))
    with pytest.raises(ContractError):
        compute_error(empty, 0.2)


def test_proportional_examples():
    s = RouterState.zeros(1)
    assert proportional_update(s, 0.1, 5e-3) == pytest.approx(0.5005, abs=1e-15)
    assert proportional_update(s, 0.0, 5e-3) == pytest.approx(0.5005, abs=1e-15)
    s.tau = 0.9999
    assert proportional_update(s, 50.0, 5e-3) == 1.0 - TAU_EPS
    assert proportional_update(s, -500.0, 5e-3) == TAU_EPS


@settings(max_examples=100, deadline=None)
@given(st.floats(-1e6, 1e6))
def test_clamp_keeps_tau_inside(t):
    assert 0.0 < clamp_tau(t) < 1.0


def test_topk_examples():
    assert ideal_topk_threshold([0.9, 0.7, 0.5, 0.3, 0.1], 0.2) == 0.7
    assert ideal_topk_threshold(np.full((2, 5), 0.4), 0.3) == 0.4
    assert ideal_topk_threshold([0.8, 0.2], 0.5) == 0.2
    assert build_mask(np.array([[0.8, 0.2]]), 0.2).mask.tolist() == [[True, False]]


def test_topk_with_few_tokens_returns_max():
    assert ideal_topk_threshold([0.3, 0.6, 0.1], 0.2) == 0.6


@settings(max_examples=150, deadline=None)
@given(
    arrays(np.float64, st.integers(1, 1000), elements=st.floats(0, 1)),
    st.floats(0.01, 0.99),
)
def test_topk_matches_sort_oracle(p, k):
    tau = ideal_topk_threshold(p, k)
    assert tau == sort_oracle(p, k)
    s = int(np.floor(k * p.size + 1e-9))
    if len(set(p.tolist())) == p.size and s < p.size:
        assert int(np.sum(p > tau)) == s


def test_ema_examples():
    s = RouterState.zeros(1)
    s.topk_tau_buffer.extend([0.6, 0.8])
    assert ema_sync(s, 0.2) == pytest.approx(0.54, abs=1e-15)
    before = s.tau
    assert ema_sync(s, 0.0) == before
    assert ema_sync(s, 1.0) == pytest.approx(0.7, abs=1e-15)


def test_ema_empty_buffer_is_noop(caplog):
    s = RouterState.zeros(1, tau_init=0.37)
    with caplog.at_level(logging.WARNING):
        assert ema_sync(s, 0.5) == 0.37
    assert "empty" in caplog.text


def test_buffers_hold_capacity(rng):
    cfg = ControllerConfig(buffer_capacity=3)
    s = RouterState.zeros(1, buffer_capacity=3)
    for step in range(1, 11):
        p = rng.random((2, 8))
        controller_step(s, step, build_mask(p, s.tau), p, cfg)
        assert len(s.ratio_buffer) <= 3 and len(s.topk_tau_buffer) <= 3
    assert len(s.ratio_buffer) == 3


def test_step_order_proportional_then_ema():
    cfg = ControllerConfig(sync_period=1, gamma=0.5, alpha=0.1)
    s = RouterState.zeros(1)
    p = np.array([[0.9, 0.8, 0.1, 0.05, 0.02]])  # ratio 0.4, topk tau 0.8
    controller_step(s, 1, build_mask(p, 0.5), p, cfg)
    expect = 0.5 * (0.5 + 0.1 * 0.2) + 0.5 * 0.8
    assert s.tau == pytest.approx(expect, abs=1e-15)


def test_sync_only_on_period():
    cfg = ControllerConfig(sync_period=3, gamma=1.0, alpha=1e-9)
    s = RouterState.zeros(1)
    p = np.array([[0.9, 0.8, 0.1, 0.05, 0.02]])
    for step in (1, 2):
        controller_step(s, step, build_mask(p, s.tau), p, cfg)
        assert abs(s.tau - 0.5) < 1e-6
    controller_step(s, 3, build_mask(p, s.tau), p, cfg)
    assert s.tau == pytest.approx(0.8, abs=1e-6)


def test_frozen_controller_does_nothing(rng):
    s = RouterState.zeros(1, tau_init=0.3)
    p = rng.random((2, 6))
    controller_step(s, 50, build_mask(p, 0.3), p, ControllerConfig(frozen=True))
    assert s.tau == 0.3 and not s.ratio_buffer


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.05, 0.95))
def test_monotone_response(seed, tau):
    p = np.random.default_rng(seed).random((2, 30))
    s = RouterState.zeros(1, tau_init=tau)
    e0 = compute_error(build_mask(p, tau), 0.2)
    proportional_update(s, e0, 5e-3)
    e1 = compute_error(build_mask(p, s.tau), 0.2)
    assert abs(e1) <= abs(e0) or np.sign(e1) != np.sign(e0)
    if e0 > 0:
        assert s.tau >= tau
    elif e0 < 0:
        assert s.tau <= tau


def test_replay_is_deterministic(rng):
    batches = [rng.random((4, 32)) for _ in range(200)]
    cfg = ControllerConfig(sync_period=10)
    a = simulate(batches, cfg)
    b = simulate(batches, cfg)
    assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()


def test_uniform_scores_converge():
    rng = np.random.default_rng(7)
    taus, ratios = simulate((rng.random(4096) for _ in range(2000)), ControllerConfig())
    assert abs(taus[-1] - 0.8) < 0.02
    assert np.all(np.abs(ratios[1000:] - 0.2) <= 0.05)
