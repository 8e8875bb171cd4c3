"""Threshold regulation for token-choice routing.

Two loops act on each layer's threshold: a per-step proportional correction
from the realized selection ratio, and a periodic EMA pull toward the mean of
recent per-step ideal thresholds.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .dnd_layer import TAU_EPS, RouterState, SelectionMask, build_mask
from .transformer import ContractError

log = logging.getLogger(__name__)


@dataclass
class ControllerConfig:
    k_target: float = 0.2
    alpha: float = 5e-3
    gamma: float = 0.2
    buffer_capacity: int = 5
    sync_period: int = 50
    proportional: bool = True
    ema: bool = True
    frozen: bool = False

    def __post_init__(self):
        if not 0 < self.k_target < 1:
            raise ValueError(f"k_target must be in (0, 1), got {self.k_target}")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if not 0 <= self.gamma <= 1:
            raise ValueError("gamma must be in [0, 1]")
        if self.buffer_capacity < 1 or self.sync_period < 1:
            raise ValueError("buffer_capacity and sync_period must be >= 1")


def clamp_tau(tau: float) -> float:
    return min(max(tau, TAU_EPS), 1.0 - TAU_EPS)


def compute_error(masks: SelectionMask | Sequence[SelectionMask], k_target: float) -> float:
    """Token-weighted realized ratio minus target, pooled over the mini-batch."""
    if isinstance(masks, SelectionMask):
        masks = [masks]
    selected = sum(int(m.selected_counts.sum()) for m in masks)
    tokens = sum(int(m.lengths.sum()) for m in masks)
    if tokens == 0:
        raise ContractError("compute_error: batch holds no tokens")
    return selected / tokens - k_target


def proportional_update(state: RouterState, e: float, alpha: float) -> float:
    state.tau = clamp_tau(state.tau + alpha * e)
    return state.tau


def ideal_topk_threshold(probs, k_target: float) -> float:
    """The (s+1)-th largest score, s = floor(k_target * T).

    Under strict ``p > tau`` this selects exactly the s largest scores when
    there are no ties; tied boundary scores are all left out.
    """
    flat = np.asarray(probs, dtype=np.float64).reshape(-1)
    T = flat.size
    if T == 0:
        raise ValueError("ideal_topk_threshold: no scores")
    # guard against k*T landing a hair under an integer
    s = min(math.floor(k_target * T + 1e-9), T - 1)
    return float(np.partition(flat, T - 1 - s)[T - 1 - s])


def ema_sync(state: RouterState, gamma: float) -> float:
    if not state.topk_tau_buffer:
        log.warning("ema_sync skipped: empty top-k threshold buffer")
        return state.tau
    avg = sum(state.topk_tau_buffer) / len(state.topk_tau_buffer)
    state.tau = clamp_tau((1.0 - gamma) * state.tau + gamma * avg)
    return state.tau


def controller_step(
    state: RouterState,
    step_index: int,
    masks: SelectionMask | Sequence[SelectionMask],
    probs,
    cfg: ControllerConfig,
) -> RouterState:
    """One update of a layer's controller after an optimizer step.

    Proportional correction runs first; on sync steps the EMA pull follows.
    """
    if cfg.frozen:
        return state
    if isinstance(masks, SelectionMask):
        masks = [masks]
    e = compute_error(masks, cfg.k_target)
    state.ratio_buffer.append(e + cfg.k_target)
    state.topk_tau_buffer.append(ideal_topk_threshold(probs, cfg.k_target))
    if cfg.proportional:
        proportional_update(state, e, cfg.alpha)
    if cfg.ema and step_index % cfg.sync_period == 0:
        ema_sync(state, cfg.gamma)
    return state


def simulate(
    score_batches: Iterable[np.ndarray],
    cfg: ControllerConfig,
    tau_init: float = 0.5,
) -> tuple[np.ndarray, np.ndarray]:
    """Drive one controller with externally supplied score batches.

    Returns per-step (tau used for selection, realized ratio). Step indices
    start at 1. Also serves as the telemetry replay engine.
    """
    state = RouterState.zeros(1, tau_init=tau_init, buffer_capacity=cfg.buffer_capacity)
    taus, ratios = [], []
    for step, scores in enumerate(score_batches, start=1):
        scores = np.atleast_2d(scores)
        sel = build_mask(scores, state.tau)
        taus.append(state.tau)
        ratios.append(sel.ratio)
        controller_step(state, step, sel, scores, cfg)
    return np.asarray(taus), np.asarray(ratios)
