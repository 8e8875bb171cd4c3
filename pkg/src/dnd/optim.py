from __future__ import annotations

import math

import numpy as np

from .autodiff import Tensor
from .config import OptimConfig


def cosine_lr(step: int, total: int, cfg: OptimConfig) -> float:
    if cfg.warmup_steps and step <= cfg.warmup_steps:
        return cfg.lr_max * step / cfg.warmup_steps
    span = max(total - cfg.warmup_steps, 1)
    t = min(max(step - cfg.warmup_steps, 0) / span, 1.0)
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + math.cos(math.pi * t))


def clip_grad_norm(params: list[Tensor], max_norm: float) -> float:
    sq = 0.0
    for p in params:
        if p.grad is not None:
            sq += float((p.grad * p.grad).sum())
    norm = math.sqrt(sq)
    if max_norm > 0 and norm > max_norm:
        c = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * c
    return norm


class AdamW:
    """Adam with decoupled weight decay; decay applies to matrices only."""

    def __init__(self, named: dict[str, Tensor], cfg: OptimConfig):
        self.named = named
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in named.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in named.items()}

    def step(self, lr: float) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1**self.t
        bc2 = 1.0 - c.beta2**self.t
        for k, p in self.named.items():
            if p.grad is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= c.beta1
            m += (1.0 - c.beta1) * p.grad
            v *= c.beta2
            v += (1.0 - c.beta2) * p.grad * p.grad
            if p.data.ndim >= 2 and c.weight_decay:
                p.data = p.data * (1.0 - lr * c.weight_decay)
            p.data = p.data - lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)
