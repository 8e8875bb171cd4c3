"""Pre-norm decoder block: RMSNorm, rotary causal attention, SwiGLU feed-forward."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class ContractError(ValueError):
    pass


@dataclass
class ModelConfig:
    vocab_size: int = 258
    d_model: int = 128
    n_heads: int = 4
    d_head: int = 32
    n_layers: int = 4
    d_ff: int = 344
    max_seq_len: int = 256
    rope_base: float = 10000.0
    norm_eps: float = 1e-6

    def __post_init__(self):
        if self.n_heads * self.d_head != self.d_model:
            raise ContractError(
                f"n_heads * d_head = {self.n_heads * self.d_head} != d_model = {self.d_model}"
            )
        if self.d_head % 2:
            raise ContractError("rotary encoding needs an even d_head")
        if self.max_seq_len < 2:
            raise ContractError("max_seq_len must be at least 2")


class OpCounter:
    """Tallies multiply-add FLOPs (2 per MAC) per (kind, layer) label.

    Only valid (non-padding) tokens are charged, so the count reflects the
    work a per-sequence implementation would do.
    """

    def __init__(self):
        self.counts: dict[tuple[str, int], float] = defaultdict(float)

    def add(self, kind: str, layer: int, flops: float) -> None:
        self.counts[(kind, layer)] += flops

    def total(self, kind: str | None = None, layer: int | None = None) -> float:
        return sum(
            v
            for (k, l), v in self.counts.items()
            if (kind is None or k == kind) and (layer is None or l == layer)
        )


class DecoderLayer:
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, index: int = 0):
        d, f = cfg.d_model, cfg.d_ff
        std = 0.02
        out_std = std / math.sqrt(2 * cfg.n_layers)
        self.cfg = cfg
        self.index = index
        self.wq = Tensor(rng.normal(0, std, (d, d)), requires_grad=True)
        self.wk = Tensor(rng.normal(0, std, (d, d)), requires_grad=True)
        self.wv = Tensor(rng.normal(0, std, (d, d)), requires_grad=True)
        self.wo = Tensor(rng.normal(0, out_std, (d, d)), requires_grad=True)
        self.w_gate = Tensor(rng.normal(0, std, (d, f)), requires_grad=True)
        self.w_up = Tensor(rng.normal(0, std, (d, f)), requires_grad=True)
        self.w_down = Tensor(rng.normal(0, out_std, (f, d)), requires_grad=True)
        self.attn_norm = Tensor(np.ones(d), requires_grad=True)
        self.ffn_norm = Tensor(np.ones(d), requires_grad=True)

    def named_parameters(self) -> dict[str, Tensor]:
        return {
            "wq": self.wq,
            "wk": self.wk,
            "wv": self.wv,
            "wo": self.wo,
            "w_gate": self.w_gate,
            "w_up": self.w_up,
            "w_down": self.w_down,
            "attn_norm": self.attn_norm,
            "ffn_norm": self.ffn_norm,
        }


def rope_tables(positions: np.ndarray, d_head: int, base: float = 10000.0):
    inv_freq = base ** (-np.arange(0, d_head, 2, dtype=np.float64) / d_head)
    ang = positions[..., None].astype(np.float64) * inv_freq
    return np.cos(ang), np.sin(ang)


def _check_positions(positions: np.ndarray, B: int, N: int, lengths: np.ndarray) -> np.ndarray:
    positions = np.asarray(positions, dtype=np.int64)
    if positions.ndim == 1:
        positions = np.broadcast_to(positions, (B, positions.shape[0]))
    if positions.shape != (B, N):
        raise ContractError(f"positions shape {positions.shape} does not match tokens ({B}, {N})")
    for b in range(B):
        n = int(lengths[b])
        if n > 1 and np.any(np.diff(positions[b, :n]) <= 0):
            raise ContractError(f"positions must be strictly increasing (row {b})")
    return positions


def layer_forward(
    layer: DecoderLayer,
    x: Tensor,
    positions,
    valid_lengths: np.ndarray | None = None,
    counter: OpCounter | None = None,
    kind: str = "vanilla",
) -> Tensor:
    """Residual block ``x + Attn(norm x)`` then ``+ FFN(norm .)``.

    Rows at index >= ``valid_lengths[b]`` are padding: no valid token attends to
    them and each padding row attends only to itself.
    """
    cfg = layer.cfg
    B, N, d = x.shape
    H, dh = cfg.n_heads, cfg.d_head
    if N > cfg.max_seq_len:
        raise ContractError(f"sequence length {N} exceeds max_seq_len {cfg.max_seq_len}")
    lengths = np.full(B, N) if valid_lengths is None else np.asarray(valid_lengths)
    positions = _check_positions(positions, B, N, lengths)

    h = ad.layer_norm_rms(x, layer.attn_norm, cfg.norm_eps)
    q = (h @ layer.wq).reshape(B, N, H, dh).transpose(0, 2, 1, 3)
    k = (h @ layer.wk).reshape(B, N, H, dh).transpose(0, 2, 1, 3)
    v = (h @ layer.wv).reshape(B, N, H, dh).transpose(0, 2, 1, 3)
    cos, sin = rope_tables(positions, dh, cfg.rope_base)
    cos, sin = cos[:, None], sin[:, None]
    q = ad.rope(q, cos, sin)
    k = ad.rope(k, cos, sin)

    idx = np.arange(N)
    causal = idx[None, :] <= idx[:, None]
    key_ok = idx[None, :] < lengths[:, None]
    allowed = causal[None] & (key_ok[:, None, :] | np.eye(N, dtype=bool)[None])
    scores = ad.scale(q @ k.transpose(0, 1, 3, 2), 1.0 / math.sqrt(dh))
    att = ad.softmax_rows(scores, allowed[:, None])
    ctx = (att @ v).transpose(0, 2, 1, 3).reshape(B, N, d)
    x = x + ctx @ layer.wo

    h2 = ad.layer_norm_rms(x, layer.ffn_norm, cfg.norm_eps)
    gated = ad.silu(h2 @ layer.w_gate) * (h2 @ layer.w_up)
    x = x + gated @ layer.w_down

    if counter is not None:
        n = lengths.astype(np.float64)
        proj = 8.0 * d * d * n.sum()
        attn = 4.0 * H * dh * (n * n).sum()
        ffn = 6.0 * d * cfg.d_ff * n.sum()
        counter.add(f"{kind}_proj", layer.index, proj)
        counter.add(f"{kind}_attn", layer.index, attn)
        counter.add(f"{kind}_ffn", layer.index, ffn)
    return x
