"""Route, mask, pack, nested pass, unpack and gated fusion for one decoder layer."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .transformer import ContractError, DecoderLayer, OpCounter, layer_forward

TAU_EPS = 1e-4


@dataclass
class RouterState:
    """Per-layer router parameters plus the threshold controller's state."""

    weight: Tensor
    bias: Tensor
    beta: Tensor
    tau: float = 0.5
    buffer_capacity: int = 5
    ratio_buffer: deque = field(default=None)
    topk_tau_buffer: deque = field(default=None)

    def __post_init__(self):
        if self.ratio_buffer is None:
            self.ratio_buffer = deque(maxlen=self.buffer_capacity)
        if self.topk_tau_buffer is None:
            self.topk_tau_buffer = deque(maxlen=self.buffer_capacity)

    @classmethod
    def zeros(cls, d_model: int, beta_init: float = 0.1, tau_init: float = 0.5, buffer_capacity: int = 5):
        return cls(
            weight=Tensor(np.zeros(d_model), requires_grad=True),
            bias=Tensor(np.zeros(()), requires_grad=True),
            beta=Tensor(np.asarray(beta_init), requires_grad=True),
            tau=tau_init,
            buffer_capacity=buffer_capacity,
        )

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias, self.beta]


@dataclass
class SelectionMask:
    probs: np.ndarray  # [B, N]
    mask: np.ndarray  # bool [B, N]
    selected_counts: np.ndarray  # [B]
    lengths: np.ndarray  # tokens per row

    @property
    def ratio(self) -> float:
        total = int(self.lengths.sum())
        return float(self.selected_counts.sum()) / total if total else 0.0


@dataclass
class PackedBatch:
    data: Tensor  # [B, max_sel, d], zero padded
    lengths: np.ndarray  # valid rows per sequence
    src: np.ndarray  # flat row index into the original [B*N]
    dst: np.ndarray  # flat row index into the packed [B*max_sel]
    batch_shape: tuple[int, int]  # (B, N) of the original


def router_logits(router: RouterState, x_v: Tensor) -> Tensor:
    B, N, d = x_v.shape
    w = ad.reshape(router.weight, (d, 1))
    return ad.reshape(x_v @ w, (B, N)) + router.bias


def route(router: RouterState, x_v: Tensor) -> Tensor:
    """Per-token selection probability, independent across tokens."""
    return ad.sigmoid(router_logits(router, x_v))


def build_mask(probs, tau: float, lengths: np.ndarray | None = None) -> SelectionMask:
    p = probs.data if isinstance(probs, Tensor) else np.asarray(probs, dtype=np.float64)
    B, N = p.shape
    if lengths is None:
        lengths = np.full(B, N, dtype=np.int64)
    valid = np.arange(N)[None, :] < np.asarray(lengths)[:, None]
    mask = (p > tau) & valid
    return SelectionMask(probs=p, mask=mask, selected_counts=mask.sum(axis=1), lengths=np.asarray(lengths))


def pack(x_v: Tensor, sel: SelectionMask) -> PackedBatch:
    B, N, d = x_v.shape
    counts = sel.mask.sum(axis=1)
    width = int(counts.max()) if B else 0
    b_idx, t_idx = np.nonzero(sel.mask)  # row-major: original order within each row
    slot = np.concatenate([np.arange(c) for c in counts]) if b_idx.size else np.zeros(0, np.int64)
    src = b_idx * N + t_idx
    dst = b_idx * width + slot
    data = ad.move_rows(x_v, src, dst, (B, width, d))
    return PackedBatch(data=data, lengths=counts, src=src, dst=dst, batch_shape=(B, N))


def nested_pass(layer: DecoderLayer, packed: PackedBatch, counter: OpCounter | None = None) -> Tensor:
    """Run the same layer on the packed tokens with fresh positions 0..n-1."""
    width = packed.data.shape[1]
    return layer_forward(
        layer,
        packed.data,
        np.arange(width),
        valid_lengths=packed.lengths,
        counter=counter,
        kind="nested",
    )


def unpack(y_packed: Tensor, packed: PackedBatch) -> Tensor:
    B, N = packed.batch_shape
    if y_packed.shape[:2] != packed.data.shape[:2]:
        raise ContractError(f"unpack: {y_packed.shape} does not match packed {packed.data.shape}")
    return ad.move_rows(y_packed, packed.dst, packed.src, (B, N, y_packed.shape[-1]))


def fuse(x_v: Tensor, x_d: Tensor, probs: Tensor, sel: SelectionMask, beta: Tensor) -> Tensor:
    """Selected: (beta*p) x_v + (1 - beta*p) x_d. Unselected: x_v."""
    if x_v.shape != x_d.shape or probs.shape != x_v.shape[:2]:
        raise ContractError(f"fuse: shapes {x_v.shape}, {x_d.shape}, {probs.shape}")
    m = sel.mask.astype(np.float64)
    gate = probs * beta
    keep = gate * m + (1.0 - m)
    take = (1.0 - gate) * m
    B, N = probs.shape
    return ad.reshape(keep, (B, N, 1)) * x_v + ad.reshape(take, (B, N, 1)) * x_d


def dnd_layer_forward(
    layer: DecoderLayer,
    router: RouterState,
    x: Tensor,
    positions,
    frozen_mask: np.ndarray | None = None,
    counter: OpCounter | None = None,
):
    """Returns ``(output, SelectionMask, probs)``.

    ``frozen_mask`` replaces the threshold decision; used for gradient checks
    where a perturbation could otherwise flip a token.
    """
    x_v = layer_forward(layer, x, positions, counter=counter)
    probs = route(router, x_v)
    if frozen_mask is None:
        sel = build_mask(probs, router.tau)
    else:
        m = np.asarray(frozen_mask, dtype=bool)
        sel = SelectionMask(probs.data, m, m.sum(axis=1), np.full(m.shape[0], m.shape[1]))
    if not sel.mask.any():
        return x_v, sel, probs
    packed = pack(x_v, sel)
    x_d = unpack(nested_pass(layer, packed, counter), packed)
    return fuse(x_v, x_d, probs, sel, router.beta), sel, probs
