"""Analytical FLOPs overhead of a nested re-processing pass.

Per-layer cost is attention (quadratic in S) plus the expert MLP (linear in
S). Re-processing a fraction r of tokens costs r^2 of the former and r of the
latter.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass


@dataclass(frozen=True)
class FlopsParams:
    S: int
    H: int
    N_h: int
    d_h: int
    L_total: int
    L_dnd: int
    I_moe: int
    k: int
    r: float

    def __post_init__(self):
        for name in ("S", "H", "N_h", "d_h", "L_total", "L_dnd", "I_moe"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.k < 0:
            raise ValueError("k must be non-negative")
        if not 0 < self.r <= 1:
            raise ValueError(f"r must be in (0, 1], got {self.r}")
        if self.L_dnd > self.L_total:
            raise ValueError("L_dnd cannot exceed L_total")


# Qwen3-30B-A3B shape at 16k context, 20% recomputation on 40 of 48 layers.
QWEN3_30B_A3B = FlopsParams(
    S=16384, H=2048, N_h=32, d_h=128, L_total=48, L_dnd=40, I_moe=768, k=8, r=0.2
)


@dataclass
class FlopsReport:
    attn_flops: float
    moe_flops: float
    layer_flops: float
    added_flops: float
    per_layer_overhead: float  # percent
    total_overhead: float  # percent

    def as_dict(self) -> dict:
        return asdict(self)


def flops_attention(p: FlopsParams) -> int:
    # python ints never overflow
    return 4 * p.N_h * p.d_h * p.S * p.S


def flops_moe(p: FlopsParams) -> int:
    return 6 * p.S * p.k * p.H * p.I_moe


def overhead_report(p: FlopsParams) -> FlopsReport:
    attn = flops_attention(p)
    moe = flops_moe(p)
    layer = attn + moe
    added = p.r**2 * attn + p.r * moe
    per_layer = 100.0 * added / layer
    return FlopsReport(
        attn_flops=float(attn),
        moe_flops=float(moe),
        layer_flops=float(layer),
        added_flops=added,
        per_layer_overhead=per_layer,
        total_overhead=per_layer * p.L_dnd / p.L_total,
    )


def format_report(p: FlopsParams, rep: FlopsReport) -> str:
    rows = [
        ("attention FLOPs / layer", f"{rep.attn_flops:.4e}"),
        ("MoE MLP FLOPs / layer", f"{rep.moe_flops:.4e}"),
        ("layer FLOPs", f"{rep.layer_flops:.4e}"),
        ("added FLOPs (nested pass)", f"{rep.added_flops:.4e}"),
        ("per-layer overhead", f"{rep.per_layer_overhead:.3f}%"),
        (f"total overhead ({p.L_dnd}/{p.L_total} layers)", f"{rep.total_overhead:.3f}%"),
    ]
    w = max(len(k) for k, _ in rows)
    return "\n".join(f"{k:<{w}}  {v:>12}" for k, v in rows)
