"""Router-shaping auxiliary losses and their combination with the LM loss."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

from . import autodiff as ad
from .autodiff import Tensor

LAMBDA_SD = 3e-4
LAMBDA_DP = 0.02


@dataclass
class LossBreakdown:
    total: Tensor
    ce: float
    l_sd: float
    l_dp: float
    l_router: float
    per_layer_sd: list[float] = field(default_factory=list)
    per_layer_dp: list[float] = field(default_factory=list)
    l_z: float = 0.0

    def as_dict(self) -> dict:
        return {
            "total": float(self.total.data),
            "ce": self.ce,
            "l_sd": self.l_sd,
            "l_dp": self.l_dp,
            "l_router": self.l_router,
            "l_z": self.l_z,
        }


def _sd_per_layer(p: Tensor) -> Tensor | None:
    if p.shape[-1] == 0:
        return None
    q = p / p.sum(axis=1, keepdims=True)
    neg_entropy = (q * ad.log(q)).sum(axis=1)
    return neg_entropy.mean()


def _dp_per_layer(p: Tensor) -> Tensor:
    return ad.square(p - 0.5).mean()


def score_dispersion_loss(probs_per_layer: Sequence[Tensor]) -> Tensor:
    """Negative entropy of per-sequence normalized scores, summed over layers.

    Sequences are averaged over the batch.
    """
    terms = [t for t in (_sd_per_layer(p) for p in probs_per_layer) if t is not None]
    return _sum(terms)


def distribution_preservation_loss(probs_per_layer: Sequence[Tensor]) -> Tensor:
    return _sum([_dp_per_layer(p) for p in probs_per_layer])


def router_z_loss(probs_per_layer: Sequence[Tensor]) -> Tensor:
    """Squared router logit, recovered from p. Only for ablation runs."""
    terms = []
    for p in probs_per_layer:
        logit = ad.log(p) - ad.log(1.0 - p)
        terms.append(ad.square(logit).mean())
    return _sum(terms)


def _sum(terms: list[Tensor]) -> Tensor:
    if not terms:
        return Tensor(0.0)
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out


def combined_loss(
    ce: Tensor,
    probs_per_layer: Sequence[Tensor],
    lambda_sd: float = LAMBDA_SD,
    lambda_dp: float = LAMBDA_DP,
    lambda_z: float = 0.0,
) -> LossBreakdown:
    if lambda_sd < 0 or lambda_dp < 0 or lambda_z < 0:
        raise ValueError("loss weights must be non-negative")
    sd_terms = [_sd_per_layer(p) for p in probs_per_layer]
    dp_terms = [_dp_per_layer(p) for p in probs_per_layer]
    l_sd = _sum([t for t in sd_terms if t is not None])
    l_dp = _sum(dp_terms)
    l_router = ad.scale(l_sd, lambda_sd) + ad.scale(l_dp, lambda_dp)
    l_z = 0.0
    if lambda_z:
        z = router_z_loss(probs_per_layer)
        l_z = float(z.data)
        l_router = l_router + ad.scale(z, lambda_z)
    total = ce + l_router
    return LossBreakdown(
        total=total,
        ce=float(ce.data),
        l_sd=float(l_sd.data),
        l_dp=float(l_dp.data),
        l_router=float(l_router.data),
        per_layer_sd=[float(t.data) for t in sd_terms if t is not None],
        per_layer_dp=[float(t.data) for t in dp_terms],
        l_z=l_z,
    )
