"""Run configuration: TOML file plus ``section.key=value`` overrides."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import tomli

from .controller import ControllerConfig
from .transformer import ContractError, ModelConfig


@dataclass
class OptimConfig:
    lr_max: float = 3e-4
    lr_min: float = 6e-5
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1
    grad_clip: float = 1.0
    warmup_steps: int = 0


@dataclass
class DndConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    optimizer: OptimConfig = field(default_factory=OptimConfig)
    data: str | None = None
    dnd: bool = True
    l_start: int | None = None
    l_end: int | None = None
    lambda_sd: float = 3e-4
    lambda_dp: float = 0.02
    lambda_z: float = 0.0
    beta_init: float = 0.1
    tau_init: float = 0.5
    seed: int = 0
    batch_size: int = 8
    seq_len: int = 64
    steps: int = 1000
    log_scores: bool = False
    count_ops: bool = True
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.l_start is None and self.l_end is None:
            self.l_start, self.l_end = default_layer_range(self.model.n_layers)
        n = self.model.n_layers
        if not 0 <= self.l_start <= self.l_end < n:
            raise ContractError(f"DND layer range [{self.l_start}, {self.l_end}] invalid for {n} layers")
        if n >= 4 and (self.l_start < 1 or self.l_end > n - 2):
            raise ContractError("first and last layers must stay plain when n_layers >= 4")
        if self.seq_len > self.model.max_seq_len:
            raise ContractError(f"seq_len {self.seq_len} exceeds max_seq_len {self.model.max_seq_len}")
        if self.model.vocab_size < 256:
            raise ContractError("byte-level data needs vocab_size >= 256")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DndConfig":
        d = dict(d)
        sub = {
            "model": ModelConfig,
            "controller": ControllerConfig,
            "optimizer": OptimConfig,
        }
        for key, typ in sub.items():
            if key in d and not is_dataclass(d[key]):
                d[key] = _build(typ, d[key])
        return _build(cls, d)


def default_layer_range(n_layers: int) -> tuple[int, int]:
    """Keep ceil(n/6) plain layers at each end (at least one DND layer)."""
    if n_layers < 3:
        return 0, n_layers - 1
    keep = math.ceil(n_layers / 6)
    keep = min(keep, (n_layers - 1) // 2)
    return keep, n_layers - 1 - keep


def _build(typ, d: dict):
    known = {f.name for f in fields(typ)}
    unknown = set(d) - known
    if unknown:
        raise ContractError(f"unknown {typ.__name__} keys: {sorted(unknown)}")
    return typ(**d)


def _parse_value(text: str):
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """Apply ``a.b=value`` strings onto a nested dict; values use TOML syntax."""
    raw = {k: dict(v) if isinstance(v, dict) else v for k, v in raw.items()}
    for item in overrides:
        if "=" not in item:
            raise ContractError(f"override {item!r} is not key=value")
        key, val = item.split("=", 1)
        parts = key.strip().split(".")
        node = raw
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = _parse_value(val.strip())
    return raw


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> DndConfig:
    raw: dict = {}
    if path is not None:
        with open(path, "rb") as fh:
            raw = tomli.load(fh)
    raw = apply_overrides(raw, overrides or [])
    return DndConfig.from_dict(raw)
