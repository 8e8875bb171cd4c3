"""Decoder-only model hosting plain and DND-wrapped layers, plus checkpoint I/O."""

from __future__ import annotations

import json
import struct
from collections import deque
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dnd_layer import RouterState, SelectionMask, dnd_layer_forward
from .transformer import ContractError, DecoderLayer, ModelConfig, OpCounter, layer_forward

CKPT_MAGIC = b"DNDCKPT\x01"


@dataclass
class LayerTrace:
    layer: int
    probs: Tensor
    sel: SelectionMask


class DndModel:
    def __init__(
        self,
        cfg: ModelConfig,
        l_start: int | None = None,
        l_end: int | None = None,
        seed: int = 0,
        beta_init: float = 0.1,
        tau_init: float = 0.5,
        buffer_capacity: int = 5,
    ):
        if (l_start is None) != (l_end is None):
            raise ContractError("give both l_start and l_end, or neither")
        if l_start is not None and not 0 <= l_start <= l_end < cfg.n_layers:
            raise ContractError(
                f"layer range [{l_start}, {l_end}] invalid for {cfg.n_layers} layers"
            )
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.l_start, self.l_end = l_start, l_end
        self.embed = Tensor(rng.normal(0, 0.02, (cfg.vocab_size, cfg.d_model)), requires_grad=True)
        self.layers = [DecoderLayer(cfg, rng, i) for i in range(cfg.n_layers)]
        self.final_norm = Tensor(np.ones(cfg.d_model), requires_grad=True)
        self.head = Tensor(rng.normal(0, 0.02, (cfg.d_model, cfg.vocab_size)), requires_grad=True)
        self.routers: dict[int, RouterState] = {
            i: RouterState.zeros(cfg.d_model, beta_init, tau_init, buffer_capacity)
            for i in self.dnd_layers
        }

    @property
    def dnd_layers(self) -> list[int]:
        if self.l_start is None:
            return []
        return list(range(self.l_start, self.l_end + 1))

    def named_parameters(self, include_routers: bool = True) -> dict[str, Tensor]:
        out = {"embed": self.embed}
        for i, layer in enumerate(self.layers):
            for k, v in layer.named_parameters().items():
                out[f"layers.{i}.{k}"] = v
        out["final_norm"] = self.final_norm
        out["head"] = self.head
        if include_routers:
            for i, r in self.routers.items():
                out[f"routers.{i}.weight"] = r.weight
                out[f"routers.{i}.bias"] = r.bias
                out[f"routers.{i}.beta"] = r.beta
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def num_parameters(self, include_routers: bool = True) -> int:
        return sum(t.data.size for t in self.named_parameters(include_routers).values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def forward(
        self,
        tokens,
        dnd: bool = True,
        counter: OpCounter | None = None,
        frozen_masks: dict[int, np.ndarray] | None = None,
    ) -> tuple[Tensor, list[LayerTrace]]:
        """Next-token logits ``[B, N, vocab]`` and one trace per DND layer."""
        tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
        B, N = tokens.shape
        if N > self.cfg.max_seq_len:
            raise ContractError(f"sequence length {N} exceeds max_seq_len {self.cfg.max_seq_len}")
        positions = np.arange(N)
        x = ad.embedding(self.embed, tokens)
        traces: list[LayerTrace] = []
        for i, layer in enumerate(self.layers):
            if dnd and i in self.routers:
                frozen = None if frozen_masks is None else frozen_masks.get(i)
                x, sel, probs = dnd_layer_forward(
                    layer, self.routers[i], x, positions, frozen_mask=frozen, counter=counter
                )
                traces.append(LayerTrace(i, probs, sel))
            else:
                x = layer_forward(layer, x, positions, counter=counter)
        x = ad.layer_norm_rms(x, self.final_norm, self.cfg.norm_eps)
        return x @ self.head, traces

    __call__ = forward

    # -- checkpoints ------------------------------------------------------
    def save(self, path, extra: dict | None = None) -> None:
        params = self.named_parameters()
        index, offset = [], 0
        for name, t in params.items():
            index.append({"name": name, "shape": list(t.shape), "offset": offset})
            offset += t.data.size
        header = {
            "format_version": 1,
            "model": asdict(self.cfg),
            "l_start": self.l_start,
            "l_end": self.l_end,
            "routers": {
                str(i): {
                    "tau": r.tau,
                    "buffer_capacity": r.buffer_capacity,
                    "ratio_buffer": list(r.ratio_buffer),
                    "topk_tau_buffer": list(r.topk_tau_buffer),
                }
                for i, r in self.routers.items()
            },
            "tensors": index,
            "extra": extra or {},
        }
        blob = json.dumps(header).encode()
        raw = np.concatenate([t.data.reshape(-1) for t in params.values()]).astype("<f8")
        with open(path, "wb") as fh:
            fh.write(CKPT_MAGIC)
            fh.write(struct.pack("<Q", len(blob)))
            fh.write(blob)
            fh.write(raw.tobytes())

    @classmethod
    def load(cls, path) -> tuple["DndModel", dict]:
        path = Path(path)
        with open(path, "rb") as fh:
            magic = fh.read(len(CKPT_MAGIC))
            if magic != CKPT_MAGIC:
                raise ContractError(f"{path}: not a DND checkpoint (magic {magic!r})")
            (n,) = struct.unpack("<Q", fh.read(8))
            header = json.loads(fh.read(n))
            raw = np.frombuffer(fh.read(), dtype="<f8")
        cfg = ModelConfig(**header["model"])
        model = cls(cfg, header["l_start"], header["l_end"])
        params = model.named_parameters()
        for entry in header["tensors"]:
            t = params[entry["name"]]
            size = int(np.prod(entry["shape"], dtype=np.int64))
            t.data = raw[entry["offset"] : entry["offset"] + size].reshape(entry["shape"]).astype(np.float64)
        for key, st in header["routers"].items():
            r = model.routers[int(key)]
            r.tau = st["tau"]
            r.buffer_capacity = st["buffer_capacity"]
            r.ratio_buffer = deque(st["ratio_buffer"], maxlen=r.buffer_capacity)
            r.topk_tau_buffer = deque(st["topk_tau_buffer"], maxlen=r.buffer_capacity)
        return model, header.get("extra", {})
