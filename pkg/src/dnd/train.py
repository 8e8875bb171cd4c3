"""Training loop, evaluation and telemetry replay."""

from __future__ import annotations

import json
import logging
import math
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import DndConfig
from .controller import ControllerConfig, controller_step, simulate
from .data import Windows
from .flops import FlopsParams, overhead_report
from .model import DndModel
from .objectives import combined_loss
from .optim import AdamW, clip_grad_norm, cosine_lr
from .transformer import ContractError, OpCounter

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, last_records: list[dict]):
        super().__init__(message)
        self.last_records = last_records


@dataclass
class TrainResult:
    model: DndModel
    records: list[dict] = field(default_factory=list)
    checkpoint: Path | None = None
    telemetry: Path | None = None


def build_model(cfg: DndConfig) -> DndModel:
    l_start, l_end = (cfg.l_start, cfg.l_end) if cfg.dnd else (None, None)
    return DndModel(
        cfg.model,
        l_start,
        l_end,
        seed=cfg.seed,
        beta_init=cfg.beta_init,
        tau_init=cfg.tau_init,
        buffer_capacity=cfg.controller.buffer_capacity,
    )


def measured_overhead(counter: OpCounter, layer: int) -> float:
    """Nested-pass FLOPs of one layer as a percentage of its vanilla FLOPs."""
    nested = sum(counter.total(f"nested_{p}", layer) for p in ("proj", "attn", "ffn"))
    vanilla = sum(counter.total(f"vanilla_{p}", layer) for p in ("proj", "attn", "ffn"))
    return 100.0 * nested / vanilla if vanilla else 0.0


def predicted_overhead(cfg: DndConfig, ratio: float) -> float:
    """Analyzer prediction for this model shape (dense FFN: one active expert)."""
    if ratio <= 0:
        return 0.0
    m = cfg.model
    p = FlopsParams(
        S=cfg.seq_len,
        H=m.d_model,
        N_h=m.n_heads,
        d_h=m.d_head,
        L_total=m.n_layers,
        L_dnd=cfg.l_end - cfg.l_start + 1,
        I_moe=m.d_ff,
        k=1,
        r=min(ratio, 1.0),
    )
    return overhead_report(p).per_layer_overhead


def _layer_record(model: DndModel, trace, tau_before: float, log_scores: bool) -> dict:
    r = model.routers[trace.layer]
    p = trace.probs.data
    rec = {
        "layer": trace.layer,
        "ratio": trace.sel.ratio,
        "tau_before": tau_before,
        "tau": r.tau,
        "beta": float(r.beta.data),
        "mean_p": float(p.mean()),
        "std_p": float(p.std()),
    }
    if log_scores:
        rec["scores"] = p.reshape(-1).tolist()
    return rec


def train(
    cfg: DndConfig,
    ids: np.ndarray,
    out_dir: str | Path | None = None,
    progress_every: int = 0,
) -> TrainResult:
    windows = Windows(ids, cfg.seq_len)
    model = build_model(cfg)
    named = model.named_parameters()
    opt = AdamW(named, cfg.optimizer)
    rng = np.random.default_rng(cfg.seed + 1)
    out = Path(out_dir) if out_dir is not None else None
    tel_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        tel_fh = open(out / "telemetry.jsonl", "w")
        header = {"type": "header", "config": cfg.to_dict(), "dnd_layers": model.dnd_layers}
        tel_fh.write(json.dumps(header) + "\n")
    records: list[dict] = []
    recent: deque = deque(maxlen=10)
    try:
        for step in range(1, cfg.steps + 1):
            t0 = time.perf_counter()
            x, y, w = windows.batch(rng.integers(0, len(windows), cfg.batch_size))
            counter = OpCounter() if cfg.count_ops else None
            logits, traces = model(x, counter=counter)
            ce = ad.cross_entropy(logits, y, w)
            losses = combined_loss(
                ce, [t.probs for t in traces], cfg.lambda_sd, cfg.lambda_dp, cfg.lambda_z
            )
            if not math.isfinite(float(losses.total.data)):
                raise TrainingDiverged(f"non-finite loss at step {step}", list(recent))
            model.zero_grad()
            losses.total.backward()
            gnorm = clip_grad_norm(list(named.values()), cfg.optimizer.grad_clip)
            lr = cosine_lr(step, cfg.steps, cfg.optimizer)
            opt.step(lr)
            for r in model.routers.values():
                r.beta.data = np.clip(r.beta.data, 0.0, 1.0)
            layers = []
            for t in traces:
                tau_before = model.routers[t.layer].tau
                controller_step(model.routers[t.layer], step, t.sel, t.probs.data, cfg.controller)
                layers.append(_layer_record(model, t, tau_before, cfg.log_scores))
            dt = time.perf_counter() - t0
            rec = {"step": step, **losses.as_dict(), "lr": lr, "grad_norm": gnorm}
            rec["tokens_per_sec"] = float(w.sum()) / dt if dt > 0 else 0.0
            rec["layers"] = layers
            if counter is not None:
                for entry in layers:
                    entry["op_overhead"] = measured_overhead(counter, entry["layer"])
                rec["flops"] = counter.total()
            records.append(rec)
            recent.append(rec)
            if tel_fh is not None:
                tel_fh.write(json.dumps(rec) + "\n")
            if progress_every and step % progress_every == 0:
                ratios = " ".join(f"{l['ratio']:.3f}" for l in layers)
                log.info("step %d ce %.4f total %.4f ratios %s", step, rec["ce"], rec["total"], ratios)
            if out is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                model.save(out / f"ckpt_{step:06d}.bin", extra={"config": cfg.to_dict(), "step": step})
    finally:
        if tel_fh is not None:
            tel_fh.close()
    ckpt = None
    if out is not None:
        ckpt = out / "model.bin"
        model.save(ckpt, extra={"config": cfg.to_dict(), "step": cfg.steps})
    return TrainResult(model, records, ckpt, out / "telemetry.jsonl" if out is not None else None)


def evaluate(
    model: DndModel,
    ids: np.ndarray,
    seq_len: int,
    batch_size: int = 8,
    max_windows: int | None = None,
) -> dict:
    """Token-weighted CE and per-layer selection ratio with thresholds frozen."""
    if int(ids.max()) >= model.cfg.vocab_size:
        raise ContractError(
            f"corpus token id {int(ids.max())} outside model vocab {model.cfg.vocab_size}"
        )
    windows = Windows(ids, seq_len)
    n = len(windows) if max_windows is None else min(max_windows, len(windows))
    nll = tokens = 0.0
    sel = {i: 0 for i in model.dnd_layers}
    seen = {i: 0 for i in model.dnd_layers}
    for start in range(0, n, batch_size):
        x, y, w = windows.batch(np.arange(start, min(start + batch_size, n)))
        logits, traces = model(x)
        ce = ad.cross_entropy(logits, y, w)
        nll += float(ce.data) * w.sum()
        tokens += w.sum()
        for t in traces:
            sel[t.layer] += int(t.sel.selected_counts.sum())
            seen[t.layer] += int(t.sel.lengths.sum())
    ce = nll / tokens
    return {
        "ce": ce,
        "perplexity": math.exp(ce),
        "tokens": int(tokens),
        "ratios": {str(i): (sel[i] / seen[i] if seen[i] else 0.0) for i in model.dnd_layers},
    }


def read_telemetry(path) -> tuple[dict, list[dict]]:
    header, records = {}, []
    with open(path) as fh:
        for line in fh:
            obj = json.loads(line)
            if obj.get("type") == "header":
                header = obj
            else:
                records.append(obj)
    return header, records


def replay_telemetry(path) -> dict:
    """Recompute every layer's threshold trajectory from logged scores.

    Returns per-layer logged and replayed trajectories plus a match flag.
    """
    header, records = read_telemetry(path)
    cfg = header["config"]
    ccfg = ControllerConfig(**cfg["controller"])
    batch = cfg["batch_size"]
    out = {}
    for layer in header["dnd_layers"]:
        entries = [next(l for l in r["layers"] if l["layer"] == layer) for r in records]
        if entries and "scores" not in entries[0]:
            raise ContractError("telemetry has no logged scores; train with log_scores=true")
        scores = (np.asarray(e["scores"]).reshape(batch, -1) for e in entries)
        taus_used, _ = simulate(scores, ccfg, tau_init=cfg["tau_init"])
        logged_before = np.array([e["tau_before"] for e in entries])
        logged_after = np.array([e["tau"] for e in entries])
        match = np.array_equal(taus_used, logged_before) and np.array_equal(
            taus_used[1:], logged_after[:-1]
        )
        out[str(layer)] = {"logged": logged_before.tolist(), "replayed": taus_used.tolist(), "match": bool(match)}
    return out
