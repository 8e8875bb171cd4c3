from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import fields
from pathlib import Path

import tomli

from .config import load_config
from .data import ingest
from .flops import QWEN3_30B_A3B, FlopsParams, format_report, overhead_report
from .heatmap import export_heatmap
from .model import DndModel
from .train import TrainingDiverged, evaluate, replay_telemetry, train


def cmd_train(args) -> int:
    overrides = list(args.set or [])
    for flag in ("steps", "seed", "batch_size", "seq_len"):
        val = getattr(args, flag)
        if val is not None:
            overrides.append(f"{flag}={val}")
    cfg = load_config(args.config, overrides)
    data = args.data or cfg.data
    if not data:
        print("error: no corpus given (--data or `data` in the config)", file=sys.stderr)
        return 2
    ids = ingest(data)
    if ids.size == 0:
        print(f"error: corpus {data} is empty", file=sys.stderr)
        return 2
    t0 = time.time()
    try:
        res = train(cfg, ids, args.out, progress_every=args.log_every)
    except TrainingDiverged as exc:
        print(f"error: {exc}; last records:", file=sys.stderr)
        for rec in exc.last_records:
            print(json.dumps(rec), file=sys.stderr)
        return 1
    last = res.records[-1]
    summary = {
        "steps": cfg.steps,
        "seconds": round(time.time() - t0, 2),
        "final_ce": last["ce"],
        "final_total": last["total"],
        "ratios": {str(l["layer"]): l["ratio"] for l in last["layers"]},
        "checkpoint": str(res.checkpoint),
        "telemetry": str(res.telemetry),
    }
    print(json.dumps(summary, indent=2))
    return 0


def cmd_eval(args) -> int:
    model, extra = DndModel.load(args.ckpt)
    seq_len = args.seq_len or extra.get("config", {}).get("seq_len", model.cfg.max_seq_len)
    report = evaluate(model, ingest(args.data), seq_len, args.batch_size, args.max_windows)
    print(json.dumps(report, indent=2))
    return 0


def cmd_flops(args) -> int:
    values = {f.name: getattr(QWEN3_30B_A3B, f.name) for f in fields(FlopsParams)}
    if args.config:
        with open(args.config, "rb") as fh:
            raw = tomli.load(fh)
        values.update(raw.get("flops", raw))
    for name in values:
        flag = getattr(args, name, None)
        if flag is not None:
            values[name] = flag
    p = FlopsParams(**values)
    rep = overhead_report(p)
    print(format_report(p, rep))
    print(json.dumps({"params": values, "report": rep.as_dict()}, indent=2))
    return 0


def cmd_heatmap(args) -> int:
    model, _ = DndModel.load(args.ckpt)
    text = args.text
    if Path(text).is_file():
        text = Path(text).read_text(encoding="utf-8")
    csv_path, html_path = export_heatmap(model, text, args.out)
    print(f"wrote {csv_path} and {html_path}")
    return 0


def cmd_replay(args) -> int:
    result = replay_telemetry(args.telemetry)
    ok = all(v["match"] for v in result.values())
    for layer, v in result.items():
        status = "match" if v["match"] else "MISMATCH"
        print(f"layer {layer}: {len(v['replayed'])} steps, final tau {v['replayed'][-1]:.6f} [{status}]")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dnd", description="Dynamic nested depth toy transformer")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on a byte-level corpus")
    p.add_argument("--config", help="TOML config file")
    p.add_argument("--data", help="corpus path (overrides `data` in the config)")
    p.add_argument("--out", default="runs/latest", help="output directory")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override, e.g. model.d_model=64")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--seq-len", dest="seq_len", type=int)
    p.add_argument("--log-every", type=int, default=100)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint with thresholds frozen")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--seq-len", dest="seq_len", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=8)
    p.add_argument("--max-windows", dest="max_windows", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("flops", help="analytical FLOPs overhead report")
    p.add_argument("--config", help="TOML file with a [flops] table")
    for f in fields(FlopsParams):
        p.add_argument(f"--{f.name}", type=float if f.name == "r" else int)
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("heatmap", help="export per-token selection as CSV + HTML")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--text", required=True, help="literal text or a path to a text file")
    p.add_argument("--out", default="heatmap")
    p.set_defaults(func=cmd_heatmap)

    p = sub.add_parser("replay", help="recompute threshold trajectories from telemetry")
    p.add_argument("--telemetry", required=True)
    p.set_defaults(func=cmd_replay)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
