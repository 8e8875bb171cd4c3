"""Per-token selection export: CSV grid plus a self-contained HTML view."""

from __future__ import annotations

import csv
import html
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import encode, token_string
from .model import DndModel

# light orange for shallow DND layers through dark red for deep ones
SHALLOW_RGB = (253, 174, 97)
DEEP_RGB = (165, 0, 38)


@dataclass
class HeatmapExport:
    tokens: list[str]
    layers: list[int]
    probs: np.ndarray  # [tokens, layers]
    selected: np.ndarray  # bool [tokens, layers]


def compute_heatmap(model: DndModel, text: str) -> HeatmapExport:
    if not text:
        raise ValueError("heatmap text must be non-empty")
    ids = encode(text)
    if ids.size > model.cfg.max_seq_len:
        ids = ids[: model.cfg.max_seq_len]
    _, traces = model(ids[None, :])
    probs = np.stack([t.sel.probs[0] for t in traces], axis=1) if traces else np.zeros((ids.size, 0))
    sel = np.stack([t.sel.mask[0] for t in traces], axis=1) if traces else np.zeros((ids.size, 0), bool)
    return HeatmapExport([token_string(int(t)) for t in ids], [t.layer for t in traces], probs, sel)


def write_csv(hm: HeatmapExport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["token_index", "token", "layer", "p", "selected"])
        for i, tok in enumerate(hm.tokens):
            for j, layer in enumerate(hm.layers):
                w.writerow([i, tok, layer, repr(float(hm.probs[i, j])), int(hm.selected[i, j])])


def _colour(depth: float, strength: float) -> str:
    rgb = [round(s + (d - s) * depth) for s, d in zip(SHALLOW_RGB, DEEP_RGB)]
    return f"rgba({rgb[0]},{rgb[1]},{rgb[2]},{0.25 + 0.75 * strength:.3f})"


def render_html(hm: HeatmapExport) -> str:
    n_layers = len(hm.layers)
    spans = []
    for i, tok in enumerate(hm.tokens):
        hits = np.nonzero(hm.selected[i])[0]
        title = "; ".join(
            f"L{layer}: p={hm.probs[i, j]:.4f}{' *' if hm.selected[i, j] else ''}"
            for j, layer in enumerate(hm.layers)
        )
        shown = html.escape(tok).replace("\\x0a", "&#8629;<br>")
        if hits.size:
            # mean relative depth of the selecting layers sets the shade
            depth = float(hits.mean() / max(n_layers - 1, 1))
            style = f' style="background:{_colour(depth, hits.size / n_layers)}"'
        else:
            style = ""
        spans.append(f'<span class="tok" title="{html.escape(title)}"{style}>{shown}</span>')
    legend = "".join(
        f'<span class="tok" style="background:{_colour(j / max(n_layers - 1, 1), 1.0)}">layer {layer}</span> '
        for j, layer in enumerate(hm.layers)
    )
    return f"""<!DOCTYPE html>
<html><head><meta charset="utf-8"><title>DND token selection</title>
<style>
body {{ font-family: monospace; line-height: 1.9; max-width: 60em; margin: 2em auto; }}
.tok {{ white-space: pre; padding: 1px 0; border-radius: 2px; }}
.legend {{ margin-bottom: 1em; }}
</style></head>
<body>
<div class="legend">Shade: shallow to deep selecting layer. {legend}</div>
<div>{''.join(spans)}</div>
</body></html>
"""


def export_heatmap(model: DndModel, text: str, out_prefix) -> tuple[Path, Path]:
    hm = compute_heatmap(model, text)
    out_prefix = Path(out_prefix)
    csv_path = out_prefix.with_suffix(".csv")
    html_path = out_prefix.with_suffix(".html")
    write_csv(hm, csv_path)
    html_path.write_text(render_html(hm), encoding="utf-8")
    return csv_path, html_path
