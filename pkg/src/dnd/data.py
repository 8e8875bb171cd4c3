"""Byte-level corpus handling."""

from __future__ import annotations

from pathlib import Path

import numpy as np

BOS = 256
EOS = 257
VOCAB_SIZE = 258


def ingest(path) -> np.ndarray:
    """Raw bytes of ``path`` as int64 token ids."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read corpus {path}: {exc.strerror or exc}") from exc
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


def encode(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.int64)


def token_string(tok: int) -> str:
    if tok == BOS:
        return "<bos>"
    if tok == EOS:
        return "<eos>"
    ch = chr(tok)
    return ch if 32 <= tok < 127 else f"\\x{tok:02x}"


class Windows:
    """Non-overlapping ``seq_len`` chunks of a token stream.

    Targets are the next token in the stream; the final position of the last
    window has none and carries zero weight.
    """

    def __init__(self, ids: np.ndarray, seq_len: int):
        if ids.size == 0:
            raise ValueError("corpus is empty")
        if ids.size < seq_len:
            raise ValueError(f"corpus has {ids.size} tokens, fewer than seq_len={seq_len}")
        self.ids = ids
        self.seq_len = seq_len
        self.count = ids.size // seq_len

    def __len__(self) -> int:
        return self.count

    def batch(self, idx) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        idx = np.asarray(idx, dtype=np.int64)
        L = self.seq_len
        starts = idx * L
        pos = starts[:, None] + np.arange(L)[None, :]
        x = self.ids[pos]
        tpos = pos + 1
        weights = (tpos < self.ids.size).astype(np.float64)
        y = self.ids[np.minimum(tpos, self.ids.size - 1)]
        return x, y, weights
