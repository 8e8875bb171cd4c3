import ast
import os
import sysconfig
from pathlib import Path

import numpy as np
import pytest

from dnd.dnd_layer import RouterState
from dnd.model import DndModel
from dnd.transformer import DecoderLayer, ModelConfig

CORPUS_BYTES = 1 << 20
_SKIP_DIRS = {"test", "tests", "site-packages", "dist-packages", "idlelib"}

_acceptance_lines: list[str] = []


def build_docstring_corpus(limit: int = CORPUS_BYTES) -> bytes:
    """English prose from the standard library's docstrings, in a fixed order."""
    root = Path(sysconfig.get_paths()["stdlib"])
    parts, size = [], 0
    for f in sorted(root.rglob("*.py")):
        if _SKIP_DIRS & set(f.relative_to(root).parts):
            continue
        try:
            tree = ast.parse(f.read_text(encoding="utf-8"))
        except (SyntaxError, UnicodeDecodeError, ValueError):
            continue
        for node in ast.walk(tree):
            if isinstance(node, (ast.Module, ast.ClassDef, ast.FunctionDef, ast.AsyncFunctionDef)):
                doc = ast.get_docstring(node)
                if doc and len(doc) > 80:
                    b = (doc.strip() + "\n\n").encode("utf-8")
                    parts.append(b)
                    size += len(b)
        if size >= limit:
            break
    return b"".join(parts)[:limit]


@pytest.fixture(scope="session")
def corpus_path(tmp_path_factory) -> Path:
    env = os.environ.get("DND_CORPUS")
    if env:
        return Path(env)
    path = tmp_path_factory.mktemp("corpus") / "corpus.txt"
    path.write_bytes(build_docstring_corpus())
    return path


@pytest.fixture
def tiny_cfg():
    return ModelConfig(vocab_size=258, d_model=16, n_heads=2, d_head=8, n_layers=4, d_ff=24, max_seq_len=32)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_layer(cfg, seed=0, gain=1.0):
    layer = DecoderLayer(cfg, np.random.default_rng(seed))
    if gain != 1.0:
        for p in layer.named_parameters().values():
            if p.ndim == 2:
                p.data = p.data * gain
    return layer


def random_router(d, rng, scale=1.0, tau=0.5):
    r = RouterState.zeros(d, tau_init=tau)
    r.weight.data = rng.normal(0, scale, d)
    return r


def random_dnd_model(cfg, seed, l_start=1, l_end=2, scale=20.0):
    """DND model whose routers select a non-trivial share of tokens."""
    m = DndModel(cfg, l_start, l_end, seed=seed)
    rng = np.random.default_rng(seed + 10_000)
    for r in m.routers.values():
        r.weight.data = rng.normal(0, scale, cfg.d_model)
    return m


@pytest.fixture
def acceptance_report():
    return _acceptance_lines.append


def pytest_terminal_summary(terminalreporter):
    if _acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in _acceptance_lines:
            terminalreporter.write_line(line)
