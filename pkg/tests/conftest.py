import numpy as np
import pytest
from hypothesis import settings

from gcnstd.grid import PosteriorGrid, Vocabulary

settings.register_profile("ci", max_examples=50, deadline=None)
settings.load_profile("ci")


def random_grid(rng, T, V, blank_bias=0.0, with_separator=False, dt=0.02):
    """Softmax-like rows; ``blank_bias`` pushes mass toward the blank (column 0)."""
    logits = rng.normal(size=(T, V))
    logits[:, 0] += blank_bias
    p = np.exp(logits)
    p /= p.sum(axis=1, keepdims=True)
    symbols = ("_",) + (("|",) if with_separator else ()) + tuple("abcdefghijklmnop"[: V - 1 - with_separator])
    vocab = Vocabulary(symbols, 0, 1 if with_separator else None)
    return PosteriorGrid(vocab, p.astype(np.float32), dt)


def grid_from_path(path: str, hi=0.9):
    """Grid whose per-frame argmax spells ``path`` (``_`` = blank)."""
    syms = ("_",) + (tuple(sorted(set(path) - {"_"})) or ("a",))
    V = len(syms)
    p = np.full((len(path), V), (1.0 - hi) / (V - 1))
    for t, s in enumerate(path):
        p[t, syms.index(s)] = hi
    return PosteriorGrid(Vocabulary(syms, 0), p.astype(np.float32))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    """Repeat the acceptance PASS/FAIL lines at the end of the run."""
    import sys

    mod = next((m for name, m in sys.modules.items() if name.endswith("test_acceptance")), None)
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
