import numpy as np
import pytest

from loopdyn import model as M


def small_config(**kw):
    base = dict(d_model=32, n_heads=4, d_head=8, recurrent_layers=3, seed=11)
    base.update(kw)
    return M.ModelConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_stochastic(rng, t, causal=False):
    a = rng.random((t, t)) ** 3
    if causal:
        a = np.tril(a)
        a[np.arange(t), np.arange(t)] += 1e-3
    return a / a.sum(axis=1, keepdims=True)


# one line per acceptance criterion, printed after the run
VERDICTS: list[str] = []


def record_verdict(criterion: str, ok: bool, detail: str) -> None:
    line = f"{criterion}: {'PASS' if ok else 'FAIL'} ({detail})"
    VERDICTS.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance")
        for line in VERDICTS:
            terminalreporter.write_line(line)
