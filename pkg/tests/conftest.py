import numpy as np
import pytest

from panelq.panel import PanelData


def make_panel(rng, n, t, p=1, effects=None, scale=1.0):
    """Balanced panel with normal errors; ``t`` may be a per-individual sequence."""
    t_lengths = np.broadcast_to(np.asarray(t), (n,))
    ids = np.repeat(np.arange(n), t_lengths)
    effects = rng.normal(size=n) if effects is None else np.asarray(effects, dtype=float)
    x = rng.normal(size=(ids.size, p))
    y = effects[ids] + x @ np.ones(p) + scale * rng.normal(size=ids.size)
    return PanelData(y=y, x=x, ids=ids, n=n)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def record_criterion(number, title, passed, detail):
    """Log one acceptance line; they are repeated in the terminal summary."""
    line = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
