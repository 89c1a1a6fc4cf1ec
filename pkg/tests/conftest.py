import numpy as np
import pytest
import torch

from chreode.landscape import Landscape, simulate_dataset

torch.set_num_threads(1)


def rel_err(a, b, floor=1e-8):
    """Largest per-coordinate relative error of ``a`` against reference ``b``.

    Coordinates whose reference is below ``floor`` times the largest
    reference magnitude are measured against that floor instead, so exact
    zeros do not produce infinite ratios.
    """
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    scale = max(np.abs(b).max(initial=0.0), 1e-300)
    denom = np.maximum(np.abs(b), floor * scale)
    return float(np.max(np.abs(a - b) / denom, initial=0.0))


def central_diff(f, x, h=1e-5):
    """Central finite differences of scalar ``f`` at float64 array ``x``."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


@pytest.fixture(scope="session")
def small_dataset():
    return simulate_dataset(Landscape(dim=4), (0.25, 0.75, 1.25, 2.0), 120, seed=3)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
