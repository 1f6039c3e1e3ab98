import numpy as np
import pytest

from minidit.memory import MemConfig, MemorySystem, MiB, use_system


@pytest.fixture()
def system():
    ms = MemorySystem(MemConfig(fast_capacity_bytes=256 * MiB,
                                slow_capacity_bytes=8 * 1024 * MiB,
                                alignment_bytes=4096), trace=False)
    with use_system(ms):
        yield ms
    ms.close()


@pytest.fixture()
def rng():
    return np.random.default_rng(0xC0FFEE)


def rel_err(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12) -> float:
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def central_diff(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Gradient of scalar f at x by central differences, coordinate by coordinate."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g
