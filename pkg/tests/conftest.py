import numpy as np
import pytest

from slicealign.image import Slice2D, normalize_intensity
from slicealign.phantom import PhantomConfig, gen_phantom


@pytest.fixture(scope="session")
def small_case():
    """Default-geometry phantom at 128 px, shared across modules."""
    return gen_phantom(3, PhantomConfig(size=128))


@pytest.fixture(scope="session")
def lge128(small_case):
    return normalize_intensity(small_case.lge[3])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def smooth_image(h=64, w=64, seed=0):
    """Band-limited random image in [0, 1]."""
    from scipy.ndimage import gaussian_filter

    r = np.random.default_rng(seed)
    a = gaussian_filter(r.standard_normal((h, w)), 3.0)
    a = (a - a.min()) / (a.max() - a.min())
    return Slice2D(a)


# --- acceptance verdicts -------------------------------------------------------

_VERDICTS: dict[int, str] = {}


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for a numbered criterion and return the flag."""

    def record(n: int, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
        _VERDICTS[n] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_VERDICTS):
            terminalreporter.write_line(_VERDICTS[n])
