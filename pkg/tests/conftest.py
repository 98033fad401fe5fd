from contextlib import contextmanager

import numpy as np
import pytest

from somn.imaging import GrayImage


def radial_gradient(size: int = 64) -> GrayImage:
    """Black centre fading to white at the corners."""
    yy, xx = np.mgrid[0:size, 0:size]
    r = np.hypot(xx + 0.5 - size / 2, yy + 0.5 - size / 2)
    return GrayImage(np.rint(255 * r / r.max()).astype(int))


def two_squares(size: int = 32) -> GrayImage:
    """Two black 8x8 squares on white, centred at (8, 8) and (24, 24) for size 32."""
    px = np.full((size, size), 255)
    px[4:12, 4:12] = 0
    px[size - 12:size - 4, size - 12:size - 4] = 0
    return GrayImage(px)


def random_spd(rng, d, lo=0.2, hi=5.0):
    q, _ = np.linalg.qr(rng.normal(size=(d, d)))
    return (q * rng.uniform(lo, hi, size=d)) @ q.T


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Context-manager factory that records one pass/fail line per criterion."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    @contextmanager
    def record(number: int, title: str):
        ok = False
        try:
            yield
            ok = True
        finally:
            lines.append(f"{'PASS' if ok else 'FAIL'} criterion {number:2d}: {title}")

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(lines, key=lambda s: int(s.split()[2].rstrip(":"))):
        terminalreporter.write_line(line)
