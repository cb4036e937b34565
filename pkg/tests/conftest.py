import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def smooth_image(rng, N, M, lo=10.0, hi=100.0, bumps=3):
    """A smooth positive test image made of a few broad Gaussians."""
    x = (np.arange(M) + 0.5) / M
    y = (np.arange(N) + 0.5) / N
    X, Y = np.meshgrid(x, y)
    out = np.full((N, M), lo)
    for _ in range(bumps):
        c = rng.uniform(0.2, 0.8, 2)
        s = rng.uniform(0.1, 0.25)
        out += (hi - lo) / bumps * np.exp(-((X - c[0]) ** 2 + (Y - c[1]) ** 2) / (2 * s * s))
    return out


# verdict lines of the acceptance criteria, echoed after the run
VERDICTS = {}


def record_verdict(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    VERDICTS[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[n])
