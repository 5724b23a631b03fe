import contextlib
import time

import numpy as np
import pytest

_CRITERIA: list[str] = []


@pytest.fixture
def criterion():
    """Context manager that records one PASS/FAIL line per acceptance criterion."""

    @contextlib.contextmanager
    def run(number, title):
        t0 = time.perf_counter()
        try:
            yield
        except BaseException as exc:
            _CRITERIA.append(f"FAIL  criterion {number:>2}: {title} ({type(exc).__name__}) [{time.perf_counter() - t0:.1f}s]")
            raise
        _CRITERIA.append(f"PASS  criterion {number:>2}: {title} [{time.perf_counter() - t0:.1f}s]")

    return run


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_CRITERIA, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def ulp_bound(x, deq, scale):
    """Elementwise s/2 + 1 ulp budget, with the ulp taken at max(|x|, |deq|) in float32."""
    mag = np.maximum(np.abs(x), np.abs(deq)).astype(np.float32)
    return scale.astype(np.float64) / 2 + np.spacing(mag).astype(np.float64)
