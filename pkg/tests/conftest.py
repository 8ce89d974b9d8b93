import numpy as np
import pytest

from diffscale.denoisers import EnumerableDataset
from diffscale.noise import MixingSchedule, Vocab

NOISES = ("masked", "low-uniform", "balanced", "high-uniform", "uniform")

_RESULTS: dict = {}


@pytest.fixture
def criterion():
    """Record a labelled acceptance outcome; summarized at the end of the session."""

    def record(number: int, title: str, passed: bool, detail: str) -> None:
        _RESULTS[number] = (title, bool(passed), detail)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        title, passed, detail = _RESULTS[number]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {number:2d}. {title}: {detail}")


@pytest.fixture
def tiny_data():
    return EnumerableDataset(
        np.array([[0, 0], [1, 1], [2, 2], [0, 1], [2, 0]]), np.array([0.35, 0.25, 0.2, 0.1, 0.1])
    )


@pytest.fixture
def vocab3():
    return Vocab.with_mask_last(3)


@pytest.fixture(params=NOISES)
def sched(request):
    return MixingSchedule.named(request.param)
