import os

import numpy as np
import pytest
import torch
from hypothesis import settings

from xmas.field import DisplacementField, LabelVolume, ScalarVolume, SpatialGrid

torch.set_num_threads(int(os.environ.get("XMAS_THREADS", "1")))

settings.register_profile("default", deadline=None, max_examples=40, derandomize=True)
settings.load_profile("default")


def random_scalar(rng, shape):
    return ScalarVolume(SpatialGrid(tuple(shape)), rng.normal(size=shape))


def random_labels(rng, shape, k=3):
    return LabelVolume(SpatialGrid(tuple(shape)), rng.integers(0, k, size=shape), tuple(range(k)))


def random_field(rng, shape, scale=1.5):
    return DisplacementField(SpatialGrid(tuple(shape)), rng.uniform(-scale, scale, size=(3, *shape)))


def box_labels(shape, lo, hi, label=1, k=2):
    lab = np.zeros(shape, dtype=np.int32)
    lab[tuple(slice(a, b) for a, b in zip(lo, hi))] = label
    return LabelVolume(SpatialGrid(tuple(shape)), lab, tuple(range(k)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def record_acceptance(number: int, ok: bool, detail: str) -> None:
    """Print and remember one PASS/FAIL line for an acceptance criterion."""
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} | {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
