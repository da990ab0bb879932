from __future__ import annotations

import numpy as np
import pytest

from gradkd.data import in_memory_dataset
from gradkd.detector import DetectorConfig, GroundTruth

# 32x32 input, levels 4x4 / 2x2 / 1x1; trains in well under a second per epoch
MICRO = DetectorConfig(widths=(4, 6, 8), neck_channels=8, stem_channels=4, input_size=(32, 32))
MICRO_WIDE = DetectorConfig(widths=(8, 12, 16), neck_channels=8, stem_channels=4, input_size=(32, 32))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def micro_dataset():
    from gradkd.data import SceneConfig
    cfg = SceneConfig(image_size=(32, 32), size_range=(6, 16), count_range=(1, 2))
    return in_memory_dataset(3, 24, 8, cfg)


@pytest.fixture
def two_boxes():
    return [[GroundTruth((2.0, 3.0, 14.0, 12.0), 0), GroundTruth((16.0, 8.0, 30.0, 30.0), 2)],
            [GroundTruth((6.0, 6.0, 20.0, 24.0), 1)]]


# one line per acceptance criterion, echoed at the end of the run
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
