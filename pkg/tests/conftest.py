import sys
from datetime import datetime, timezone

import numpy as np
import pytest

from hsident.hscube import AnnotationSet, HsCube


def make_cube(h=4, w=5, b=3, seed=0, cube_id="c0", wavelengths=None, capture_time=None):
    rng = np.random.default_rng(seed)
    data = rng.uniform(0, 10, size=(h, w, b)).astype(np.float32)
    wl = np.linspace(400, 700, b) if wavelengths is None else wavelengths
    return HsCube(data, wl, cube_id, capture_time)


@pytest.fixture
def cube():
    return make_cube(capture_time=datetime(2023, 6, 23, 10, 30, tzinfo=timezone.utc))


@pytest.fixture
def annotations(cube):
    mask = np.zeros((cube.height, cube.width), dtype=np.uint16)
    mask[1:3, 1:3] = 2
    mask[0, 4] = 7
    return AnnotationSet(cube.cube_id, mask, [{"id": 2, "x0": 1, "y0": 1, "x1": 3, "y1": 3}])


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
