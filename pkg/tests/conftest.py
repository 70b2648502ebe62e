import math

import numpy as np
import pytest

from gated_racer.maps import TrackMap, cumulative_arclength
from gated_racer.tracks import load_training_map

SEEDS = [0, 1, 2, 3, 4]
IL_ALGOS = ["bc", "dagger", "hg-dagger", "eil"]


def room_map(size=10.0, resolution=0.05, wall=0.25):
    """Square room with walls ``wall`` thick; free interior is
    ``[0, size]^2``.  The centerline is a circle of radius size/4."""
    n = int(round((size + 2 * wall) / resolution))
    grid = np.zeros((n, n), dtype=bool)
    k = int(round(wall / resolution))
    grid[:k, :] = grid[-k:, :] = grid[:, :k] = grid[:, -k:] = True
    c = size / 2
    t = np.linspace(0, 2 * math.pi, 200, endpoint=False)
    pts = np.column_stack([c + size / 4 * np.cos(t), c + size / 4 * np.sin(t)])
    return TrackMap(grid, (-wall, -wall), resolution, pts, cumulative_arclength(pts), (c, c, 0.0), size / 2, "room")


def circle_track(radius=10.0, half_width=1.0, n=600):
    t = np.linspace(0, 2 * math.pi, n, endpoint=False)
    pts = np.column_stack([radius * np.cos(t), radius * np.sin(t)])
    return TrackMap.from_centerline(pts, half_width, 0.05, name=f"circle{radius:g}")


def oval_track(straight=20.0, radius=5.0, half_width=1.0):
    """Stadium: two straights along x joined by half circles, counter-clockwise."""
    pts = []
    for x in np.arange(0.0, straight, 0.2):
        pts.append((x, 0.0))
    for a in np.linspace(-math.pi / 2, math.pi / 2, 80, endpoint=False):
        pts.append((straight + radius * math.cos(a), radius + radius * math.sin(a)))
    for x in np.arange(straight, 0.0, -0.2):
        pts.append((x, 2 * radius))
    for a in np.linspace(math.pi / 2, 3 * math.pi / 2, 80, endpoint=False):
        pts.append((radius * math.cos(a), radius + radius * math.sin(a)))
    return TrackMap.from_centerline(np.array(pts), half_width, 0.05, name="oval")


@pytest.fixture(scope="session")
def train_map():
    return load_training_map()


@pytest.fixture(scope="session")
def room():
    return room_map()


@pytest.fixture(scope="session")
def oval():
    return oval_track()


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running integration or acceptance test")


_VERDICTS = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record one acceptance line; all lines are repeated in the terminal summary."""
    lines = request.config.stash.setdefault(_VERDICTS, [])

    def record(number: int, ok: bool, detail: str):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append((number, line))
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
