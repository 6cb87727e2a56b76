import numpy as np
import pytest

from polysplat.primitives import OCTAHEDRON, PrimitiveSet
from polysplat.projection import Camera


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def axis_camera(width=32, height=32, f=40.0, distance=5.0):
    """Camera on the -z axis looking at the origin with identity rotation."""
    return Camera(f, f, width / 2, height / 2, width, height, np.eye(3), [0.0, 0.0, distance])


def single_octahedron(d=(0.5, 0.5, 0.5), opacity=0.8, rgb=(0.9, 0.3, 0.1), center=(0, 0, 0),
                      dtype=np.float64):
    return PrimitiveSet.from_features(OCTAHEDRON, [center], [1.0, 0, 0, 0], [d], [opacity],
                                      rgb=[rgb], dtype=dtype)


@pytest.fixture
def camera():
    return axis_camera()


_ACCEPTANCE = []


def record_acceptance(number, title, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title}: {detail}"
    _ACCEPTANCE.append((number, line))
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_ACCEPTANCE, key=lambda x: x[0]):
        terminalreporter.write_line(line)
