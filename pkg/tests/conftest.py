import numpy as np
import pytest

from pushident.geometry import GridObject, ParamMap, decompose_footprint


def rect_object(width, height, w=0.02):
    return GridObject(w, tuple((c, r) for r in range(height) for c in range(width)))


def graded_params(obj, mass=0.01, friction=0.4, mass_slope=0.8, friction_slope=0.4):
    """Mass and friction that grow linearly along x (heterogeneous but smooth)."""
    x = obj.offsets[:, 0] / max(np.abs(obj.offsets[:, 0]).max(), 1e-12)
    return ParamMap(mass * (1 + mass_slope * x), friction * (1 + friction_slope * x))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def bar():
    """4 x 2 cells, 4 cm wide."""
    return rect_object(4, 2, 0.04)


@pytest.fixture
def hammer_obj():
    return decompose_footprint(np.array([[c == "#" for c in row] for row in
                                         ["......##", "########", "......##"]]), 0.03)


_ACCEPTANCE_LINES = []


@pytest.fixture
def verdict():
    """Record one acceptance line: verdict(tag, passed, details)."""
    def record(tag, passed, details):
        line = f"{tag} {'PASS' if passed else 'FAIL'}: {details}"
        _ACCEPTANCE_LINES.append(line)
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
