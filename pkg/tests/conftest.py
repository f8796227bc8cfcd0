import numpy as np
import pytest
import torch

from frametwin.geometry import DTYPE, BezierCurve
from frametwin.wireframe import PrintPlan, cube_graph


def random_cubic(rng: np.random.Generator, scale: float = 5.0) -> BezierCurve:
    """Random cubic whose control polygon is well spread (no near-zero tangents)."""
    start = rng.uniform(-scale, scale, 3)
    steps = rng.normal(size=(3, 3))
    steps /= np.linalg.norm(steps, axis=1, keepdims=True)
    steps = steps * rng.uniform(0.5, 2.0, (3, 1)) + np.array([1.5, 0.0, 0.0])
    ctrl = np.vstack([start, start + np.cumsum(steps, axis=0)])
    return BezierCurve(torch.as_tensor(ctrl, dtype=DTYPE))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def cube():
    return cube_graph(10.0)


@pytest.fixture
def cube_plan():
    return PrintPlan([[0, 1, 2, 3, 4, 5, 6, 7], [8, 9, 10, 11]])


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "SUMMARY", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
