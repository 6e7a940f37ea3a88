import numpy as np
import pytest

from mcmmf.experiments import BenchConfig, build_bench
from mcmmf.optics import FiberSpec, SourceModel, WavelengthGrid, build_core_model, hex_layout


@pytest.fixture(scope="session")
def fiber():
    return FiberSpec(0.3085, 50e-6, 0.06, 200, 75e-6)


@pytest.fixture(scope="session")
def small_bench():
    """30 cores, 12 channels: enough for end-to-end checks in a few seconds."""
    fiber = FiberSpec(0.3085, 50e-6, 0.06, 30, 75e-6)
    return build_bench(BenchConfig(WavelengthGrid.spanning(609.0, 694.0, 12), fiber, seed=5))


@pytest.fixture(scope="session")
def small_letter_bench():
    fiber = FiberSpec(0.3085, 50e-6, 0.06, 60, 75e-6)
    grid = WavelengthGrid.uniform(654.0, 0.4, 40)
    return build_bench(BenchConfig(grid, fiber, patch_size_px=24, pitch_px=36.0, seed=2))


@pytest.fixture(scope="session")
def bundle():
    """A 40-core rendered layout with its models."""
    fiber = FiberSpec(0.3085, 50e-6, 0.06, 40, 75e-6)
    source = SourceModel(650.0, 0.0, 3.5)
    layout = hex_layout(40, 30, 20)
    models = [build_core_model(fiber, source, 20, s) for s in range(40)]
    return fiber, layout, models


def uniform_blobs(centres, size, shape, value=2000):
    """Frame with flat square blobs centred on integer-ish ``(x, y)`` centres."""
    img = np.zeros(shape, dtype=np.uint16)
    for cx, cy in centres:
        x0 = int(round(cx - (size - 1) / 2))
        y0 = int(round(cy - (size - 1) / 2))
        img[y0 : y0 + size, x0 : x0 + size] = value
    return img


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
