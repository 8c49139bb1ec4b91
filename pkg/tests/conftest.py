from __future__ import annotations

import numpy as np
import pytest

from cutflow.spline import fit_closed_spline

CENTER = np.array([1.5, 1.5])


def circle_points(n: int, radius: float = 1.0, center=CENTER, phase: float = 0.0) -> np.ndarray:
    t = phase + 2 * np.pi * np.arange(n) / n
    return np.asarray(center) + radius * np.stack([np.cos(t), np.sin(t)], axis=1)


@pytest.fixture(scope="session")
def circle64():
    return fit_closed_spline(circle_points(64))


@pytest.fixture(scope="session")
def circle256():
    return fit_closed_spline(circle_points(256))
