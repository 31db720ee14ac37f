"""Shared desk-scale instances for the test suite."""

import numpy as np
import pytest

from meanfield_control import (
    ControlPath,
    InitialSpec,
    KernelSpec,
    build_time_grid,
    sample_initial_ensemble,
)
from meanfield_control.costs import tracking_cost


@pytest.fixture(scope="session")
def steering():
    """The default steering instance: d=2, N=64, M=2, T=1, lambda=5."""
    grid = build_time_grid(1.0, 100)
    k1 = KernelSpec("gaussian", -0.8, 1.0)
    k2 = KernelSpec("gaussian", 1.2, 1.0)
    cost = tracking_cost(2, (1.5, 1.5), 1.0, 0.25, 5.0)
    spec = InitialSpec(name="uniform_box", low=(0.0, 0.0), high=(1.0, 1.0))
    cloud = sample_initial_ensemble(spec, 64, seed=7)
    anchors = np.array([[-0.4, -0.2], [-0.2, -0.4]])
    u = ControlPath.constant(grid, anchors)
    return {
        "grid": grid, "k1": k1, "k2": k2, "cost": cost,
        "spec": spec, "cloud": cloud, "anchors": anchors, "u": u,
    }


@pytest.fixture()
def small_1d():
    """Tiny 1-d instance with both kernels active."""
    grid = build_time_grid(1.0, 40)
    k1 = KernelSpec("gaussian", -0.6, 1.0)
    k2 = KernelSpec("gaussian", 1.0, 1.0)
    cost = tracking_cost(1, (1.2,), 1.0, 0.5, 4.0)
    spec = InitialSpec(name="uniform_box", low=(0.0,), high=(1.0,))
    cloud = sample_initial_ensemble(spec, 24, seed=3)
    u = ControlPath.constant(grid, np.array([[-0.4], [1.6]]))
    return {"grid": grid, "k1": k1, "k2": k2, "cost": cost, "spec": spec,
            "cloud": cloud, "u": u}
