import numpy as np
import pytest

from meanfield_control import (
    ControlPath,
    InitialSpec,
    build_time_grid,
    control_effort,
    delta_mu_j1,
    j1_w2_lipschitz_constant,
    running_cost,
    sample_initial_ensemble,
    total_cost,
    tracking_cost,
    zero_running_cost,
    w2,
)
from meanfield_control.core import ParticleEnsemble
from meanfield_control.costs import CostSpec, coordinate_observable, moments, tracking_outer
from meanfield_control.dynamics import forward_solve
from meanfield_control.kernels import KernelSpec, zero_kernel


def test_perfect_tracking_costs_nothing():
    cost = tracking_cost(2, (1.0, -2.0), 3.0, 0.7, 1.0)
    ens = ParticleEnsemble(np.tile([1.0, -2.0], (5, 1)))
    assert running_cost(cost, ens) == pytest.approx(0.0, abs=1e-15)


def test_moments_small_example():
    cost = tracking_cost(1, (0.0,), 1.0, 1.0, 1.0)
    y = moments(cost, np.array([[0.0], [2.0]]))
    assert y[0] == pytest.approx(1.0)  # mean coordinate
    assert y[1] == pytest.approx(2.0)  # mean squared norm


def test_variance_reading_of_running_cost():
    cost = tracking_cost(1, (1.0,), 2.0, 4.0, 1.0)
    x = np.array([[0.0], [2.0]])
    # mean 1 (on target), variance 2 - 1 = 1 -> j = (4/4) * 1^2
    assert running_cost(cost, x) == pytest.approx(1.0)


def test_control_effort_zero_for_constant_path():
    grid = build_time_grid(1.0, 20)
    u = ControlPath.constant(grid, np.array([[0.3, -0.7]]))
    cost = tracking_cost(2, (0.0, 0.0), 1.0, 0.0, 2.0)
    assert control_effort(cost, u) == 0.0


def test_control_effort_linear_ramp():
    # u moving linearly 0 -> (1,0) over T=1 with lambda=2 costs exactly 1
    grid = build_time_grid(1.0, 50)
    cost = tracking_cost(2, (0.0, 0.0), 1.0, 0.0, 2.0)
    ramp = grid.nodes[:, None, None] * np.array([[[1.0, 0.0]]])[0]
    u = ControlPath(grid, ramp.reshape(-1, 1, 2))
    assert control_effort(cost, u) == pytest.approx(1.0, rel=1e-14)


def test_total_cost_against_refined_quadrature():
    # frozen instance; the refined-grid value is the oracle
    k1 = KernelSpec("gaussian", -0.6, 1.0)
    k2 = KernelSpec("gaussian", 1.0, 1.0)
    cost = tracking_cost(1, (1.0,), 1.0, 0.5, 3.0)
    cloud = sample_initial_ensemble(
        InitialSpec(name="uniform_box", low=(0.0,), high=(1.0,)), 16, seed=11
    )
    coarse_grid = build_time_grid(1.0, 400)
    fine_grid = build_time_grid(1.0, 6400)
    anchors = np.array([[-0.5], [1.5]])
    ramp = np.sin(np.pi * coarse_grid.nodes)[:, None, None] * 0.3
    u_coarse = ControlPath(coarse_grid, ControlPath.constant(coarse_grid, anchors).values + ramp)
    # the same piecewise-linear control refined onto the fine grid
    fine_vals = np.empty((fine_grid.n_steps + 1, 2, 1))
    for k, t in enumerate(fine_grid.nodes):
        fine_vals[k] = u_coarse.at(t)
    u_fine = ControlPath(fine_grid, fine_vals)
    j_coarse = total_cost(forward_solve(cloud, u_coarse, k1, k2, coarse_grid), u_coarse, cost)
    j_fine = total_cost(forward_solve(cloud, u_fine, k1, k2, fine_grid), u_fine, cost)
    assert abs(j_coarse - j_fine) / abs(j_fine) < 1e-6


def test_delta_mu_j1_zero_outer():
    cost = zero_running_cost(1.0)
    x = np.random.default_rng(0).normal(size=(7, 2))
    assert np.all(delta_mu_j1(cost, x) == 0.0)
    assert running_cost(cost, x) == 0.0


def test_delta_mu_j1_matches_scaled_particle_gradient():
    # N * d/dx_i of the particle running cost equals the measure derivative
    cost = tracking_cost(2, (0.3, -0.4), 1.5, 0.8, 1.0)
    rng = np.random.default_rng(1)
    x = rng.normal(size=(6, 2))
    n = x.shape[0]
    analytic = delta_mu_j1(cost, x)
    eps = 1e-6
    for i in range(n):
        for a in range(2):
            xp, xm = x.copy(), x.copy()
            xp[i, a] += eps
            xm[i, a] -= eps
            fd = n * (running_cost(cost, xp) - running_cost(cost, xm)) / (2 * eps)
            assert fd == pytest.approx(analytic[i, a], rel=2e-6, abs=1e-6)


def test_delta_mu_j1_translation_affine_law():
    # mean-only quadratic outer: delta is constant = w (mean - target)
    dim = 2
    obs = tuple(coordinate_observable(a) for a in range(dim))
    outer = tracking_outer(dim, (1.0, 2.0), 3.0, 0.0)

    def fn(y):
        return outer.fn(np.append(y, np.dot(y, y)))

    def grad(y):
        return outer.grad(np.append(y, np.dot(y, y)))[:dim]

    from meanfield_control.costs import OuterFunction

    mean_only = OuterFunction("mean_only", dim, fn, grad, None)
    cost = CostSpec(obs, mean_only, 1.0)
    rng = np.random.default_rng(2)
    x = rng.normal(size=(9, dim))
    shift = np.array([0.7, -1.3])
    base = delta_mu_j1(cost, x)
    shifted = delta_mu_j1(cost, x + shift)
    assert np.allclose(base, 3.0 * (x.mean(axis=0) - [1.0, 2.0]), atol=1e-12)
    assert np.allclose(shifted - base, 3.0 * shift, atol=1e-12)


def test_control_effort_nonnegative_and_zero_iff_constant():
    grid = build_time_grid(1.0, 10)
    cost = tracking_cost(1, (0.0,), 1.0, 0.0, 2.0)
    rng = np.random.default_rng(3)
    vals = rng.normal(size=(11, 2, 1))
    u = ControlPath(grid, vals)
    assert control_effort(cost, u) > 0.0
    const = ControlPath.constant(grid, vals[0])
    assert control_effort(cost, const) == 0.0


def test_j1_lipschitz_in_w2():
    # |J1(mu) - J1(nu)| <= C_j W2(mu, nu) on random compactly supported pairs
    cost = tracking_cost(2, (0.5, 0.5), 1.0, 0.5, 1.0)
    rng = np.random.default_rng(4)
    violations = 0
    for _ in range(100):
        n = int(rng.integers(4, 40))
        a = rng.uniform(-1.5, 1.5, size=(n, 2))
        b = rng.uniform(-1.5, 1.5, size=(n, 2))
        ya, yb = moments(cost, a), moments(cost, b)
        m1 = float(np.max(np.abs(ya) + np.abs(yb)))
        m2 = float(np.mean(np.sum(a * a, 1)) + np.mean(np.sum(b * b, 1)))
        c_j = j1_w2_lipschitz_constant(cost, m1, m2)
        gap = abs(running_cost(cost, a) - running_cost(cost, b))
        if gap > c_j * w2(a, b) + 1e-12:
            violations += 1
    assert violations == 0


def test_total_cost_with_zero_kernels_is_pure_quadrature():
    # no dynamics: trajectory constant, so the running integral is exact
    grid = build_time_grid(1.0, 10)
    cost = tracking_cost(1, (0.0,), 2.0, 0.0, 1.0)
    cloud = ParticleEnsemble(np.array([[1.0], [3.0]]))
    u = ControlPath.constant(grid, np.zeros((0, 1)).reshape(0, 1))
    traj = forward_solve(cloud, u, zero_kernel(), zero_kernel(), grid)
    expected = running_cost(cost, cloud)
    assert total_cost(traj, u, cost) == pytest.approx(expected, rel=1e-14)
