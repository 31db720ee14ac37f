"""Adjoint representations of the control problem and their cross-checks.

Three routes to the same costate are implemented:

1. backward ODE sweep (RK4), the microscopic system

       d xi^i/dt = (1/N) sum_j grad K1(x^i - x^j) xi^i
                 - (1/N) sum_j grad K1(x^j - x^i) xi^j
                 + sum_l grad K2(x^i - u^l) xi^i
                 + delta_mu J1(mu)(x^i),        xi_T = 0;

2. a fixed-point iteration of the equivalent integral representation along
   characteristics, xi_t = p - int_t^T Psi(mu_s, u_s)[xi_s] ds;

3. in one dimension with potential kernels, a scalar costate q transported
   along characteristics whose spatial gradient reproduces xi.

Weighted by 1/N the adjoint vectors are the atoms of the momentum measure
m_t = (1/N) sum_i xi^i delta_{x^i}; the phase-space diagnostics check the
Hamiltonian weak form satisfied by the joint empirical measure on (x, xi).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    AdjointTrajectory,
    ConfigError,
    ControlPath,
    NumericsError,
    TimeGrid,
    Trajectory,
)
from .costs import CostSpec, delta_mu_j1, moments
from .dynamics import midpoint_states, velocity
from .kernels import (
    KernelSpec,
    kernel_bounds,
    kernel_eval,
    pair_jac_diff_apply,
    pair_jac_sum,
    velocity_sup_bound,
)


class PicardNonConvergence(NumericsError):
    """Fixed-point iteration stalled; re-run with more segments (shorter spans)."""


def adjoint_rhs(positions: np.ndarray, controls_at_t: np.ndarray, xi: np.ndarray,
                k1: KernelSpec, k2: KernelSpec, cost: CostSpec) -> np.ndarray:
    """Right-hand side Psi of the adjoint system at frozen states.

    The two K1 sums collapse into one pass because DK1 is even for the
    builtin families:  sum_j DK1(x_i-x_j) xi_i - sum_j DK1(x_j-x_i) xi_j
    = sum_j DK1(x_i-x_j)(xi_i - xi_j).
    """
    n = positions.shape[0]
    out = pair_jac_diff_apply(k1, positions, xi) / n
    if controls_at_t.shape[0]:
        diag2 = pair_jac_sum(k2, positions, controls_at_t)
        out += np.einsum("iab,ib->ia", diag2, xi)
    out += delta_mu_j1(cost, positions)
    return out


def adjoint_solve_backward(traj: Trajectory, u: ControlPath,
                           k1: KernelSpec, k2: KernelSpec,
                           cost: CostSpec) -> AdjointTrajectory:
    """Backward RK4 sweep from xi_T = 0 along the stored trajectory.

    Forward states at half steps come from cubic interpolation of the stored
    frames; controls are piecewise-linear so their half-step values are exact.
    """
    if traj.grid.n_steps != u.grid.n_steps:
        raise ConfigError("trajectory and control path live on different grids")
    grid = traj.grid
    dt = grid.dt
    states = traj.states
    mids = midpoint_states(states)
    uv, uh = u.values, u.midpoints()
    vals = np.zeros_like(states)
    xi = vals[-1]
    for k in range(grid.n_steps, 0, -1):
        x_hi, x_mid, x_lo = states[k], mids[k - 1], states[k - 1]
        u_hi, u_mid, u_lo = uv[k], uh[k - 1], uv[k - 1]
        r1 = adjoint_rhs(x_hi, u_hi, xi, k1, k2, cost)
        r2 = adjoint_rhs(x_mid, u_mid, xi - 0.5 * dt * r1, k1, k2, cost)
        r3 = adjoint_rhs(x_mid, u_mid, xi - 0.5 * dt * r2, k1, k2, cost)
        r4 = adjoint_rhs(x_lo, u_lo, xi - dt * r3, k1, k2, cost)
        xi = xi - (dt / 6.0) * (r1 + 2.0 * r2 + 2.0 * r3 + r4)
        if not np.all(np.isfinite(xi)):
            raise NumericsError(f"non-finite adjoint at node {k - 1}")
        vals[k - 1] = xi
    return AdjointTrajectory(grid, vals)


def adjoint_solve_picard(traj: Trajectory, u: ControlPath,
                         k1: KernelSpec, k2: KernelSpec, cost: CostSpec,
                         tol: float = 1e-10, max_iter: int = 300,
                         n_segments: int = 1, history: list | None = None) -> AdjointTrajectory:
    """Fixed-point solve of the characteristics representation of the adjoint.

    Iterates xi^(m+1)_t = p - int_t^{T'} Psi[xi^(m)] ds per time segment with
    composite Simpson quadrature on the stored grid (midpoint states by cubic
    interpolation, midpoint iterate values likewise).  Segments are processed
    backward in time, chaining terminal payoffs; more segments shorten the
    time span when plain iteration fails to contract.  `history`, if given,
    collects the sup-norm update sizes.
    """
    grid = traj.grid
    n_steps = grid.n_steps
    if n_segments < 1 or 2 * n_segments > n_steps:
        raise ConfigError(f"need 1 <= n_segments <= n_steps // 2, got {n_segments}")
    dt = grid.dt
    states = traj.states
    mids = midpoint_states(states)
    uv, uh = u.values, u.midpoints()

    vals = np.zeros_like(states)
    cuts = np.linspace(0, n_steps, n_segments + 1).astype(int)
    for seg in range(n_segments, 0, -1):
        lo, hi = cuts[seg - 1], cuts[seg]
        payoff = vals[hi]
        xi_seg = np.repeat(payoff[None], hi - lo + 1, axis=0)
        for _ in range(max_iter):
            node_rhs = np.stack([
                adjoint_rhs(states[k], uv[k], xi_seg[k - lo], k1, k2, cost)
                for k in range(lo, hi + 1)
            ])
            xi_mid = midpoint_states(xi_seg)
            mid_rhs = np.stack([
                adjoint_rhs(mids[k], uh[k], xi_mid[k - lo], k1, k2, cost)
                for k in range(lo, hi)
            ])
            # Simpson on each interval, accumulated from the segment end
            increments = (dt / 6.0) * (node_rhs[:-1] + 4.0 * mid_rhs + node_rhs[1:])
            tail = np.concatenate([
                np.cumsum(increments[::-1], axis=0)[::-1],
                np.zeros((1,) + increments.shape[1:]),
            ])
            xi_new = payoff[None] - tail
            delta = float(np.max(np.abs(xi_new - xi_seg))) if xi_new.size else 0.0
            if history is not None:
                history.append(delta)
            xi_seg = xi_new
            if delta < tol:
                break
        else:
            raise PicardNonConvergence(
                f"no fixed point within {max_iter} iterations on segment "
                f"[{lo}, {hi}] (last update {delta:.3e}); increase n_segments"
            )
        vals[lo:hi + 1] = xi_seg
    return AdjointTrajectory(grid, vals)


# ---------------------------------------------------------------------------
# scalar costate in one dimension


class CharacteristicCrossing(NumericsError):
    """The 1-d particle ordering was violated; the scalar transport solve aborts."""


def _sorted_gradient(x: np.ndarray, q: np.ndarray) -> np.ndarray:
    """d q / d x across sorted characteristics, 3-point nonuniform stencil."""
    h_m = x[1:-1] - x[:-2]
    h_p = x[2:] - x[1:-1]
    out = np.empty_like(q)
    out[1:-1] = (
        -h_p / (h_m * (h_m + h_p)) * q[:-2]
        + (h_p - h_m) / (h_m * h_p) * q[1:-1]
        + h_m / (h_p * (h_m + h_p)) * q[2:]
    )
    h0, h1 = x[1] - x[0], x[2] - x[1]
    out[0] = (
        -(2.0 * h0 + h1) / (h0 * (h0 + h1)) * q[0]
        + (h0 + h1) / (h0 * h1) * q[1]
        - h0 / (h1 * (h0 + h1)) * q[2]
    )
    g0, g1 = x[-2] - x[-3], x[-1] - x[-2]
    out[-1] = (
        g1 / (g0 * (g0 + g1)) * q[-3]
        - (g0 + g1) / (g0 * g1) * q[-2]
        + (2.0 * g1 + g0) / (g1 * (g0 + g1)) * q[-1]
    )
    return out


@dataclass(frozen=True)
class ScalarAdjoint:
    """Scalar costate q on the particle characteristics of a 1-d run."""

    grid: TimeGrid
    order: np.ndarray    # sorting permutation of the particles (fixed in time)
    values: np.ndarray   # (n_steps+1, N), aligned with the *original* particle order

    def gradient(self, traj: Trajectory) -> np.ndarray:
        """d q / d x on every node frame, aligned with the original order."""
        out = np.empty_like(self.values)
        for k in range(self.values.shape[0]):
            xs = traj.states[k, self.order, 0]
            gs = _sorted_gradient(xs, self.values[k, self.order])
            out[k, self.order] = gs
        return out


def _check_ordering(states: np.ndarray, order: np.ndarray):
    xs = states[:, order, 0]
    gaps = np.diff(xs, axis=1)
    bad = np.where(np.any(gaps <= 0.0, axis=1))[0]
    if bad.size:
        raise CharacteristicCrossing(
            f"particle ordering violated at node {int(bad[0])}; "
            "refine the grid or separate the initial positions"
        )


def l2_adjoint_solve_1d(traj: Trajectory, u: ControlPath,
                        k1: KernelSpec, k2: KernelSpec, cost: CostSpec) -> ScalarAdjoint:
    """Backward transport solve for the scalar costate q in one dimension.

    Along each characteristic,

        dq/dt = int K1(y - x) q_x(y) dmu_t(y) + sum_l (d_l j)(moments) g_l(x),

    with q_T = 0.  The nonlocal term uses particle quadrature and q_x is
    finite-differenced across neighboring characteristics, which requires the
    1-d ordering to persist (smooth flows preserve it; a crossing aborts).
    """
    if traj.dim != 1:
        raise ConfigError(f"the scalar costate solve is 1-d only, got d={traj.dim}")
    grid = traj.grid
    n = traj.n_particles
    if n < 3:
        raise ConfigError("need at least 3 particles to difference across characteristics")
    order = np.argsort(traj.states[0, :, 0], kind="stable")
    _check_ordering(traj.states, order)
    mids = midpoint_states(traj.states)
    _check_ordering(mids, order)

    def rhs(x_frame: np.ndarray, q: np.ndarray) -> np.ndarray:
        xs = x_frame[order, 0]
        grad_sorted = _sorted_gradient(xs, q[order])
        grad = np.empty_like(q)
        grad[order] = grad_sorted
        pair = kernel_eval(k1, (x_frame[:, 0][None, :] - x_frame[:, 0][:, None])[..., None])
        nonlocal_term = pair[..., 0].T @ grad / n  # sum_j K1(x_j - x_i) q_x(x_j) / N
        if cost.observables:
            dj = cost.outer.grad(moments(cost, x_frame))
            source = sum(
                coef * g.fn(x_frame) for coef, g in zip(dj, cost.observables) if coef != 0.0
            )
        else:
            source = 0.0
        return nonlocal_term + source

    dt = grid.dt
    vals = np.zeros((grid.n_steps + 1, n))
    q = vals[-1]
    for k in range(grid.n_steps, 0, -1):
        x_hi, x_mid, x_lo = traj.states[k], mids[k - 1], traj.states[k - 1]
        r1 = rhs(x_hi, q)
        r2 = rhs(x_mid, q - 0.5 * dt * r1)
        r3 = rhs(x_mid, q - 0.5 * dt * r2)
        r4 = rhs(x_lo, q - dt * r3)
        q = q - (dt / 6.0) * (r1 + 2.0 * r2 + 2.0 * r3 + r4)
        vals[k - 1] = q
    return ScalarAdjoint(grid, order, vals)


# ---------------------------------------------------------------------------
# phase-space diagnostics


@dataclass(frozen=True)
class TestFunction:
    """Smooth phi(x, xi) with both gradients, used against the weak form."""

    name: str
    value: callable   # (N,d),(N,d) -> (N,)
    grad_x: callable  # -> (N,d)
    grad_xi: callable


def default_test_functions(dim: int) -> tuple:
    fns = [TestFunction("1", lambda x, s: np.ones(x.shape[0]),
                        lambda x, s: np.zeros_like(x), lambda x, s: np.zeros_like(x))]

    def basis(axis, which):
        if which == "x":
            return TestFunction(
                f"x{axis}", lambda x, s, a=axis: x[:, a],
                lambda x, s, a=axis: np.eye(x.shape[1])[a][None].repeat(x.shape[0], 0),
                lambda x, s: np.zeros_like(x))
        return TestFunction(
            f"xi{axis}", lambda x, s, a=axis: s[:, a],
            lambda x, s: np.zeros_like(x),
            lambda x, s, a=axis: np.eye(x.shape[1])[a][None].repeat(x.shape[0], 0))

    for a in range(dim):
        fns.append(basis(a, "x"))
        fns.append(basis(a, "xi"))

    def quad(a, b, kind):
        def value(x, s):
            p = x[:, a] if kind[0] == "x" else s[:, a]
            q = x[:, b] if kind[1] == "x" else s[:, b]
            return p * q

        def grad_x(x, s):
            g = np.zeros_like(x)
            if kind[0] == "x":
                g[:, a] += x[:, b] if kind[1] == "x" else s[:, b]
            if kind[1] == "x":
                g[:, b] += x[:, a] if kind[0] == "x" else s[:, a]
            return g

        def grad_xi(x, s):
            g = np.zeros_like(x)
            if kind[0] == "s":
                g[:, a] += x[:, b] if kind[1] == "x" else s[:, b]
            if kind[1] == "s":
                g[:, b] += x[:, a] if kind[0] == "x" else s[:, a]
            return g

        return TestFunction(f"{kind[0]}{a}*{kind[1]}{b}", value, grad_x, grad_xi)

    for a in range(dim):
        for b in range(a, dim):
            fns.append(quad(a, b, "xx"))
            fns.append(quad(a, b, "ss"))
    for a in range(dim):
        for b in range(dim):
            fns.append(quad(a, b, "xs"))

    def bump(center, width, name):
        c = np.asarray(center, dtype=np.float64)
        inv = 1.0 / (2.0 * width**2)

        def value(x, s):
            return np.exp(-(np.sum((x - c) ** 2, 1) + np.sum(s * s, 1)) * inv)

        def grad_x(x, s):
            return -2.0 * inv * (x - c) * value(x, s)[:, None]

        def grad_xi(x, s):
            return -2.0 * inv * s * value(x, s)[:, None]

        return TestFunction(name, value, grad_x, grad_xi)

    fns.append(bump(np.zeros(dim), 1.0, "bump0"))
    fns.append(bump(np.full(dim, 0.5), 0.7, "bump1"))
    return tuple(fns)


@dataclass(frozen=True)
class PhaseSpaceReport:
    times: np.ndarray            # interior nodes
    names: tuple
    residuals: np.ndarray        # (n_functions, n_interior)
    max_residual: float
    first_moment_gap: float      # consistency of the two m_t evaluations

    def rows(self):
        for j, name in enumerate(self.names):
            for t, r in zip(self.times, self.residuals[j]):
                yield {"time": t, "test_function": name, "residual": r}


def phase_space_diagnostics(traj: Trajectory, adj: AdjointTrajectory,
                            u: ControlPath, k1: KernelSpec, k2: KernelSpec,
                            cost: CostSpec, test_functions: tuple | None = None) -> PhaseSpaceReport:
    """Weak-form residual of the Hamiltonian evolution of nu_t = (1/N) sum delta_(x,xi).

    For each test function, the centered time difference of <phi, nu_t> is
    compared with <grad_x phi . grad_xi H - grad_xi phi . grad_x H, nu_t>,
    where grad_xi H is the velocity field and -grad_x H is the adjoint
    right-hand side (the Hamiltonian's nonlocal term is oriented to match
    the adjoint system actually solved; for the odd builtin kernels the two
    orientations differ only by that sign).
    """
    if adj.values.shape != traj.states.shape:
        raise ConfigError("trajectory and adjoint are not aligned")
    grid = traj.grid
    fns = test_functions if test_functions is not None else default_test_functions(traj.dim)
    n_steps, dt = grid.n_steps, grid.dt
    averages = np.empty((len(fns), n_steps + 1))
    rhs = np.empty((len(fns), n_steps + 1))
    for k in range(n_steps + 1):
        x, s = traj.states[k], adj.values[k]
        vel = velocity(x, u.values[k], k1, k2)
        xi_dot = adjoint_rhs(x, u.values[k], s, k1, k2, cost)  # = -grad_x H on atoms
        for j, f in enumerate(fns):
            averages[j, k] = np.mean(f.value(x, s))
            rhs[j, k] = np.mean(
                np.sum(f.grad_x(x, s) * vel, axis=1) + np.sum(f.grad_xi(x, s) * xi_dot, axis=1)
            )
    lhs = (averages[:, 2:] - averages[:, :-2]) / (2.0 * dt)
    residuals = np.abs(lhs - rhs[:, 1:-1])
    m_a = adj.values.sum(axis=1) / adj.n_particles
    m_b = np.einsum("kid->kd", adj.values) / adj.n_particles
    return PhaseSpaceReport(
        times=grid.nodes[1:-1],
        names=tuple(f.name for f in fns),
        residuals=residuals,
        max_residual=float(residuals.max()) if residuals.size else 0.0,
        first_moment_gap=float(np.max(np.abs(m_a - m_b))),
    )


# ---------------------------------------------------------------------------
# a-priori uniform bound


def adjoint_uniform_bound(k1: KernelSpec, k2: KernelSpec, n_controls: int,
                          cost: CostSpec, grid: TimeGrid, initial_radius: float) -> float:
    """N-independent bound C_xi on sup_t (1/N) sum_i |xi_t^i|^2.

    Gronwall backward from xi_T = 0: with S = (1/N) sum |xi|^2,
    -dS/dt <= (2 alpha + 2 beta + 1) S + D^2, where alpha bounds the local
    coefficient, beta the nonlocal one, and D the source sup along any
    trajectory started inside the initial radius.
    """
    b1, b2 = kernel_bounds(k1), kernel_bounds(k2)
    radius = initial_radius + grid.horizon * velocity_sup_bound(k1, k2, n_controls)
    L = cost.n_observables
    if L:
        y_radius = float(np.sqrt(sum(g.value_bound(radius) ** 2 for g in cost.observables)))
        source = np.sqrt(L) * cost.outer.grad_bound(y_radius) * cost.grad_growth * (1.0 + radius)
    else:
        source = 0.0
    alpha = b1.sup_jacobian + n_controls * b2.sup_jacobian
    beta = b1.sup_jacobian
    c = 2.0 * (alpha + beta) + 1.0
    return float(source**2 / c * np.expm1(c * grid.horizon))
