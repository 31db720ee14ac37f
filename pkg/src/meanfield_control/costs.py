"""Cylindrical running cost, control effort, and the measure derivative.

The running cost acts on the empirical measure through finitely many
observable averages,

    J1(mu) = j(<g_1, mu>, ..., <g_L, mu>),   <g, mu> = (1/N) sum_i g(x^i),

and the total cost adds the H^1 control effort

    J2(u) = (lambda/2) sum_l int_0^T |du^l/dt|^2 dt,

which is evaluated exactly for piecewise-linear control paths.  The builtin
outer function tracks the crowd's center of mass and penalizes its variance:
with y = (y_mean, y_sq),

    j(y) = (w_mean/2) |y_mean - target|^2 + (w_var/4) (y_sq - |y_mean|^2)^2,

where y_sq - |y_mean|^2 is the empirical variance.  The vector observable
x -> x is expanded into d coordinate observables so the cylindrical form
holds literally.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .core import ConfigError, ControlPath, CostSettings, ParticleEnsemble, Trajectory


@dataclass(frozen=True)
class Observable:
    """Scalar observable g with gradient and growth constant |grad g| <= c_g (1+|x|)."""

    name: str
    fn: Callable          # (N, d) -> (N,)
    grad: Callable        # (N, d) -> (N, d)
    grad_growth: float
    value_bound: Callable  # radius R -> sup_{|x|<=R} |g(x)|


def coordinate_observable(axis: int) -> Observable:
    def fn(x):
        return x[:, axis]

    def grad(x):
        g = np.zeros_like(x)
        g[:, axis] = 1.0
        return g

    return Observable(f"x{axis}", fn, grad, 1.0, lambda r: r)


def squared_norm_observable() -> Observable:
    return Observable(
        "sqnorm",
        lambda x: np.sum(x * x, axis=1),
        lambda x: 2.0 * x,
        2.0,
        lambda r: r * r,
    )


@dataclass(frozen=True)
class OuterFunction:
    """j: R^L -> R with gradient and a sup bound for |grad j| on balls."""

    name: str
    n_args: int
    fn: Callable                      # (L,) -> float
    grad: Callable                    # (L,) -> (L,)
    grad_bound: Optional[Callable]    # radius R -> sup_{|y|<=R} |grad j(y)|


def tracking_outer(dim: int, target, mean_weight: float, variance_weight: float) -> OuterFunction:
    t = np.asarray(target, dtype=np.float64)
    w1, w2 = float(mean_weight), float(variance_weight)
    tn = float(np.linalg.norm(t))

    def fn(y):
        m, q = y[:dim], y[dim]
        var = q - np.dot(m, m)
        return 0.5 * w1 * float(np.sum((m - t) ** 2)) + 0.25 * w2 * var**2

    def grad(y):
        m, q = y[:dim], y[dim]
        var = q - np.dot(m, m)
        out = np.empty(dim + 1)
        out[:dim] = w1 * (m - t) - w2 * var * m
        out[dim] = 0.5 * w2 * var
        return out

    def grad_bound(r):
        var = r + r * r
        per_coord = w1 * (r + tn) + w2 * var * r
        return float(np.sqrt(dim * per_coord**2 + (0.5 * w2 * var) ** 2))

    return OuterFunction("tracking", dim + 1, fn, grad, grad_bound)


def zero_outer() -> OuterFunction:
    return OuterFunction("zero", 0, lambda y: 0.0, lambda y: np.zeros(0), lambda r: 0.0)


@dataclass(frozen=True)
class CostSpec:
    observables: tuple  # of Observable
    outer: OuterFunction
    control_weight: float  # lambda > 0

    def __post_init__(self):
        if self.control_weight <= 0.0:
            raise ConfigError("control_weight (lambda) must be positive")
        if len(self.observables) != self.outer.n_args:
            raise ConfigError("outer function arity must match the observable count")

    @property
    def n_observables(self) -> int:
        return len(self.observables)

    @property
    def grad_growth(self) -> float:
        return max((g.grad_growth for g in self.observables), default=0.0)


def tracking_cost(dim: int, target, mean_weight: float, variance_weight: float,
                  control_weight: float) -> CostSpec:
    obs = tuple(coordinate_observable(a) for a in range(dim)) + (squared_norm_observable(),)
    return CostSpec(obs, tracking_outer(dim, target, mean_weight, variance_weight),
                    float(control_weight))


def zero_running_cost(control_weight: float) -> CostSpec:
    return CostSpec((), zero_outer(), float(control_weight))


def build_cost(settings: CostSettings, dim: int, control_weight: float) -> CostSpec:
    if settings.kind == "zero":
        return zero_running_cost(control_weight)
    return tracking_cost(dim, settings.target, settings.mean_weight,
                         settings.variance_weight, control_weight)


# ---------------------------------------------------------------------------
# evaluation


def moments(cost: CostSpec, positions: np.ndarray) -> np.ndarray:
    """(<g_1, mu>, ..., <g_L, mu>) for the empirical measure of positions."""
    return np.array([np.mean(g.fn(positions)) for g in cost.observables])


def running_cost(cost: CostSpec, ensemble) -> float:
    positions = ensemble.positions if isinstance(ensemble, ParticleEnsemble) else np.asarray(ensemble)
    return float(cost.outer.fn(moments(cost, positions)))


def delta_mu_j1(cost: CostSpec, positions: np.ndarray) -> np.ndarray:
    """Measure derivative sum_l (d_l j)(moments) grad g_l(x^i), shape (N, d).

    Coincides with N * grad_x of the particle running cost, which is the
    source term of the adjoint equation.
    """
    positions = np.asarray(positions, dtype=np.float64)
    out = np.zeros_like(positions)
    if not cost.observables:
        return out
    dj = cost.outer.grad(moments(cost, positions))
    for coef, g in zip(dj, cost.observables):
        if coef != 0.0:
            out += coef * g.grad(positions)
    return out


def control_effort(cost: CostSpec, u: ControlPath) -> float:
    """J2(u), exact for piecewise-linear controls."""
    du = u.derivative()
    return 0.5 * cost.control_weight * u.grid.dt * float(np.sum(du * du))


def trapezoid_weights(n_steps: int, dt: float) -> np.ndarray:
    w = np.full(n_steps + 1, dt)
    w[0] = w[-1] = 0.5 * dt
    return w


def total_cost(traj: Trajectory, u: ControlPath, cost: CostSpec) -> float:
    """int_0^T J1(mu_t) dt (trapezoidal in t) plus the exact control effort."""
    if traj.grid.n_steps != u.grid.n_steps:
        raise ConfigError("trajectory and control path live on different grids")
    vals = np.array([running_cost(cost, traj.states[k]) for k in range(traj.grid.n_steps + 1)])
    w = trapezoid_weights(traj.grid.n_steps, traj.grid.dt)
    return float(w @ vals) + control_effort(cost, u)


def j1_w2_lipschitz_constant(cost: CostSpec, m1: float, m2: float) -> float:
    """Constant C_j with |J1(mu) - J1(nu)| <= C_j W_2(mu, nu).

    m1 bounds max_l (|<g_l,mu>| + |<g_l,nu>|) and m2 bounds the sum of second
    moments; the constant is L c_g (1 + 2 sqrt(m2)) sup_{|y| <= L m1} |grad j|.
    """
    L = cost.n_observables
    if L == 0:
        return 0.0
    if cost.outer.grad_bound is None:
        raise ConfigError(f"outer function {cost.outer.name!r} has no gradient bound")
    return L * cost.grad_growth * (1.0 + 2.0 * np.sqrt(m2)) * cost.outer.grad_bound(L * m1)
