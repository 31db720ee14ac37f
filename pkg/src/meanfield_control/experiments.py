"""Scripted experiments: stability constants, adjoint consistency across N,
convergence of optimal controls, and the bundled gradient verification suite.

Sampling is nested: the N-particle initial cloud is a prefix of the
reference cloud drawn from the same seed, which removes most sampling noise
from the rate fits.  Per-N runs are independent and can execute in a process
pool (capped by MEANFIELD_CONTROL_WORKERS); aggregation is sequential and
ordered by N, so outputs are byte-identical for identical config and seed.
"""

from __future__ import annotations

import csv
import json
import os
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from . import __version__ as _pkg_version
from .adjoint import (
    adjoint_solve_backward,
    adjoint_solve_picard,
    l2_adjoint_solve_1d,
    phase_space_diagnostics,
)
from .core import (
    ConfigError,
    ControlPath,
    InitialSpec,
    RunConfig,
    build_time_grid,
    config_hash,
    config_to_toml,
    sample_initial_ensemble,
)
from .costs import build_cost, delta_mu_j1, total_cost, tracking_cost, trapezoid_weights
from .dynamics import dobrushin_gap, forward_solve, linearized_solve
from .gradient import optimize, reduced_gradient, solve_control_problem
from .kernels import KernelSpec
from .wasserstein import w2_with_duplication

# ---------------------------------------------------------------------------
# output plumbing


def worker_count(n_jobs: int) -> int:
    cap = os.environ.get("MEANFIELD_CONTROL_WORKERS")
    if cap is not None:
        return max(1, min(n_jobs, int(cap)))
    return max(1, min(n_jobs, (os.cpu_count() or 2) // 2))


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def write_csv(path, fieldnames, rows) -> None:
    """Write rows atomically (write to a temp file, then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=fieldnames)
            writer.writeheader()
            for row in rows:
                writer.writerow({k: _fmt(v) for k, v in row.items()})
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_manifest(path, config: RunConfig, timings: dict, outputs: list,
                   extra: dict | None = None) -> None:
    import numpy
    import scipy

    payload = {
        "config_hash": config_hash(config),
        "experiment": config.experiment,
        "seed": config.seed,
        "package_version": _pkg_version,
        "versions": {"numpy": numpy.__version__, "scipy": scipy.__version__},
        "timings_s": {k: round(v, 3) for k, v in timings.items()},
        "outputs": [str(o) for o in outputs],
        "config_toml": config_to_toml(config),
    }
    if extra:
        payload.update(extra)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            json.dump(payload, fh, indent=2)
            fh.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _shared_control(config: RunConfig) -> ControlPath:
    anchors = np.asarray(config.control_anchors, dtype=np.float64).reshape(
        config.n_controls, config.dimension)
    return ControlPath.constant(config.grid(), anchors)


# ---------------------------------------------------------------------------
# finite-difference oracle


def finite_difference_directional(initial, u: ControlPath, h_values: np.ndarray,
                                  k1: KernelSpec, k2: KernelSpec, cost, grid,
                                  eps: float = 3e-4) -> float:
    """Central finite difference of the reduced cost along h (h_0 = 0)."""
    up = u.with_values(u.values + eps * h_values)
    um = u.with_values(u.values - eps * h_values)
    jp = total_cost(forward_solve(initial, up, k1, k2, grid), up, cost)
    jm = total_cost(forward_solve(initial, um, k1, k2, grid), um, cost)
    return (jp - jm) / (2.0 * eps)


def admissible_perturbation(grid, n_agents: int, dim: int, rng) -> np.ndarray:
    """Random smooth perturbation with h_0 = 0 and unit sup norm."""
    t = grid.nodes / grid.horizon
    coeff = rng.standard_normal((3, n_agents, dim))
    h = (
        np.sin(np.pi * t)[:, None, None] * coeff[0]
        + np.sin(2.0 * np.pi * t)[:, None, None] * coeff[1]
        + (1.0 - np.cos(np.pi * t))[:, None, None] * coeff[2]
    )
    sup = np.max(np.abs(h))
    return h / sup if sup > 0 else h


def linearized_directional(traj, u: ControlPath, h_values: np.ndarray,
                           k1: KernelSpec, k2: KernelSpec, cost,
                           interaction_sign: float = 1.0) -> float:
    """Directional derivative through the linearized state:
    dJ2(u)[h] + sum_k w_k < delta_mu J1(mu_k), psi_k >_{mu_k}."""
    grid = traj.grid
    h = u.with_values(h_values)
    psi = linearized_solve(traj, u, h, k1, k2, interaction_sign)
    w = trapezoid_weights(grid.n_steps, grid.dt)
    inner = np.array([
        np.mean(np.sum(delta_mu_j1(cost, traj.states[k]) * psi[k], axis=1))
        for k in range(grid.n_steps + 1)
    ])
    du = np.diff(u.values, axis=0) / grid.dt
    dh = np.diff(h_values, axis=0) / grid.dt
    return cost.control_weight * grid.dt * float(np.sum(du * dh)) + float(w @ inner)


# ---------------------------------------------------------------------------
# adjoint consistency across N


@dataclass(frozen=True)
class ConsistencyRow:
    n: int
    y_sup: float       # sup_t (1/N) sum_i |xi^{N,i} - xi^{ref,i}|
    w2_initial: float  # W_2(initial N-cloud, initial reference cloud)
    ratio: float


@dataclass(frozen=True)
class ConsistencyReport:
    rows: tuple
    n_ref: int
    fitted_c: float
    max_ratio: float
    spearman_y: float

    def csv_rows(self):
        for r in self.rows:
            yield {"n": r.n, "y_sup": r.y_sup, "w2_initial": r.w2_initial, "ratio": r.ratio}


def _forward_adjoint_for(config: RunConfig, n: int):
    grid = config.grid()
    cloud = sample_initial_ensemble(config.initial, n, config.seed)
    u = _shared_control(config)
    cost = build_cost(config.cost, config.dimension, config.control_weight)
    traj = forward_solve(cloud, u, config.kernel_interaction, config.kernel_control, grid)
    adj = adjoint_solve_backward(traj, u, config.kernel_interaction, config.kernel_control, cost)
    return cloud, adj


def experiment_adjoint_consistency(config: RunConfig) -> ConsistencyReport:
    """Distance between the N-particle adjoint and the reference-field adjoint.

    The reference adjoint doubles as the characteristics solve seeded at the
    N-cloud positions: with nested sampling those positions are reference
    particles, so their characteristics in the reference field are exactly
    the reference trajectories (first N indices).
    """
    sweep = sorted(config.consistency.sweep)
    n_ref = config.consistency.n_ref
    if max(sweep) > n_ref:
        raise ConfigError("reference size must dominate the sweep")
    cloud_ref, adj_ref = _forward_adjoint_for(config, n_ref)

    jobs = [replace(config, n_particles=n) for n in sweep]
    workers = worker_count(len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_consistency_worker, jobs))
    else:
        results = [_consistency_worker(job) for job in jobs]

    rows = []
    for n, (cloud_n, adj_n) in zip(sweep, results):
        gaps = np.linalg.norm(adj_n.values - adj_ref.values[:, :n], axis=2)
        y_sup = float(np.max(np.mean(gaps, axis=1)))
        dist = w2_with_duplication(cloud_n.positions, cloud_ref.positions,
                                   size_cap=max(n_ref, 4096))
        ratio = y_sup / dist if dist > 0 else 0.0
        rows.append(ConsistencyRow(n, y_sup, dist, ratio))
    ratios = [r.ratio for r in rows if r.ratio > 0]
    fitted = float(np.median(ratios)) if ratios else 0.0
    ys = [r.y_sup for r in rows]
    rho = float(spearmanr(sweep, ys).statistic) if len(rows) > 2 else 0.0
    return ConsistencyReport(tuple(rows), n_ref, fitted,
                             max(ratios) if ratios else 0.0, rho)


def _consistency_worker(config: RunConfig):
    return _forward_adjoint_for(config, config.n_particles)


# ---------------------------------------------------------------------------
# convergence rate of optimal controls


@dataclass(frozen=True)
class RateRow:
    n: int
    control_gap_sq: float  # ||u^N - u^{ref}||_{L^2}^2
    w2_initial_sq: float   # W_2^2(initial N-cloud, initial reference cloud)
    ratio: float
    status: str
    iterations: int


@dataclass(frozen=True)
class RateReport:
    rows: tuple
    n_ref: int
    ref_status: str
    control_weight: float
    fitted_gamma: float     # from max ratio rho = gamma/(lambda - gamma)
    spearman_gap: float
    complete: bool

    def csv_rows(self):
        for r in self.rows:
            yield {
                "n": r.n,
                "control_gap_sq": r.control_gap_sq,
                "w2_initial_sq": r.w2_initial_sq,
                "ratio": r.ratio,
                "status": r.status,
                "iterations": r.iterations,
            }


def _rate_worker(config: RunConfig):
    result = optimize(config)
    return result.u_opt.values, result.status, len(result.history)


def experiment_convergence_rate(config: RunConfig, sweep_settings=None) -> RateReport:
    """Solve the steering problem at every sweep size and against the reference.

    Reports ||u^N - u_ref||_{L^2}^2 against W_2^2 of the initial clouds; the
    theorem behind it bounds their ratio by gamma/(lambda - gamma) once
    lambda clears the problem constant gamma, which is fitted from the data.
    """
    sw = sweep_settings or config.rate
    sweep = sorted(sw.sweep)
    if max(sweep) > sw.n_ref:
        raise ConfigError("reference size must dominate the sweep")
    from .core import control_l2_distance_sq

    jobs = [replace(config, n_particles=n) for n in sweep]
    ref_job = replace(config, n_particles=sw.n_ref)
    workers = worker_count(len(jobs) + 1)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_rate_worker, j) for j in jobs]
            ref_values, ref_status, _ = _rate_worker(ref_job)
            results = [f.result() for f in futures]
    else:
        results = [_rate_worker(j) for j in jobs]
        ref_values, ref_status, _ = _rate_worker(ref_job)

    grid = config.grid()
    cloud_ref = sample_initial_ensemble(config.initial, sw.n_ref, config.seed)
    u_ref = ControlPath(grid, ref_values)
    rows = []
    statuses = [ref_status]
    for n, (values, status, iters) in zip(sweep, results):
        u_n = ControlPath(grid, values)
        gap = control_l2_distance_sq(u_n, u_ref)
        cloud_n = sample_initial_ensemble(config.initial, n, config.seed)
        dist = w2_with_duplication(cloud_n.positions, cloud_ref.positions,
                                   size_cap=max(sw.n_ref, 4096))
        ratio = gap / dist**2 if dist > 0 else 0.0
        rows.append(RateRow(n, gap, dist**2, ratio, status, iters))
        statuses.append(status)
    ratios = [r.ratio for r in rows if r.ratio > 0]
    rho_max = max(ratios) if ratios else 0.0
    lam = config.control_weight
    fitted_gamma = rho_max * lam / (1.0 + rho_max)
    gaps = [r.control_gap_sq for r in rows]
    rho = float(spearmanr(sweep, gaps).statistic) if len(rows) > 2 else 0.0
    complete = all(s == "converged" for s in statuses)
    return RateReport(tuple(rows), sw.n_ref, ref_status, lam,
                      fitted_gamma, rho, complete)


# ---------------------------------------------------------------------------
# bundled verification suite


@dataclass(frozen=True)
class SuiteCheck:
    name: str
    value: float
    threshold: str
    passed: bool


@dataclass(frozen=True)
class SuiteReport:
    checks: tuple

    @property
    def all_passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def csv_rows(self):
        for c in self.checks:
            yield {
                "check": c.name,
                "value": c.value,
                "threshold": c.threshold,
                "passed": int(c.passed),
            }

    def lines(self):
        for c in self.checks:
            status = "PASS" if c.passed else "FAIL"
            yield f"{status}  {c.name}: value={c.value:.3e}  requires {c.threshold}"


def _fit_slope(xs, ys) -> float:
    return float(np.polyfit(np.log(xs), np.log(ys), 1)[0])


def experiment_gradient_suite(config: RunConfig, psi_interaction_sign: float = 1.0) -> SuiteReport:
    """Run every oracle check on frozen desk-scale instances; see SuiteReport.

    psi_interaction_sign is a fault-injection hook for the linearization
    check only (a corrupted perturbation operator must make it fail).
    """
    grid = config.grid()
    k1, k2 = config.kernel_interaction, config.kernel_control
    cost = build_cost(config.cost, config.dimension, config.control_weight)
    cloud = sample_initial_ensemble(config.initial, config.n_particles, config.seed)
    u = _shared_control(config)
    rng = np.random.default_rng(config.seed + 101)
    h = admissible_perturbation(grid, config.n_controls, config.dimension, rng)
    traj = forward_solve(cloud, u, k1, k2, grid)
    checks = []

    # linearized state: flow perturbation must be O(delta^2)
    psi = linearized_solve(traj, u, u.with_values(h), k1, k2, psi_interaction_sign)
    deltas = (1e-1, 1e-2, 1e-3)
    errs = []
    for d in deltas:
        pert = forward_solve(cloud, u.with_values(u.values + d * h), k1, k2, grid)
        errs.append(float(np.max(np.abs(pert.states - traj.states - d * psi))))
    slope = _fit_slope(deltas, errs)
    checks.append(SuiteCheck("linearization_order", slope, "slope in [1.9, 2.1]",
                             1.9 <= slope <= 2.1))

    # directional derivative: linearized route vs adjoint route vs finite differences
    adj = adjoint_solve_backward(traj, u, k1, k2, cost)
    report = reduced_gradient(traj, adj, u, k1, k2, cost)
    dd_psi = linearized_directional(traj, u, h, k1, k2, cost, psi_interaction_sign)
    dd_adj = report.directional(h)
    scale = max(abs(dd_adj), 1e-12)
    rel_psi = abs(dd_psi - dd_adj) / scale
    checks.append(SuiteCheck("linearized_vs_adjoint_directional", rel_psi,
                             "relative diff <= 1e-4", rel_psi <= 1e-4))

    worst = 0.0
    for trial in range(5):
        h_t = admissible_perturbation(grid, config.n_controls, config.dimension, rng)
        fd = finite_difference_directional(cloud, u, h_t, k1, k2, cost, grid)
        dd = report.directional(h_t)
        worst = max(worst, abs(dd - fd) / max(abs(fd), 1e-12))
    checks.append(SuiteCheck("adjoint_vs_finite_difference", worst,
                             "relative error <= 1e-4", worst <= 1e-4))

    # two adjoint discretizations of the same equation
    picard = adjoint_solve_picard(traj, u, k1, k2, cost, tol=1e-12)
    gap = float(np.max(np.abs(picard.values - adj.values)))
    checks.append(SuiteCheck("backward_vs_picard", gap, "sup diff <= 1e-6", gap <= 1e-6))

    # scalar costate gradient vs vector adjoint, 1-d, refined in N and dt
    residuals = _scalar_adjoint_residuals(config)
    monotone = bool(residuals[0] > residuals[1] > residuals[2])
    checks.append(SuiteCheck("scalar_gradient_vs_adjoint_trend", residuals[-1],
                             "residual decreasing over 3 refinements", monotone))

    # stability envelope on randomized pairs
    ok = _dobrushin_trials(config, trials=20)
    checks.append(SuiteCheck("dobrushin_envelope", float(ok), "all nodes satisfied", ok == 1.0))

    # phase-space weak form under dt refinement
    ps_slope = _phase_space_slope(config)
    checks.append(SuiteCheck("phase_space_weak_form_order", ps_slope,
                             "slope in [1.7, 2.3]", 1.7 <= ps_slope <= 2.3))
    return SuiteReport(tuple(checks))


def _scalar_adjoint_residuals(config: RunConfig) -> list:
    """Relative sup gap between d_x q and xi on three joint N/dt refinements."""
    k1 = replace(config.kernel_interaction)
    k2 = replace(config.kernel_control)
    lam = config.control_weight
    out = []
    for level in range(3):
        n = 48 * 2**level
        steps = 32 * 2**level
        grid = build_time_grid(config.horizon, steps)
        spec = InitialSpec(name="uniform_box", low=(0.0,), high=(1.0,), mode="halton")
        cloud = sample_initial_ensemble(spec, n, config.seed)
        cost = tracking_cost(1, (1.2,), 1.0, 0.5, lam)
        u = ControlPath.constant(grid, np.array([[-0.4], [1.6]]))
        traj = forward_solve(cloud, u, k1, k2, grid)
        adj = adjoint_solve_backward(traj, u, k1, k2, cost)
        scalar = l2_adjoint_solve_1d(traj, u, k1, k2, cost)
        grad = scalar.gradient(traj)
        gap = np.max(np.abs(grad - adj.values[:, :, 0]))
        out.append(float(gap / max(np.max(np.abs(adj.values)), 1e-300)))
    return out


def _dobrushin_trials(config: RunConfig, trials: int = 20) -> float:
    grid = config.grid()
    k1, k2 = config.kernel_interaction, config.kernel_control
    u = _shared_control(config)
    all_ok = True
    for trial in range(trials):
        rng = np.random.default_rng(config.seed + 7919 * (trial + 1))
        cloud_a = sample_initial_ensemble(config.initial, config.n_particles,
                                          config.seed + 2 * trial)
        if trial % 2 == 0:
            cloud_b = sample_initial_ensemble(config.initial, config.n_particles,
                                              config.seed + 2 * trial + 1)
            u_b = u
        else:
            cloud_b = cloud_a
            h = admissible_perturbation(grid, config.n_controls, config.dimension, rng)
            u_b = u.with_values(u.values + 0.5 * h)
        traj_a = forward_solve(cloud_a, u, k1, k2, grid)
        traj_b = forward_solve(cloud_b, u_b, k1, k2, grid)
        rep = dobrushin_gap(traj_a, traj_b, u, u_b, k1, k2)
        all_ok = all_ok and rep.all_satisfied
    return 1.0 if all_ok else 0.0


def _phase_space_slope(config: RunConfig) -> float:
    k1, k2 = config.kernel_interaction, config.kernel_control
    cost = build_cost(config.cost, config.dimension, config.control_weight)
    cloud = sample_initial_ensemble(config.initial, min(config.n_particles, 48), config.seed)
    residuals = []
    base = max(config.n_steps, 16)
    steps_list = [base // 4, base // 2, base]
    for steps in steps_list:
        grid = build_time_grid(config.horizon, steps)
        anchors = np.asarray(config.control_anchors, dtype=np.float64).reshape(
            config.n_controls, config.dimension)
        u = ControlPath.constant(grid, anchors)
        traj = forward_solve(cloud, u, k1, k2, grid)
        adj = adjoint_solve_backward(traj, u, k1, k2, cost)
        rep = phase_space_diagnostics(traj, adj, u, k1, k2, cost)
        residuals.append(rep.max_residual)
    dts = [config.horizon / s for s in steps_list]
    return _fit_slope(dts, residuals)


# ---------------------------------------------------------------------------
# timing helper shared by the CLI


def timed(fn, *args, **kwargs):
    t0 = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, time.perf_counter() - t0
