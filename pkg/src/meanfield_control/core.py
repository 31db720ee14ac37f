"""Shared domain types, the uniform time grid, sampling, and run configuration.

Conventions used throughout the package:

* particle positions are float64 arrays of shape (N, d),
* control values live on the time grid, shape (n_steps+1, M, d), and are
  interpreted as piecewise-linear in time (derivative piecewise-constant),
* every array stored inside a domain type is frozen (read-only); new values
  are produced by constructing new objects.
"""

from __future__ import annotations

import hashlib
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.stats import qmc, truncnorm

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    """Invalid configuration: bad value, unknown key, missing file."""


class NumericsError(RuntimeError):
    """A solver produced non-finite values or failed to converge."""


def _frozen(a, dtype=np.float64) -> np.ndarray:
    out = np.array(a, dtype=dtype, order="C", copy=True)
    out.setflags(write=False)
    return out


# ---------------------------------------------------------------------------
# time grid


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid on [0, T] with nodes t_k = k*dt, k = 0..n_steps."""

    horizon: float
    n_steps: int

    def __post_init__(self):
        if not np.isfinite(self.horizon) or self.horizon <= 0.0:
            raise ConfigError(f"horizon must be positive, got {self.horizon}")
        if self.n_steps < 2:
            raise ConfigError(f"n_steps must be at least 2, got {self.n_steps}")

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.n_steps + 1)


def build_time_grid(horizon: float, n_steps: int) -> TimeGrid:
    return TimeGrid(float(horizon), int(n_steps))


# ---------------------------------------------------------------------------
# states and controls


@dataclass(frozen=True)
class ParticleEnsemble:
    """N equally weighted particles in R^d; the empirical measure (1/N) sum delta_{x^i}."""

    positions: np.ndarray  # (N, d)

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[0] < 1:
            raise ConfigError(f"positions must be (N, d) with N >= 1, got {pos.shape}")
        if not np.all(np.isfinite(pos)):
            raise NumericsError("ensemble contains non-finite positions")
        object.__setattr__(self, "positions", _frozen(pos))

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def dim(self) -> int:
        return self.positions.shape[1]

    def second_moment(self) -> float:
        return float(np.mean(np.sum(self.positions**2, axis=1)))


@dataclass(frozen=True)
class ControlPath:
    """Trajectories of the M control agents, piecewise-linear on the grid.

    The node-0 row is the anchored initial value: admissible perturbations
    vanish there, and the optimizer never changes it.
    """

    grid: TimeGrid
    values: np.ndarray  # (n_steps+1, M, d)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 3 or vals.shape[0] != self.grid.n_steps + 1:
            raise ConfigError(
                f"control values must be (n_steps+1, M, d), got {vals.shape}"
            )
        if vals.size and not np.all(np.isfinite(vals)):
            raise NumericsError("control path contains non-finite values")
        object.__setattr__(self, "values", _frozen(vals))

    @property
    def n_agents(self) -> int:
        return self.values.shape[1]

    @property
    def dim(self) -> int:
        return self.values.shape[2]

    @property
    def initial(self) -> np.ndarray:
        return self.values[0]

    @staticmethod
    def constant(grid: TimeGrid, anchors) -> "ControlPath":
        anchors = np.asarray(anchors, dtype=np.float64)
        if anchors.ndim != 2:
            raise ConfigError(f"anchors must be (M, d), got {anchors.shape}")
        vals = np.broadcast_to(anchors, (grid.n_steps + 1, *anchors.shape))
        return ControlPath(grid, vals.copy())

    def at(self, t: float) -> np.ndarray:
        """Piecewise-linear evaluation at an arbitrary time in [0, T]."""
        dt = self.grid.dt
        s = min(max(t / dt, 0.0), float(self.grid.n_steps))
        k = min(int(s), self.grid.n_steps - 1)
        w = s - k
        return (1.0 - w) * self.values[k] + w * self.values[k + 1]

    def derivative(self) -> np.ndarray:
        """Interval-wise du/dt, shape (n_steps, M, d)."""
        return np.diff(self.values, axis=0) / self.grid.dt

    def midpoints(self) -> np.ndarray:
        """Values at t_k + dt/2 (exact for piecewise-linear controls)."""
        return 0.5 * (self.values[:-1] + self.values[1:])

    def with_values(self, values) -> "ControlPath":
        return ControlPath(self.grid, values)


def control_l2_distance_sq(u: ControlPath, v: ControlPath) -> float:
    """Exact squared L^2((0,T)) distance between two piecewise-linear paths.

    On each interval the difference w is linear, so
    int |w|^2 dt = (dt/3) (|w_k|^2 + w_k.w_{k+1} + |w_{k+1}|^2).
    """
    if u.values.shape != v.values.shape:
        raise ConfigError("control paths must share grid and shape")
    w = u.values - v.values
    a, b = w[:-1], w[1:]
    per = np.sum(a * a, axis=(1, 2)) + np.sum(a * b, axis=(1, 2)) + np.sum(b * b, axis=(1, 2))
    return float(u.grid.dt / 3.0 * np.sum(per))


@dataclass(frozen=True)
class Trajectory:
    """Forward particle states on the grid; frame k is the ensemble at t_k."""

    grid: TimeGrid
    states: np.ndarray  # (n_steps+1, N, d)

    def __post_init__(self):
        st = np.asarray(self.states, dtype=np.float64)
        if st.ndim != 3 or st.shape[0] != self.grid.n_steps + 1:
            raise ConfigError(f"states must be (n_steps+1, N, d), got {st.shape}")
        object.__setattr__(self, "states", _frozen(st))

    @property
    def n_particles(self) -> int:
        return self.states.shape[1]

    @property
    def dim(self) -> int:
        return self.states.shape[2]

    def frame(self, k: int) -> ParticleEnsemble:
        return ParticleEnsemble(self.states[k])


@dataclass(frozen=True)
class AdjointTrajectory:
    """Adjoint velocities xi_k^i on the grid, aligned with a Trajectory.

    The terminal frame is identically zero; weighted by 1/N the frames are
    the atoms of the momentum measure m_t.
    """

    grid: TimeGrid
    values: np.ndarray  # (n_steps+1, N, d)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 3 or vals.shape[0] != self.grid.n_steps + 1:
            raise ConfigError(f"adjoint values must be (n_steps+1, N, d), got {vals.shape}")
        object.__setattr__(self, "values", _frozen(vals))

    @property
    def n_particles(self) -> int:
        return self.values.shape[1]

    def sup_mean_square(self) -> float:
        """max_k (1/N) sum_i |xi_k^i|^2, the quantity with the N-uniform bound."""
        return float(np.max(np.mean(np.sum(self.values**2, axis=2), axis=1)))


# ---------------------------------------------------------------------------
# initial measures

_INITIAL_NAMES = ("uniform_box", "truncated_gaussian", "point")
_INITIAL_MODES = ("sample", "halton")


@dataclass(frozen=True)
class InitialSpec:
    """Compactly supported initial measure plus how to draw particles from it.

    mode="sample" draws i.i.d. points from a seeded generator; mode="halton"
    produces a deterministic low-discrepancy cloud (used for reference clouds).
    Draws are prefix-stable: the first N points of an (N', seed) draw equal
    the (N, seed) draw for N <= N'.
    """

    name: str
    low: tuple = ()          # uniform_box
    high: tuple = ()
    mean: tuple = ()         # truncated_gaussian
    sd: float = 1.0
    halfwidth: float = 3.0   # truncation, in units of sd
    point: tuple = ()        # point mass
    mode: str = "sample"

    def __post_init__(self):
        if self.name not in _INITIAL_NAMES:
            raise ConfigError(
                f"unknown initial measure {self.name!r}; supported: {_INITIAL_NAMES}"
            )
        if self.mode not in _INITIAL_MODES:
            raise ConfigError(f"unknown sampling mode {self.mode!r}")
        if self.name == "uniform_box":
            if len(self.low) != len(self.high) or not self.low:
                raise ConfigError("uniform_box needs matching low/high vectors")
            if not all(l < h for l, h in zip(self.low, self.high)):
                raise ConfigError("uniform_box needs low < high componentwise")
        if self.name == "truncated_gaussian":
            if not self.mean:
                raise ConfigError("truncated_gaussian needs a mean vector")
            if self.sd <= 0 or self.halfwidth <= 0:
                raise ConfigError("truncated_gaussian needs sd > 0 and halfwidth > 0")
        if self.name == "point" and not self.point:
            raise ConfigError("point measure needs a point")

    @property
    def dim(self) -> int:
        if self.name == "uniform_box":
            return len(self.low)
        if self.name == "truncated_gaussian":
            return len(self.mean)
        return len(self.point)

    def support_radius(self) -> float:
        """sup |x| over the support (used for a-priori bounds)."""
        if self.name == "uniform_box":
            corner = np.maximum(np.abs(np.asarray(self.low)), np.abs(np.asarray(self.high)))
            return float(np.linalg.norm(corner))
        if self.name == "truncated_gaussian":
            m = np.asarray(self.mean)
            return float(np.linalg.norm(np.abs(m) + self.halfwidth * self.sd))
        return float(np.linalg.norm(self.point))


def _unit_samples(spec: InitialSpec, n: int, d: int, seed: int) -> np.ndarray:
    if spec.mode == "halton":
        return qmc.Halton(d=d, scramble=False).random(n)
    return np.random.default_rng(seed).random((n, d))


def sample_initial_ensemble(spec: InitialSpec, n: int, seed: int = 0) -> ParticleEnsemble:
    """Draw N particles from the configured initial measure, deterministically."""
    if n < 1:
        raise ConfigError(f"need n >= 1 particles, got {n}")
    d = spec.dim
    if spec.name == "point":
        return ParticleEnsemble(np.tile(np.asarray(spec.point, dtype=np.float64), (n, 1)))
    u = _unit_samples(spec, n, d, seed)
    if spec.name == "uniform_box":
        low = np.asarray(spec.low, dtype=np.float64)
        high = np.asarray(spec.high, dtype=np.float64)
        return ParticleEnsemble(low + u * (high - low))
    # truncated gaussian: per-coordinate inverse-CDF keeps draws prefix-stable
    w = spec.halfwidth
    x = truncnorm.ppf(u, -w, w, loc=0.0, scale=spec.sd)
    return ParticleEnsemble(np.asarray(spec.mean, dtype=np.float64) + x)


# ---------------------------------------------------------------------------
# run configuration


@dataclass(frozen=True)
class OptimizerSettings:
    max_iter: int = 200
    grad_tol: float = 1e-6
    armijo_c1: float = 1e-4
    armijo_shrink: float = 0.5
    armijo_init_step: float = 1.0
    max_shrinks: int = 40
    use_l2_gradient: bool = False

    def __post_init__(self):
        if self.max_iter < 1 or self.max_shrinks < 0:
            raise ConfigError("optimizer iteration counts must be positive")
        if not (0.0 < self.armijo_c1 < 1.0 and 0.0 < self.armijo_shrink < 1.0):
            raise ConfigError("need 0 < armijo_c1 < 1 and 0 < armijo_shrink < 1")
        if self.armijo_init_step <= 0.0 or self.grad_tol <= 0.0:
            raise ConfigError("need armijo_init_step > 0 and grad_tol > 0")


@dataclass(frozen=True)
class CostSettings:
    """Declarative form of the running cost; see costs.build_cost."""

    kind: str = "tracking"  # "tracking" | "zero"
    target: tuple = ()
    mean_weight: float = 1.0
    variance_weight: float = 0.0

    def __post_init__(self):
        if self.kind not in ("tracking", "zero"):
            raise ConfigError(f"unknown cost kind {self.kind!r}")
        if self.kind == "tracking" and not self.target:
            raise ConfigError("tracking cost needs a target point")
        if self.mean_weight < 0 or self.variance_weight < 0:
            raise ConfigError("cost weights must be nonnegative")


@dataclass(frozen=True)
class SweepSettings:
    sweep: tuple = (16, 32, 64, 128, 256)
    n_ref: int = 2048

    def __post_init__(self):
        if not self.sweep or any(n < 1 for n in self.sweep):
            raise ConfigError("sweep must list positive particle counts")
        if any(self.n_ref % n != 0 for n in self.sweep):
            raise ConfigError(
                f"n_ref={self.n_ref} must be a multiple of every sweep size "
                f"{tuple(self.sweep)} (equal-size transport by duplication)"
            )


_EXPERIMENTS = ("solve", "check", "consistency", "rate")


@dataclass(frozen=True)
class RunConfig:
    """Everything needed to reproduce a run bit-for-bit."""

    dimension: int
    n_particles: int
    n_controls: int
    horizon: float
    n_steps: int
    kernel_interaction: "KernelSpec"
    kernel_control: "KernelSpec"
    cost: CostSettings
    control_weight: float
    initial: InitialSpec
    control_anchors: tuple  # M tuples of d floats
    seed: int = 0
    experiment: str = "solve"
    optimizer: OptimizerSettings = field(default_factory=OptimizerSettings)
    consistency: SweepSettings = field(default_factory=lambda: SweepSettings((16, 32, 64, 128, 256, 512), 2048))
    rate: SweepSettings = field(default_factory=SweepSettings)

    def __post_init__(self):
        if self.dimension < 1 or self.n_particles < 1 or self.n_controls < 0:
            raise ConfigError("dimension and particle count must be positive, controls >= 0")
        if self.control_weight <= 0.0:
            raise ConfigError("control_weight (lambda) must be positive")
        if self.experiment not in _EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}; pick from {_EXPERIMENTS}")
        if self.initial.dim != self.dimension:
            raise ConfigError("initial measure dimension does not match run dimension")
        anchors = tuple(tuple(float(v) for v in a) for a in self.control_anchors)
        if len(anchors) != self.n_controls or any(len(a) != self.dimension for a in anchors):
            raise ConfigError("control_anchors must be M vectors of length d")
        object.__setattr__(self, "control_anchors", anchors)
        if self.cost.kind == "tracking" and len(self.cost.target) != self.dimension:
            raise ConfigError("cost target dimension does not match run dimension")

    def grid(self) -> TimeGrid:
        return build_time_grid(self.horizon, self.n_steps)

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, seed=int(seed))


# --- TOML schema -----------------------------------------------------------
#
# The on-disk format is TOML with the fixed sections below; unknown keys are
# a hard error.  The full schema is documented in the README.

_SCHEMA = {
    "run": {"experiment", "seed"},
    "space": {"dimension"},
    "time": {"horizon", "n_steps"},
    "particles": {"count", "initial"},
    "particles.initial": {"name", "low", "high", "mean", "sd", "halfwidth", "point", "mode"},
    "controls": {"count", "anchors"},
    "kernel": {"interaction", "control"},
    "kernel.interaction": {"family", "amplitude", "width"},
    "kernel.control": {"family", "amplitude", "width"},
    "cost": {"kind", "target", "mean_weight", "variance_weight", "control_weight"},
    "optimizer": {
        "max_iter", "grad_tol", "armijo_c1", "armijo_shrink",
        "armijo_init_step", "max_shrinks", "use_l2_gradient",
    },
    "experiments": {"consistency", "rate"},
    "experiments.consistency": {"sweep", "n_ref"},
    "experiments.rate": {"sweep", "n_ref"},
}
_REQUIRED_SECTIONS = ("space", "time", "particles", "controls", "kernel", "cost")


def _check_keys(data: dict, path: str = ""):
    allowed = _SCHEMA.get(path if path else None)
    if path == "":
        allowed = set(_SCHEMA) - {k for k in _SCHEMA if "." in k}
    if allowed is None:
        return
    for key, value in data.items():
        if key not in allowed:
            raise ConfigError(f"unknown config key {key!r} in section [{path or 'top level'}]")
        sub = f"{path}.{key}" if path else key
        if isinstance(value, dict) and sub in _SCHEMA:
            _check_keys(value, sub)
        elif isinstance(value, dict) and sub not in _SCHEMA:
            raise ConfigError(f"unexpected table [{sub}] in config")


def config_from_dict(data: dict) -> RunConfig:
    from .kernels import KernelSpec  # local import to avoid a cycle

    _check_keys(data)
    for section in _REQUIRED_SECTIONS:
        if section not in data:
            raise ConfigError(f"missing required config section [{section}]")

    def get(sec: dict, key, default=None, required=False):
        if key not in sec:
            if required:
                raise ConfigError(f"missing required config key {key!r}")
            return default
        return sec[key]

    space, time_, parts = data["space"], data["time"], data["particles"]
    ctrls, kern, cost = data["controls"], data["kernel"], data["cost"]
    init = get(parts, "initial", required=True)
    if "interaction" not in kern or "control" not in kern:
        raise ConfigError("config needs [kernel.interaction] and [kernel.control]")

    def kernel_of(sec: dict) -> KernelSpec:
        return KernelSpec(
            family=get(sec, "family", required=True),
            amplitude=float(get(sec, "amplitude", 0.0)),
            width=float(get(sec, "width", 1.0)),
        )

    initial = InitialSpec(
        name=get(init, "name", required=True),
        low=tuple(get(init, "low", ())),
        high=tuple(get(init, "high", ())),
        mean=tuple(get(init, "mean", ())),
        sd=float(get(init, "sd", 1.0)),
        halfwidth=float(get(init, "halfwidth", 3.0)),
        point=tuple(get(init, "point", ())),
        mode=get(init, "mode", "sample"),
    )
    opt = data.get("optimizer", {})
    optimizer = OptimizerSettings(
        max_iter=int(get(opt, "max_iter", 200)),
        grad_tol=float(get(opt, "grad_tol", 1e-6)),
        armijo_c1=float(get(opt, "armijo_c1", 1e-4)),
        armijo_shrink=float(get(opt, "armijo_shrink", 0.5)),
        armijo_init_step=float(get(opt, "armijo_init_step", 1.0)),
        max_shrinks=int(get(opt, "max_shrinks", 40)),
        use_l2_gradient=bool(get(opt, "use_l2_gradient", False)),
    )
    exps = data.get("experiments", {})

    def sweep_of(sec, default: SweepSettings) -> SweepSettings:
        if sec is None:
            return default
        return SweepSettings(
            sweep=tuple(int(n) for n in get(sec, "sweep", default.sweep)),
            n_ref=int(get(sec, "n_ref", default.n_ref)),
        )

    run = data.get("run", {})
    return RunConfig(
        dimension=int(get(space, "dimension", required=True)),
        n_particles=int(get(parts, "count", required=True)),
        n_controls=int(get(ctrls, "count", required=True)),
        horizon=float(get(time_, "horizon", required=True)),
        n_steps=int(get(time_, "n_steps", required=True)),
        kernel_interaction=kernel_of(kern["interaction"]),
        kernel_control=kernel_of(kern["control"]),
        cost=CostSettings(
            kind=get(cost, "kind", "tracking"),
            target=tuple(get(cost, "target", ())),
            mean_weight=float(get(cost, "mean_weight", 1.0)),
            variance_weight=float(get(cost, "variance_weight", 0.0)),
        ),
        control_weight=float(get(cost, "control_weight", required=True)),
        initial=initial,
        control_anchors=tuple(tuple(a) for a in get(ctrls, "anchors", ())),
        seed=int(get(run, "seed", 0)),
        experiment=get(run, "experiment", "solve"),
        optimizer=optimizer,
        consistency=sweep_of(exps.get("consistency"), SweepSettings((16, 32, 64, 128, 256, 512), 2048)),
        rate=sweep_of(exps.get("rate"), SweepSettings()),
    )


def config_to_dict(cfg: RunConfig) -> dict:
    init = {"name": cfg.initial.name, "mode": cfg.initial.mode}
    if cfg.initial.name == "uniform_box":
        init["low"] = list(cfg.initial.low)
        init["high"] = list(cfg.initial.high)
    elif cfg.initial.name == "truncated_gaussian":
        init["mean"] = list(cfg.initial.mean)
        init["sd"] = cfg.initial.sd
        init["halfwidth"] = cfg.initial.halfwidth
    else:
        init["point"] = list(cfg.initial.point)
    cost = {
        "kind": cfg.cost.kind,
        "mean_weight": cfg.cost.mean_weight,
        "variance_weight": cfg.cost.variance_weight,
        "control_weight": cfg.control_weight,
    }
    if cfg.cost.target:
        cost["target"] = list(cfg.cost.target)
    return {
        "run": {"experiment": cfg.experiment, "seed": cfg.seed},
        "space": {"dimension": cfg.dimension},
        "time": {"horizon": cfg.horizon, "n_steps": cfg.n_steps},
        "particles": {"count": cfg.n_particles, "initial": init},
        "controls": {
            "count": cfg.n_controls,
            "anchors": [list(a) for a in cfg.control_anchors],
        },
        "kernel": {
            "interaction": {
                "family": cfg.kernel_interaction.family,
                "amplitude": cfg.kernel_interaction.amplitude,
                "width": cfg.kernel_interaction.width,
            },
            "control": {
                "family": cfg.kernel_control.family,
                "amplitude": cfg.kernel_control.amplitude,
                "width": cfg.kernel_control.width,
            },
        },
        "cost": cost,
        "optimizer": {
            "max_iter": cfg.optimizer.max_iter,
            "grad_tol": cfg.optimizer.grad_tol,
            "armijo_c1": cfg.optimizer.armijo_c1,
            "armijo_shrink": cfg.optimizer.armijo_shrink,
            "armijo_init_step": cfg.optimizer.armijo_init_step,
            "max_shrinks": cfg.optimizer.max_shrinks,
            "use_l2_gradient": cfg.optimizer.use_l2_gradient,
        },
        "experiments": {
            "consistency": {"sweep": list(cfg.consistency.sweep), "n_ref": cfg.consistency.n_ref},
            "rate": {"sweep": list(cfg.rate.sweep), "n_ref": cfg.rate.n_ref},
        },
    }


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise ConfigError(f"cannot serialize config value {v!r}")


def _emit_toml(data: dict, path: str, lines: list):
    scalars = {k: v for k, v in data.items() if not isinstance(v, dict)}
    tables = {k: v for k, v in data.items() if isinstance(v, dict)}
    if scalars or (path and not tables):
        if path:
            lines.append(f"[{path}]")
        for k, v in scalars.items():
            lines.append(f"{k} = {_toml_value(v)}")
        lines.append("")
    for k, v in tables.items():
        _emit_toml(v, f"{path}.{k}" if path else k, lines)


def config_to_toml(cfg: RunConfig) -> str:
    lines: list = []
    _emit_toml(config_to_dict(cfg), "", lines)
    return "\n".join(lines).strip() + "\n"


def config_from_toml(text: str) -> RunConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"invalid TOML: {e}") from e
    return config_from_dict(data)


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return config_from_toml(p.read_text())


def config_hash(cfg: RunConfig) -> str:
    """Stable content hash of a configuration (used to name output files)."""
    return hashlib.sha256(config_to_toml(cfg).encode()).hexdigest()[:12]
