import dataclasses

import numpy as np
import pytest

from meanfield_control import (
    ConfigError,
    ControlPath,
    InitialSpec,
    RunConfig,
    build_time_grid,
    config_from_toml,
    config_to_toml,
    control_l2_distance_sq,
    sample_initial_ensemble,
)
from meanfield_control.core import (
    CostSettings,
    OptimizerSettings,
    ParticleEnsemble,
    SweepSettings,
    config_hash,
)
from meanfield_control.kernels import KernelSpec


def test_time_grid_nodes():
    grid = build_time_grid(1.0, 4)
    assert np.allclose(grid.nodes, [0.0, 0.25, 0.5, 0.75, 1.0])
    assert grid.nodes[-1] == 1.0


def test_time_grid_dt():
    assert build_time_grid(0.5, 100).dt == pytest.approx(0.005, abs=0)


def test_time_grid_rejects_single_step():
    with pytest.raises(ConfigError):
        build_time_grid(2.0, 1)


def test_time_grid_rejects_nonpositive_horizon():
    with pytest.raises(ConfigError):
        build_time_grid(0.0, 10)
    with pytest.raises(ConfigError):
        build_time_grid(-1.0, 10)


def test_sampling_is_deterministic():
    spec = InitialSpec(name="uniform_box", low=(0.0,), high=(1.0,))
    a = sample_initial_ensemble(spec, 3, seed=7)
    b = sample_initial_ensemble(spec, 3, seed=7)
    assert np.array_equal(a.positions, b.positions)
    c = sample_initial_ensemble(spec, 3, seed=8)
    assert not np.array_equal(a.positions, c.positions)


def test_point_mass_sampling():
    spec = InitialSpec(name="point", point=(1.5, -2.0))
    ens = sample_initial_ensemble(spec, 5, seed=0)
    assert ens.positions.shape == (5, 2)
    assert np.all(ens.positions == np.array([1.5, -2.0]))


def test_uniform_square_monte_carlo_mean():
    # frozen value from the seeded draw; the loose bound is the actual check
    spec = InitialSpec(name="uniform_box", low=(0.0, 0.0), high=(1.0, 1.0))
    ens = sample_initial_ensemble(spec, 10_000, seed=42)
    mean = ens.positions.mean(axis=0)
    assert np.all(np.abs(mean - 0.5) < 0.02)
    assert np.allclose(mean, [0.5004854441929074, 0.49957184025658824], atol=1e-12)


def test_nested_sampling_prefix_property():
    for spec in [
        InitialSpec(name="uniform_box", low=(0.0, 0.0), high=(1.0, 2.0)),
        InitialSpec(name="truncated_gaussian", mean=(0.5, 0.5), sd=0.3, halfwidth=2.5),
        InitialSpec(name="uniform_box", low=(0.0, 0.0), high=(1.0, 1.0), mode="halton"),
    ]:
        small = sample_initial_ensemble(spec, 16, seed=5)
        big = sample_initial_ensemble(spec, 64, seed=5)
        assert np.array_equal(big.positions[:16], small.positions)


def test_halton_mode_ignores_seed_and_fills_box():
    spec = InitialSpec(name="uniform_box", low=(0.0,), high=(1.0,), mode="halton")
    a = sample_initial_ensemble(spec, 128, seed=1)
    b = sample_initial_ensemble(spec, 128, seed=2)
    assert np.array_equal(a.positions, b.positions)
    assert abs(a.positions.mean() - 0.5) < 0.01


def test_truncated_gaussian_stays_inside_support():
    spec = InitialSpec(name="truncated_gaussian", mean=(1.0,), sd=0.5, halfwidth=2.0)
    ens = sample_initial_ensemble(spec, 500, seed=3)
    assert np.all(np.abs(ens.positions - 1.0) <= 1.0 + 1e-12)
    assert spec.support_radius() == pytest.approx(2.0)


def test_unknown_initial_spec_rejected():
    with pytest.raises(ConfigError):
        InitialSpec(name="cauchy", low=(0.0,), high=(1.0,))


def test_ensemble_arrays_are_frozen():
    ens = sample_initial_ensemble(
        InitialSpec(name="uniform_box", low=(0.0,), high=(1.0,)), 4, seed=0
    )
    with pytest.raises(ValueError):
        ens.positions[0, 0] = 3.0


def test_ensemble_rejects_nonfinite():
    from meanfield_control import NumericsError

    with pytest.raises(NumericsError):
        ParticleEnsemble(np.array([[np.nan, 0.0]]))


def test_control_path_interpolation():
    grid = build_time_grid(1.0, 2)
    vals = np.zeros((3, 1, 1))
    vals[:, 0, 0] = [0.0, 1.0, 3.0]
    u = ControlPath(grid, vals)
    assert u.at(0.25)[0, 0] == pytest.approx(0.5)
    assert u.at(0.75)[0, 0] == pytest.approx(2.0)
    assert u.at(1.0)[0, 0] == pytest.approx(3.0)
    assert np.allclose(u.midpoints()[:, 0, 0], [0.5, 2.0])
    assert np.allclose(u.derivative()[:, 0, 0], [2.0, 4.0])


def test_control_l2_distance_exact_for_linear_paths():
    grid = build_time_grid(1.0, 10)
    a = ControlPath.constant(grid, np.array([[0.0]]))
    ramp = grid.nodes[:, None, None] * np.ones((1, 1))
    b = a.with_values(a.values + ramp)
    # int_0^1 t^2 dt = 1/3
    assert control_l2_distance_sq(a, b) == pytest.approx(1.0 / 3.0, rel=1e-14)


def _example_config() -> RunConfig:
    return RunConfig(
        dimension=2,
        n_particles=64,
        n_controls=2,
        horizon=1.0,
        n_steps=100,
        kernel_interaction=KernelSpec("gaussian", -0.8, 1.0),
        kernel_control=KernelSpec("gaussian", 1.2, 1.0),
        cost=CostSettings(kind="tracking", target=(1.5, 1.5), mean_weight=1.0, variance_weight=0.25),
        control_weight=5.0,
        initial=InitialSpec(name="uniform_box", low=(0.0, 0.0), high=(1.0, 1.0)),
        control_anchors=((-0.4, -0.2), (-0.2, -0.4)),
        seed=7,
        optimizer=OptimizerSettings(max_iter=150, grad_tol=1e-6),
        consistency=SweepSettings((16, 32, 64), 128),
        rate=SweepSettings((16, 32), 64),
    )


def test_config_roundtrip_is_identical():
    cfg = _example_config()
    text = config_to_toml(cfg)
    back = config_from_toml(text)
    assert back == cfg
    assert config_hash(back) == config_hash(cfg)


def test_config_seed_override_changes_hash():
    cfg = _example_config()
    assert config_hash(cfg.with_seed(8)) != config_hash(cfg)


def test_unknown_config_key_is_hard_error():
    from meanfield_control.core import config_from_dict, config_to_dict

    data = config_to_dict(_example_config())
    data["space"]["curvature"] = 1.0
    with pytest.raises(ConfigError, match="unknown config key"):
        config_from_dict(data)


def test_unknown_section_is_hard_error():
    text = config_to_toml(_example_config())
    with pytest.raises(ConfigError, match="unknown config key"):
        config_from_toml(text + "\n[plotting]\nstyle = \"fancy\"\n")


def test_missing_required_section():
    with pytest.raises(ConfigError, match="missing required"):
        config_from_toml("[space]\ndimension = 2\n")


def test_sweep_multiples_validated():
    with pytest.raises(ConfigError, match="multiple"):
        SweepSettings((24,), 100)


def test_degenerate_configurations_are_legal():
    # N = 1 and M = 0 are both allowed
    cfg = dataclasses.replace(
        _example_config(), n_particles=1, n_controls=0, control_anchors=()
    )
    assert cfg.n_particles == 1
    assert cfg.control_anchors == ()
