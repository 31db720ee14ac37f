import numpy as np
import pytest

from meanfield_control import (
    KernelSpec,
    dobrushin_constants,
    kernel_bounds,
    kernel_eval,
    kernel_jacobian,
    zero_kernel,
)
from meanfield_control.kernels import (
    field_stability,
    one_sided_lipschitz,
    pair_force_sum,
    pair_jac_apply,
    pair_jac_diff_apply,
    pair_jac_sum,
)


def _potential(spec, x):
    return spec.amplitude * np.exp(-np.sum(x * x, axis=-1) / (2 * spec.width**2))


def test_eval_vanishes_at_origin():
    spec = KernelSpec("gaussian", 1.0, 1.0)
    assert np.all(kernel_eval(spec, np.zeros(3)) == 0.0)


def test_zero_family_evaluates_to_zero():
    z = zero_kernel()
    x = np.random.default_rng(0).normal(size=(10, 2))
    assert np.all(kernel_eval(z, x) == 0.0)
    assert np.all(kernel_jacobian(z, x) == 0.0)
    b = kernel_bounds(z)
    assert (b.sup_value, b.sup_jacobian, b.sup_hessian) == (0.0, 0.0, 0.0)


def test_eval_closed_form_1d():
    spec = KernelSpec("gaussian", 1.0, 1.0)
    val = kernel_eval(spec, np.array([1.0]))
    assert val[0] == pytest.approx(-np.exp(-0.5), rel=1e-15)


def test_eval_is_gradient_of_potential():
    # central differences of the potential reproduce the force
    spec = KernelSpec("gaussian", -0.7, 1.3)
    rng = np.random.default_rng(1)
    x = rng.normal(size=(50, 3))
    eps = 1e-6
    for a in range(3):
        e = np.zeros(3)
        e[a] = eps
        fd = (_potential(spec, x + e) - _potential(spec, x - e)) / (2 * eps)
        assert np.max(np.abs(fd - kernel_eval(spec, x)[:, a])) < 1e-8


def test_jacobian_at_origin_is_minus_identity():
    spec = KernelSpec("gaussian", 1.0, 1.0)
    assert np.allclose(kernel_jacobian(spec, np.zeros(2)), -np.eye(2), atol=1e-15)


def test_jacobian_is_symmetric():
    spec = KernelSpec("gaussian", 2.0, 0.7)
    x = np.random.default_rng(2).normal(size=(40, 3))
    jac = kernel_jacobian(spec, x)
    assert np.allclose(jac, np.swapaxes(jac, -1, -2), atol=1e-15)


def test_jacobian_is_even():
    spec = KernelSpec("gaussian", -1.5, 0.9)
    x = np.random.default_rng(7).normal(size=(30, 2))
    assert np.allclose(kernel_jacobian(spec, x), kernel_jacobian(spec, -x), atol=1e-15)


def test_jacobian_matches_finite_differences():
    spec = KernelSpec("gaussian", 1.0, 1.0)
    grid = np.linspace(-3.0, 3.0, 13)
    pts = np.array([[a, b] for a in grid for b in grid])
    eps = 1e-6
    jac = kernel_jacobian(spec, pts)
    for a in range(2):
        e = np.zeros(2)
        e[a] = eps
        fd = (kernel_eval(spec, pts + e) - kernel_eval(spec, pts - e)) / (2 * eps)
        assert np.max(np.abs(fd - jac[:, :, a])) < 1e-8


def test_sup_value_bound_attained_at_width():
    spec = KernelSpec("gaussian", 1.0, 1.0)
    b = kernel_bounds(spec)
    assert b.sup_value == pytest.approx(np.exp(-0.5), rel=1e-15)
    r = np.linspace(0.0, 6.0, 100_001)
    sampled = np.max(np.abs(kernel_eval(spec, r[:, None])[:, 0]))
    assert sampled <= b.sup_value * (1 + 1e-12)
    assert sampled == pytest.approx(b.sup_value, rel=1e-6)


def test_sup_jacobian_dominates_dense_sampling():
    rng = np.random.default_rng(3)
    for spec in [KernelSpec("gaussian", 1.0, 1.0), KernelSpec("gaussian", -2.5, 0.6)]:
        b = kernel_bounds(spec)
        x = rng.normal(scale=3 * spec.width, size=(100_000, 2))
        jac = kernel_jacobian(spec, x)
        norms = np.linalg.norm(jac, ord=2, axis=(1, 2))
        assert np.max(norms) <= b.sup_jacobian * (1 + 1e-12)
        # the bound is attained at the origin
        assert np.linalg.norm(kernel_jacobian(spec, np.zeros(2)), 2) == pytest.approx(
            b.sup_jacobian
        )


def test_sup_hessian_dominates_sampled_second_differences():
    spec = KernelSpec("gaussian", 1.3, 0.8)
    b = kernel_bounds(spec)
    rng = np.random.default_rng(4)
    x = rng.normal(scale=2 * spec.width, size=(20_000, 2))
    eps = 1e-5
    worst = 0.0
    for a in range(2):
        e = np.zeros(2)
        e[a] = eps
        d2 = (kernel_jacobian(spec, x + e) - kernel_jacobian(spec, x - e)) / (2 * eps)
        worst = max(worst, float(np.max(np.abs(d2))))
    assert worst <= b.sup_hessian * (1 + 1e-6)


def test_one_sided_lipschitz_of_velocity_field():
    # <v(x)-v(y), x-y> <= C_l |x-y|^2 on random fields
    from meanfield_control.dynamics import velocity

    k1 = KernelSpec("gaussian", -0.8, 1.0)
    k2 = KernelSpec("gaussian", 1.2, 1.0)
    c_l = one_sided_lipschitz(k1, k2, 2)
    rng = np.random.default_rng(5)
    cloud = rng.normal(size=(30, 2))
    controls = rng.normal(size=(2, 2))
    for _ in range(200):
        x = rng.normal(scale=2.0, size=(1, 2))
        y = rng.normal(scale=2.0, size=(1, 2))
        ens_x = np.vstack([x, cloud])
        ens_y = np.vstack([y, cloud])
        vx = velocity(ens_x, controls, k1, k2)[0]
        vy = velocity(ens_y, controls, k1, k2)[0]
        lhs = float(np.dot(vx - vy, (x - y)[0]))
        assert lhs <= c_l * float(np.sum((x - y) ** 2)) + 1e-12


def test_dobrushin_constants_assembly():
    k1 = KernelSpec("gaussian", -0.8, 1.0)
    k2 = KernelSpec("gaussian", 1.2, 1.0)
    c_l = one_sided_lipschitz(k1, k2, 2)
    c_v = field_stability(k1, k2, 2)
    a, b = dobrushin_constants(k1, k2, 2)
    assert a == pytest.approx(2 * c_l + 3 * c_v)
    assert b == pytest.approx(c_v)


# --- fused pairwise primitives against a dense einsum reference -------------


def _reference_force_sum(spec, x, y):
    diff = x[:, None, :] - y[None, :, :]
    return kernel_eval(spec, diff).sum(axis=1)


def _reference_jac_apply(spec, x, y, w):
    diff = x[:, None, :] - y[None, :, :]
    return np.einsum("ijab,jb->ia", kernel_jacobian(spec, diff), w)


def _reference_jac_diff_apply(spec, x, w):
    diff = x[:, None, :] - x[None, :, :]
    jac = kernel_jacobian(spec, diff)
    return np.einsum("ijab,ijb->ia", jac, w[:, None, :] - w[None, :, :])


@pytest.mark.parametrize("amp,width", [(1.0, 1.0), (-2.0, 0.7)])
def test_pair_primitives_match_dense_reference(amp, width):
    spec = KernelSpec("gaussian", amp, width)
    rng = np.random.default_rng(6)
    x = rng.normal(size=(37, 2))
    y = rng.normal(size=(11, 2))
    w = rng.normal(size=(11, 2))
    wx = rng.normal(size=(37, 2))
    assert np.allclose(pair_force_sum(spec, x, y), _reference_force_sum(spec, x, y),
                       atol=1e-12)
    assert np.allclose(pair_jac_apply(spec, x, y, w), _reference_jac_apply(spec, x, y, w),
                       atol=1e-12)
    assert np.allclose(pair_jac_diff_apply(spec, x, wx),
                       _reference_jac_diff_apply(spec, x, wx), atol=1e-12)
    diff = x[:, None, :] - y[None, :, :]
    assert np.allclose(pair_jac_sum(spec, x, y), kernel_jacobian(spec, diff).sum(axis=1),
                       atol=1e-12)


def test_pair_primitives_handle_empty_controls():
    spec = KernelSpec("gaussian", 1.0, 1.0)
    x = np.random.default_rng(8).normal(size=(5, 2))
    y = np.zeros((0, 2))
    assert np.all(pair_force_sum(spec, x, y) == 0.0)
    assert np.all(pair_jac_apply(spec, x, y, np.zeros((0, 2))) == 0.0)
    assert np.all(pair_jac_sum(spec, x, y) == 0.0)


def test_numpy_fallback_matches_numba_path():
    from meanfield_control.kernels import (
        _np_force_sum,
        _np_jac_apply,
        _np_jac_diff_apply,
    )

    spec = KernelSpec("gaussian", -1.1, 0.9)
    rng = np.random.default_rng(9)
    x = rng.normal(size=(23, 3))
    w = rng.normal(size=(23, 3))
    s2 = spec.width**2
    args = (spec.amplitude / s2, 0.5 / s2)
    assert np.allclose(pair_force_sum(spec, x, x), _np_force_sum(x, x, *args), atol=1e-12)
    args3 = (spec.amplitude / s2, 1.0 / s2, 0.5 / s2)
    assert np.allclose(pair_jac_apply(spec, x, x, w), _np_jac_apply(x, x, w, *args3),
                       atol=1e-12)
    assert np.allclose(pair_jac_diff_apply(spec, x, w), _np_jac_diff_apply(x, w, *args3),
                       atol=1e-12)


def test_unknown_family_rejected():
    from meanfield_control import ConfigError

    with pytest.raises(ConfigError):
        KernelSpec("coulomb", 1.0, 1.0)
