"""Interaction forces between particles and between particles and controls.

The builtin family is the gradient of a Gaussian potential,

    P(z) = A exp(-|z|^2 / (2 sigma^2)),       K(z) = grad P(z),

so K(z) = -(A/sigma^2) z exp(-|z|^2/(2 sigma^2)).  Sign convention: the
velocity field subtracts kernel values, so amplitude A < 0 gives an
attractive force (cohesion) and A > 0 a repulsive one (control agents that
push particles away).  Both K and its derivatives are bounded with closed
form sup-norm bounds, which feed the stability constants used by the
diagnostics.

The pairwise O(N^2) contractions that dominate runtime live here as fused
primitives with a numba fast path and a pure-numpy fallback (select with
MEANFIELD_CONTROL_DISABLE_NUMBA=1).  Note DK(-z) = DK(z) for this family
(K is odd), which several fused forms exploit; the property is pinned by
tests against a dense einsum reference.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .core import ConfigError

_FAMILIES = ("gaussian", "zero")

try:  # pragma: no cover - exercised via the dispatch tests
    if os.environ.get("MEANFIELD_CONTROL_DISABLE_NUMBA") == "1":
        raise ImportError("numba disabled by environment")
    from numba import njit, prange

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    _HAVE_NUMBA = False


@dataclass(frozen=True)
class KernelSpec:
    family: str
    amplitude: float = 0.0
    width: float = 1.0

    def __post_init__(self):
        if self.family not in _FAMILIES:
            raise ConfigError(f"unknown kernel family {self.family!r}; supported: {_FAMILIES}")
        if self.family == "gaussian" and self.width <= 0.0:
            raise ConfigError("gaussian kernel needs width > 0")

    @property
    def is_zero(self) -> bool:
        return self.family == "zero" or self.amplitude == 0.0


def zero_kernel() -> KernelSpec:
    return KernelSpec("zero")


@dataclass(frozen=True)
class KernelBounds:
    sup_value: float     # sup_z |K(z)|
    sup_jacobian: float  # sup_z ||DK(z)||_2
    sup_hessian: float   # rigorous over-estimate of sup_z ||D^2 K(z)||


def kernel_eval(spec: KernelSpec, z) -> np.ndarray:
    """K(z) for z of shape (..., d)."""
    z = np.asarray(z, dtype=np.float64)
    if spec.is_zero:
        return np.zeros_like(z)
    s2 = spec.width**2
    e = np.exp(-np.sum(z * z, axis=-1) / (2.0 * s2))
    return -(spec.amplitude / s2) * z * e[..., None]


def kernel_jacobian(spec: KernelSpec, z) -> np.ndarray:
    """DK(z) of shape (..., d, d); symmetric (Hessian of the potential)."""
    z = np.asarray(z, dtype=np.float64)
    d = z.shape[-1]
    if spec.is_zero:
        return np.zeros(z.shape + (d,))
    s2 = spec.width**2
    e = np.exp(-np.sum(z * z, axis=-1) / (2.0 * s2))
    eye = np.eye(d)
    outer = z[..., :, None] * z[..., None, :]
    return -(spec.amplitude / s2) * e[..., None, None] * (eye - outer / s2)


def kernel_bounds(spec: KernelSpec) -> KernelBounds:
    """Closed-form sup-norm bounds for the kernel and its first two derivatives.

    |K| peaks at |z| = sigma with value (|A|/sigma) e^{-1/2}.  ||DK||_2 peaks
    at z = 0 with value |A|/sigma^2 (the radial eigenvalue e^{-s^2/2}|1-s^2|
    and the tangential one e^{-s^2/2} never exceed 1 in units of |A|/sigma^2).
    For D^2 K we use the over-estimate e^{-s^2/2}(3s + s^3) |A|/sigma^3
    maximized at s = 3^{1/4}.
    """
    if spec.is_zero:
        return KernelBounds(0.0, 0.0, 0.0)
    a, s = abs(spec.amplitude), spec.width
    s_star = 3.0**0.25
    hess = a / s**3 * np.exp(-(s_star**2) / 2.0) * (3.0 * s_star + s_star**3)
    return KernelBounds(a / s * np.exp(-0.5), a / s**2, float(hess))


# ---------------------------------------------------------------------------
# stability constants assembled from kernel bounds


def one_sided_lipschitz(k1: KernelSpec, k2: KernelSpec, n_controls: int) -> float:
    """C_l with <v(x)-v(y), x-y> <= C_l |x-y|^2 for any fixed measure/controls."""
    return kernel_bounds(k1).sup_jacobian + n_controls * kernel_bounds(k2).sup_jacobian


def field_stability(k1: KernelSpec, k2: KernelSpec, n_controls: int) -> float:
    """C_v with ||v(mu,u)-v(mu',u')||_sup <= C_v (W_2(mu,mu') + |u-u'|)."""
    return kernel_bounds(k1).sup_jacobian + np.sqrt(max(n_controls, 1)) * kernel_bounds(k2).sup_jacobian


def dobrushin_constants(k1: KernelSpec, k2: KernelSpec, n_controls: int) -> tuple:
    """(a, b) for W_2^2(mu_t, mu_t') <= (W_2^2 initial + b ||du||_{L^2}^2) e^{a t}.

    From d/dt W_2^2 <= 2 C_l W_2^2 + C_v (3 W_2^2 + |du_t|^2) after Young's
    inequality with the tight split, so a = 2 C_l + 3 C_v and b = C_v.
    """
    c_l = one_sided_lipschitz(k1, k2, n_controls)
    c_v = field_stability(k1, k2, n_controls)
    return 2.0 * c_l + 3.0 * c_v, c_v


def velocity_sup_bound(k1: KernelSpec, k2: KernelSpec, n_controls: int) -> float:
    return kernel_bounds(k1).sup_value + n_controls * kernel_bounds(k2).sup_value


# ---------------------------------------------------------------------------
# fused pairwise primitives
#
# pair_force_sum(spec, x, y)        -> sum_j K(x_i - y_j)                (Nx, d)
# pair_jac_apply(spec, x, y, w)     -> sum_j DK(x_i - y_j) w_j           (Nx, d)
# pair_jac_diff_apply(spec, x, w)   -> sum_j DK(x_i - x_j) (w_i - w_j)   (N, d)
# pair_jac_sum(spec, x, y)          -> sum_j DK(x_i - y_j)               (Nx, d, d)
#
# pair_jac_diff_apply is the whole K1 part of the adjoint equation in one
# pass: sum_j grad K1(x_i-x_j) xi_i - sum_j grad K1(x_j-x_i) xi_j collapses
# because DK1 is even.

if _HAVE_NUMBA:

    @njit(parallel=True, cache=True)
    def _nb_force_sum(x, y, amp_over_s2, inv2s2):
        nx, d = x.shape
        ny = y.shape[0]
        out = np.zeros((nx, d))
        for i in prange(nx):
            for j in range(ny):
                r2 = 0.0
                for a in range(d):
                    dz = x[i, a] - y[j, a]
                    r2 += dz * dz
                e = np.exp(-r2 * inv2s2)
                for a in range(d):
                    out[i, a] -= amp_over_s2 * (x[i, a] - y[j, a]) * e
        return out

    @njit(parallel=True, cache=True)
    def _nb_jac_apply(x, y, w, amp_over_s2, inv_s2, inv2s2):
        nx, d = x.shape
        ny = y.shape[0]
        out = np.zeros((nx, d))
        for i in prange(nx):
            for j in range(ny):
                r2 = 0.0
                zw = 0.0
                for a in range(d):
                    dz = x[i, a] - y[j, a]
                    r2 += dz * dz
                    zw += dz * w[j, a]
                e = np.exp(-r2 * inv2s2)
                for a in range(d):
                    dz = x[i, a] - y[j, a]
                    out[i, a] -= amp_over_s2 * e * (w[j, a] - dz * zw * inv_s2)
        return out

    @njit(parallel=True, cache=True)
    def _nb_jac_diff_apply(x, w, amp_over_s2, inv_s2, inv2s2):
        n, d = x.shape
        out = np.zeros((n, d))
        for i in prange(n):
            for j in range(n):
                r2 = 0.0
                zw = 0.0
                for a in range(d):
                    dz = x[i, a] - x[j, a]
                    r2 += dz * dz
                    zw += dz * (w[i, a] - w[j, a])
                e = np.exp(-r2 * inv2s2)
                for a in range(d):
                    dz = x[i, a] - x[j, a]
                    dw = w[i, a] - w[j, a]
                    out[i, a] -= amp_over_s2 * e * (dw - dz * zw * inv_s2)
        return out


def _np_force_sum(x, y, amp_over_s2, inv2s2):
    sqx = np.sum(x * x, axis=1)
    sqy = np.sum(y * y, axis=1)
    e = np.exp(-(sqx[:, None] + sqy[None, :] - 2.0 * (x @ y.T)) * inv2s2)
    return -amp_over_s2 * (x * e.sum(axis=1)[:, None] - e @ y)


def _np_jac_apply(x, y, w, amp_over_s2, inv_s2, inv2s2):
    sqx = np.sum(x * x, axis=1)
    sqy = np.sum(y * y, axis=1)
    e = np.exp(-(sqx[:, None] + sqy[None, :] - 2.0 * (x @ y.T)) * inv2s2)
    zw = (x @ w.T) - np.sum(y * w, axis=1)[None, :]  # (x_i - y_j) . w_j
    ezw = e * zw
    first = e @ w
    second = x * ezw.sum(axis=1)[:, None] - ezw @ y
    return -amp_over_s2 * (first - second * inv_s2)


def _np_jac_diff_apply(x, w, amp_over_s2, inv_s2, inv2s2):
    sq = np.sum(x * x, axis=1)
    e = np.exp(-(sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)) * inv2s2)
    s = np.sum(x * w, axis=1)
    # (x_i - x_j) . (w_i - w_j) as a matrix of rank-one pieces
    zw = s[:, None] + s[None, :] - (x @ w.T) - (w @ x.T)
    ezw = e * zw
    dw = w * e.sum(axis=1)[:, None] - e @ w
    second = x * ezw.sum(axis=1)[:, None] - ezw @ x
    return -amp_over_s2 * (dw - second * inv_s2)


def pair_force_sum(spec: KernelSpec, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    x = np.ascontiguousarray(x, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    if spec.is_zero or y.shape[0] == 0:
        return np.zeros_like(x)
    s2 = spec.width**2
    if _HAVE_NUMBA:
        return _nb_force_sum(x, y, spec.amplitude / s2, 0.5 / s2)
    return _np_force_sum(x, y, spec.amplitude / s2, 0.5 / s2)


def pair_jac_apply(spec: KernelSpec, x: np.ndarray, y: np.ndarray, w: np.ndarray) -> np.ndarray:
    x = np.ascontiguousarray(x, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    if spec.is_zero or y.shape[0] == 0:
        return np.zeros_like(x)
    s2 = spec.width**2
    if _HAVE_NUMBA:
        return _nb_jac_apply(x, y, w, spec.amplitude / s2, 1.0 / s2, 0.5 / s2)
    return _np_jac_apply(x, y, w, spec.amplitude / s2, 1.0 / s2, 0.5 / s2)


def pair_jac_diff_apply(spec: KernelSpec, x: np.ndarray, w: np.ndarray) -> np.ndarray:
    x = np.ascontiguousarray(x, dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    if spec.is_zero:
        return np.zeros_like(x)
    s2 = spec.width**2
    if _HAVE_NUMBA:
        return _nb_jac_diff_apply(x, w, spec.amplitude / s2, 1.0 / s2, 0.5 / s2)
    return _np_jac_diff_apply(x, w, spec.amplitude / s2, 1.0 / s2, 0.5 / s2)


def pair_jac_sum(spec: KernelSpec, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """sum_j DK(x_i - y_j), shape (Nx, d, d).  Cheap: only (Nx, d, d) output."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    d = x.shape[1]
    if spec.is_zero or y.shape[0] == 0:
        return np.zeros((x.shape[0], d, d))
    s2 = spec.width**2
    sqx = np.sum(x * x, axis=1)
    sqy = np.sum(y * y, axis=1)
    e = np.exp(-(sqx[:, None] + sqy[None, :] - 2.0 * (x @ y.T)) / (2.0 * s2))
    e_tot = e.sum(axis=1)
    ey = e @ y
    # sum_j e_ij z z^T with z = x_i - y_j
    zz = (
        x[:, :, None] * x[:, None, :] * e_tot[:, None, None]
        - x[:, :, None] * ey[:, None, :]
        - ey[:, :, None] * x[:, None, :]
        + np.einsum("ij,ja,jb->iab", e, y, y)
    )
    eye = np.eye(d)
    return -(spec.amplitude / s2) * (e_tot[:, None, None] * eye - zz / s2)
