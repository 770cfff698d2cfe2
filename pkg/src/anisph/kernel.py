"""Cubic B-spline smoothing kernel, isotropic and metric-adapted.

With ``q`` the normalized separation (``q = r / h`` or ``q**2 = dx M dx^T``)
the profile is::

    f(q) = 1 - 6 q^2 + 6 q^3     0 <= q <= 1/2
         = 2 (1 - q)^3           1/2 < q <= 1
         = 0                     q > 1

scaled by ``8 / (pi h^3)`` or ``8 sqrt(det M) / pi`` so the kernel integrates
to one over space.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .metric import MetricTensor, quadratic_form

__all__ = [
    "KernelSpec",
    "kernel_value",
    "kernel_gradient",
    "pair_spec",
    "pair_kernel",
    "cubic_profile",
]


def cubic_profile(q):
    q = np.asarray(q, dtype=np.float64)
    inner = 1.0 - 6.0 * q * q + 6.0 * q * q * q
    t = 1.0 - q
    outer = 2.0 * t * t * t
    return np.where(q <= 0.5, inner, np.where(q <= 1.0, outer, 0.0))


def _profile_slope_over_q(q):
    """``f'(q) / q``, finite at ``q = 0``."""
    q = np.asarray(q, dtype=np.float64)
    inner = -12.0 + 18.0 * q
    t = 1.0 - q
    with np.errstate(divide="ignore", invalid="ignore"):
        outer = -6.0 * t * t / q
    return np.where(q <= 0.5, inner, np.where(q <= 1.0, outer, 0.0))


@dataclass(frozen=True)
class KernelSpec:
    """Kernel support: an isotropic radius ``h`` or a metric with unit support.

    Exactly one of ``smoothing_length`` and ``metric`` is set. For a metric
    support the kernel vanishes where ``dx M dx^T >= 1``.
    """

    smoothing_length: float | None = None
    metric: np.ndarray | None = None

    def __post_init__(self):
        if (self.smoothing_length is None) == (self.metric is None):
            raise ValueError("give exactly one of smoothing_length or metric")
        if self.smoothing_length is not None:
            h = float(self.smoothing_length)
            if not (np.isfinite(h) and h > 0):
                raise ValueError("smoothing_length must be finite and > 0")
            object.__setattr__(self, "smoothing_length", h)
        else:
            M = self.metric.matrix if isinstance(self.metric, MetricTensor) else self.metric
            M = MetricTensor(M).matrix
            object.__setattr__(self, "metric", M)

    @property
    def isotropic(self) -> bool:
        return self.smoothing_length is not None

    @property
    def normalization(self) -> float:
        if self.isotropic:
            return 8.0 / (np.pi * self.smoothing_length**3)
        return 8.0 * np.sqrt(np.linalg.det(self.metric)) / np.pi

    def q(self, dx):
        dx = _check_dx(dx)
        if self.isotropic:
            return np.sqrt((dx * dx).sum(axis=-1)) / self.smoothing_length
        return np.sqrt(quadratic_form(self.metric, dx))

    def value(self, dx):
        return self.normalization * cubic_profile(self.q(dx))

    def gradient(self, dx):
        dx = _check_dx(dx)
        g = self.normalization * _profile_slope_over_q(self.q(dx))
        if self.isotropic:
            return (g / self.smoothing_length**2)[..., None] * dx
        return g[..., None] * (dx @ self.metric)


def _check_dx(dx):
    dx = np.asarray(dx, dtype=np.float64)
    if not np.isfinite(dx).all():
        raise ValueError("kernel evaluated at non-finite separation")
    return dx


def kernel_value(spec: KernelSpec, dx):
    """W at separation ``dx = x_i - x_j``; vectorized over leading axes."""
    out = spec.value(dx)
    return float(out) if np.ndim(out) == 0 else out


def kernel_gradient(spec: KernelSpec, dx):
    """Gradient of W with respect to ``x_i`` at ``dx = x_i - x_j``."""
    return spec.gradient(dx)


def pair_spec(spec_i: KernelSpec, spec_j: KernelSpec) -> KernelSpec:
    """Shared support for a pair, symmetric in its arguments."""
    if spec_i.isotropic != spec_j.isotropic:
        raise ValueError("cannot pair an isotropic and an anisotropic kernel")
    if spec_i.isotropic:
        return KernelSpec(smoothing_length=0.5 * (spec_i.smoothing_length + spec_j.smoothing_length))
    return KernelSpec(metric=pair_metrics(spec_i.metric[None], spec_j.metric[None])[0])


def pair_metrics(Mi, Mj):
    """Pair metric: inverse of the averaged support tensors.

    The result is rescaled so its equivalent isotropic length
    ``det(M)**(-1/6)`` is the mean of the two particles' lengths, which makes
    it reduce to ``h_ij = (h_i + h_j) / 2`` for spherical supports.
    """
    Ci, Cj = np.linalg.inv(Mi), np.linalg.inv(Mj)
    Ci = 0.5 * (Ci + np.swapaxes(Ci, 1, 2))
    Cj = 0.5 * (Cj + np.swapaxes(Cj, 1, 2))
    C = 0.5 * (Ci + Cj)
    M = np.linalg.inv(C)
    M = 0.5 * (M + np.swapaxes(M, 1, 2))
    h_i = np.linalg.det(Mi) ** (-1.0 / 6.0)
    h_j = np.linalg.det(Mj) ** (-1.0 / 6.0)
    h_ij = 0.5 * (h_i + h_j)
    h_now = np.linalg.det(M) ** (-1.0 / 6.0)
    return M * ((h_now / h_ij) ** 2)[:, None, None]


def pair_kernel(dx, smoothing_length=None, metric=None):
    """Kernel values and gradients for many pairs at once.

    Parameters
    ----------
    dx : ndarray, shape (P, 3)
        ``x_i - x_j`` per pair.
    smoothing_length : ndarray, shape (P,), optional
        Isotropic pair support.
    metric : ndarray, shape (P, 3, 3), optional
        Anisotropic pair support (unit-``q`` boundary).

    Returns
    -------
    w : ndarray, shape (P,)
    grad : ndarray, shape (P, 3)
    q2 : ndarray, shape (P,)
    """
    dx = _check_dx(dx)
    if (smoothing_length is None) == (metric is None):
        raise ValueError("give exactly one of smoothing_length or metric")
    if smoothing_length is not None:
        h = np.asarray(smoothing_length, dtype=np.float64)
        q2 = (dx * dx).sum(axis=1) / (h * h)
        q = np.sqrt(q2)
        C = 8.0 / (np.pi * h**3)
        w = C * cubic_profile(q)
        grad = (C * _profile_slope_over_q(q) / (h * h))[:, None] * dx
    else:
        q2 = quadratic_form(metric, dx)
        q = np.sqrt(q2)
        C = 8.0 * np.sqrt(np.linalg.det(metric)) / np.pi
        w = C * cubic_profile(q)
        grad = (C * _profile_slope_over_q(q))[:, None] * np.einsum("pab,pb->pa", metric, dx)
    return w, grad, q2
