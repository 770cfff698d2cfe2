"""Quadratic-form distances and the covariance machinery behind them.

Distances here are *squared*: ``xi = d M d^T`` with ``d = xi - xj``. Ordering
comparisons use ``xi`` directly, square roots are only taken for reporting.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "METRIC_KINDS",
    "MetricTensor",
    "Ellipsoid",
    "quadratic_distance",
    "quadratic_form",
    "estimate_covariance",
    "estimate_covariances",
    "invert_spd",
    "invert_spd_batch",
    "normalize_determinant",
    "sym_eig",
    "neighbor_ellipsoid",
]

METRIC_KINDS = ("euclidean", "mahalanobis", "stress")
SYMMETRY_RTOL = 1e-12


def sym_eig(S):
    """Eigen-decomposition of symmetric 3x3 matrices with a fixed sign convention.

    Eigenvalues are ascending. Each eigenvector is flipped so that its
    largest-magnitude component is positive, which makes reported axes
    reproducible.

    Parameters
    ----------
    S : array_like, shape (..., 3, 3)

    Returns
    -------
    w : ndarray, shape (..., 3)
    V : ndarray, shape (..., 3, 3)
        Columns are eigenvectors.
    """
    S = np.asarray(S, dtype=np.float64)
    w, V = np.linalg.eigh(S)
    idx = np.argmax(np.abs(V), axis=-2)[..., None, :]
    sign = np.sign(np.take_along_axis(V, idx, axis=-2))
    sign[sign == 0] = 1.0
    return w, V * sign


def _check_symmetric(S, what="matrix"):
    scale = max(np.abs(S).max(), np.finfo(float).tiny)
    if np.abs(S - np.swapaxes(S, -1, -2)).max() > SYMMETRY_RTOL * scale:
        raise ValueError(f"{what} is not symmetric")


@dataclass(frozen=True)
class MetricTensor:
    """Inverse tensor (covariance or stress) defining an anisotropic distance.

    ``matrix`` is the form ``M`` in ``xi = d M d^T`` -- the inverse of the
    covariance (or stress) tensor, not the tensor itself.
    """

    matrix: np.ndarray
    kind: str = "mahalanobis"

    def __post_init__(self):
        M = np.array(self.matrix, dtype=np.float64)
        if M.shape != (3, 3) or not np.isfinite(M).all():
            raise ValueError("metric must be a finite 3x3 matrix")
        if self.kind not in METRIC_KINDS:
            raise ValueError(f"unknown metric kind {self.kind!r}; expected one of {METRIC_KINDS}")
        _check_symmetric(M, "metric")
        M = 0.5 * (M + M.T)
        if np.linalg.eigvalsh(M)[0] <= 0:
            raise ValueError("metric must be positive definite")
        if self.kind == "euclidean" and not np.array_equal(M, np.eye(3)):
            raise ValueError("a euclidean metric must be the identity")
        M.setflags(write=False)
        object.__setattr__(self, "matrix", M)

    @classmethod
    def identity(cls) -> "MetricTensor":
        return cls(np.eye(3), "euclidean")

    @property
    def eigenvalues(self) -> np.ndarray:
        return sym_eig(self.matrix)[0]

    @property
    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(self.matrix)[0])

    def scaled(self, c: float) -> "MetricTensor":
        kind = "mahalanobis" if self.kind == "euclidean" else self.kind
        return MetricTensor(self.matrix * c, kind)

    def distance(self, xi, xj):
        return quadratic_distance(self, xi, xj)


def _as_matrix(M):
    return M.matrix if isinstance(M, MetricTensor) else np.asarray(M, dtype=np.float64)


def quadratic_form(M, d):
    """``d M d^T`` for displacement rows ``d`` of shape (..., 3).

    The evaluation order is fixed (``d . (M d)`` expanded row by row) and is
    mirrored exactly by the compiled tree search, so the two agree bit for bit.
    Negating ``d`` leaves the result bit-identical.
    """
    M = _as_matrix(M)
    d = np.asarray(d, dtype=np.float64)
    d0, d1, d2 = d[..., 0], d[..., 1], d[..., 2]
    if M.ndim == 2:
        m = [[M[a, b] for b in range(3)] for a in range(3)]
    else:
        m = [[M[..., a, b] for b in range(3)] for a in range(3)]
    return (
        d0 * (m[0][0] * d0 + m[0][1] * d1 + m[0][2] * d2)
        + d1 * (m[1][0] * d0 + m[1][1] * d1 + m[1][2] * d2)
        + d2 * (m[2][0] * d0 + m[2][1] * d1 + m[2][2] * d2)
    )


def quadratic_distance(M, xi, xj):
    """Squared anisotropic distance ``(xi - xj) M (xi - xj)^T``.

    ``xi`` and ``xj`` broadcast, so one call can measure a whole point set.
    """
    xi = np.asarray(xi, dtype=np.float64)
    xj = np.asarray(xj, dtype=np.float64)
    if not (np.isfinite(xi).all() and np.isfinite(xj).all()):
        raise ValueError("quadratic_distance received non-finite coordinates")
    out = quadratic_form(M, xi - xj)
    return float(out) if np.ndim(out) == 0 else out


def estimate_covariance(center, neighbor_positions):
    """Second-moment tensor of positions about ``center`` (biased, 1/k)."""
    pts = np.asarray(neighbor_positions, dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] == 0:
        raise ValueError("estimate_covariance needs at least one position")
    d = pts - np.asarray(center, dtype=np.float64)
    S = d.T @ d / pts.shape[0]
    return 0.5 * (S + S.T)


def estimate_covariances(positions, centers_idx, neighbor_idx):
    """Batched :func:`estimate_covariance` for every row of ``neighbor_idx``."""
    if neighbor_idx.shape[1] == 0:
        raise ValueError("estimate_covariance needs at least one position")
    d = positions[neighbor_idx] - positions[centers_idx][:, None, :]
    S = np.einsum("nki,nkj->nij", d, d) / neighbor_idx.shape[1]
    return 0.5 * (S + np.swapaxes(S, 1, 2))


def invert_spd_batch(S, floor_fraction=1e-3):
    """Regularized inverse of stacked symmetric PSD matrices.

    Eigenvalues below ``floor_fraction * max_eigenvalue`` are raised to that
    floor before inverting; an all-zero matrix maps to the identity.
    """
    if not 0 < floor_fraction <= 1:
        raise ValueError("floor_fraction must lie in (0, 1]")
    S = np.asarray(S, dtype=np.float64)
    _check_symmetric(S, "covariance")
    w, V = sym_eig(0.5 * (S + np.swapaxes(S, -1, -2)))
    lam_max = w[..., -1:]
    zero = lam_max[..., 0] <= 0
    floor = floor_fraction * np.where(zero[..., None], 1.0, lam_max)
    w = np.maximum(w, floor)
    M = (V / w[..., None, :]) @ np.swapaxes(V, -1, -2)
    M = 0.5 * (M + np.swapaxes(M, -1, -2))
    M[zero] = np.eye(3)
    return M


def invert_spd(S, floor_fraction=1e-3, kind="mahalanobis") -> MetricTensor:
    S = np.asarray(S, dtype=np.float64)
    if S.shape != (3, 3):
        raise ValueError("invert_spd expects a 3x3 matrix")
    if not np.any(S):
        return MetricTensor.identity()
    return MetricTensor(invert_spd_batch(S, floor_fraction), kind)


def normalize_determinant(M):
    """Rescale metrics so that ``det(M) == 1`` (shape only, no volume)."""
    M = np.asarray(M, dtype=np.float64)
    det = np.linalg.det(M)
    return M / np.cbrt(det)[..., None, None]


@dataclass(frozen=True)
class Ellipsoid:
    center: np.ndarray
    axes: np.ndarray  # rows are unit axes, longest first
    semi_axes: np.ndarray  # descending

    def contains(self, points, rtol=1e-12) -> np.ndarray:
        d = np.atleast_2d(points) - self.center
        u = d @ self.axes.T / self.semi_axes
        return (u * u).sum(axis=1) <= 1.0 + rtol


def neighbor_ellipsoid(M, center, xi_max) -> Ellipsoid:
    """Ellipsoid ``{x : (x - c) M (x - c)^T = xi_max}``."""
    if xi_max <= 0:
        raise ValueError("xi_max must be positive")
    w, V = sym_eig(_as_matrix(M))
    # ascending eigenvalues give descending semi-axes
    return Ellipsoid(
        center=np.asarray(center, dtype=np.float64),
        axes=V.T.copy(),
        semi_axes=np.sqrt(xi_max / w),
    )
