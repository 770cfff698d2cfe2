"""Kernel estimators, the momentum equation and the leapfrog integrator.

Every sum runs over the effective neighbors ``E_k(i)`` (the symmetric closure
of the k-NN relation), so each pair is seen from both ends with the same
shared kernel support. That is what makes ``W_ij == W_ji`` and
``grad_i W_ij == -grad_j W_ji`` hold bit for bit and lets pairwise forces
cancel in the total momentum.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .kernel import pair_kernel, pair_metrics
from .metric import METRIC_KINDS, invert_spd_batch
from .neighbors import (
    EffectiveNeighbors,
    NeighborRelation,
    adaptive_metric_knn,
    build_octree,
    knn_all,
    symmetric_closure,
)
from .particles import ParticleTable

__all__ = [
    "STRESS_COMPONENTS",
    "NumericalError",
    "ForceConfig",
    "PairTerms",
    "SPHPipeline",
    "PipelineState",
    "StepResult",
    "build_pair_terms",
    "smoothing_lengths",
    "kernel_metrics",
    "interpolate_scalar",
    "interpolate_field",
    "interpolate_gradient",
    "interpolate_gradient_field",
    "compute_density",
    "apply_eos",
    "sound_speed",
    "pair_accelerations",
    "compute_forces",
    "diagnostics",
    "step",
]

logger = logging.getLogger(__name__)

STRESS_COMPONENTS = ("stress_xx", "stress_yy", "stress_zz", "stress_xy", "stress_xz", "stress_yz")


class NumericalError(RuntimeError):
    """Raised when the particle state stops being finite."""

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step


@dataclass
class ForceConfig:
    """Physics closing the momentum equation.

    Parameters
    ----------
    K, gamma : float
        Barotropic equation of state ``P = K rho**gamma``.
    alpha, beta, epsilon : float
        Artificial viscosity coefficients; ``alpha = beta = 0`` disables it.
    external_force : array_like or callable, optional
        Acceleration added verbatim to ``dv/dt``: a constant 3-vector or a
        function of the (n, 3) positions returning (n, 3).
    """

    K: float = 1.0
    gamma: float = 1.0
    alpha: float = 1.0
    beta: float = 2.0
    epsilon: float = 0.01
    external_force: object = None

    def __post_init__(self):
        if not (np.isfinite(self.K) and self.K >= 0):
            raise ValueError("eos K must be finite and >= 0")
        if not (np.isfinite(self.gamma) and self.gamma >= 1):
            raise ValueError("eos gamma must be >= 1")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("viscosity alpha and beta must be >= 0")
        if not self.epsilon > 0:
            raise ValueError("viscosity epsilon must be > 0")

    @property
    def viscous(self) -> bool:
        return self.alpha > 0 or self.beta > 0

    def external(self, positions) -> np.ndarray:
        n = positions.shape[0]
        if self.external_force is None:
            return np.zeros((n, 3))
        if callable(self.external_force):
            F = np.asarray(self.external_force(positions), dtype=np.float64)
        else:
            F = np.broadcast_to(np.asarray(self.external_force, dtype=np.float64), (n, 3))
        return np.array(F, dtype=np.float64)


@dataclass
class PairTerms:
    """Kernel data for every directed pair of ``E_k``, in CSR order.

    ``i``, ``j`` follow the effective-neighbor layout, so the terms of
    particle ``i`` are ``slice(E.indptr[i], E.indptr[i + 1])``. ``xi`` is
    the squared normalized separation under the pair support and ``h`` the
    pair's equivalent isotropic length.
    """

    i: np.ndarray
    j: np.ndarray
    w: np.ndarray
    grad_w: np.ndarray
    xi: np.ndarray
    h: np.ndarray

    def __len__(self):
        return self.i.shape[0]


def smoothing_lengths(relation: NeighborRelation, support_scale=1.0, min_length=0.0):
    """Isotropic support radii ``h_i = support_scale * sqrt(xi_max(i))``."""
    h = np.maximum(support_scale * np.sqrt(relation.xi_max), min_length)
    bad = ~(h > 0)
    if bad.any():
        raise ValueError(
            f"zero kernel support at particle {int(np.flatnonzero(bad)[0])}; "
            "use k > 1 or set a minimum smoothing length"
        )
    return h


def kernel_metrics(relation: NeighborRelation, metrics, support_scale=1.0, min_length=0.0):
    """Per-particle anisotropic supports whose unit-``q`` boundary is the
    neighbor ellipsoid ``xi = xi_max(i)`` (times ``support_scale``).
    """
    metrics = np.asarray(metrics, dtype=np.float64)
    if metrics.ndim == 2:
        metrics = np.broadcast_to(metrics, (relation.n, 3, 3))
    scale = support_scale**2 * relation.xi_max
    zero = ~(scale > 0)
    if zero.any():
        if not min_length > 0:
            raise ValueError(
                f"zero kernel support at particle {int(np.flatnonzero(zero)[0])}; "
                "use k > 1 or set a minimum smoothing length"
            )
        # fall back to the metric's own shape with equivalent length min_length
        det_len2 = np.linalg.det(metrics) ** (-1.0 / 3.0)
        scale = np.where(zero, min_length**2 / det_len2, scale)
    M = metrics / scale[:, None, None]
    if min_length > 0:
        h = np.linalg.det(M) ** (-1.0 / 6.0)
        small = h < min_length
        M[small] *= ((h[small] / min_length) ** 2)[:, None, None]
    return M


def build_pair_terms(table: ParticleTable, E: EffectiveNeighbors, smoothing_lengths=None, kernel_metrics=None) -> PairTerms:
    """Evaluate W and grad W for every pair of ``E`` with a shared support.

    Pass per-particle ``smoothing_lengths`` (isotropic) or per-particle
    ``kernel_metrics`` (anisotropic, unit-``q`` support).
    """
    pi, pj = E.pairs().T
    dx = table.position[pi] - table.position[pj]
    if smoothing_lengths is not None:
        h = np.asarray(smoothing_lengths, dtype=np.float64)
        h_pair = 0.5 * (h[pi] + h[pj])
        w, grad, xi = pair_kernel(dx, smoothing_length=h_pair)
    elif kernel_metrics is not None:
        M = np.asarray(kernel_metrics, dtype=np.float64)
        M_pair = pair_metrics(M[pi], M[pj])
        w, grad, xi = pair_kernel(dx, metric=M_pair)
        h_pair = np.linalg.det(M_pair) ** (-1.0 / 6.0)
    else:
        raise ValueError("need smoothing_lengths or kernel_metrics")
    return PairTerms(pi, pj, w, grad, xi, h_pair)


def _resolve(table, attr):
    return table.get_attribute(attr) if isinstance(attr, str) else np.asarray(attr, dtype=np.float64)


def _check_id(E, i):
    if not 0 <= i < E.n:
        raise IndexError(f"particle id {i} out of range for n={E.n}")


def interpolate_field(table: ParticleTable, pair_terms: PairTerms, attr) -> np.ndarray:
    """``sum_j W_ij A_j m_j / rho_j`` for every particle."""
    A = _resolve(table, attr)
    vol = table.mass / table.require_density()
    return np.bincount(pair_terms.i, pair_terms.w * (A * vol)[pair_terms.j], minlength=table.n)


def interpolate_scalar(table, E: EffectiveNeighbors, pair_terms: PairTerms, attr, i: int) -> float:
    """Kernel estimate of attribute ``attr`` at particle ``i``."""
    _check_id(E, i)
    A = _resolve(table, attr)
    rho = table.require_density()
    s = slice(E.indptr[i], E.indptr[i + 1])
    j = pair_terms.j[s]
    return float(np.sum(pair_terms.w[s] * A[j] * (table.mass[j] / rho[j])))


def interpolate_gradient_field(table, pair_terms: PairTerms, attr) -> np.ndarray:
    A = _resolve(table, attr)
    vol = table.mass / table.require_density()
    c = (A * vol)[pair_terms.j][:, None] * pair_terms.grad_w
    return np.stack([np.bincount(pair_terms.i, c[:, a], minlength=table.n) for a in range(3)], axis=1)


def interpolate_gradient(table, E: EffectiveNeighbors, pair_terms: PairTerms, attr, i: int) -> np.ndarray:
    """Kernel estimate of the gradient of ``attr`` at particle ``i``."""
    _check_id(E, i)
    A = _resolve(table, attr)
    rho = table.require_density()
    s = slice(E.indptr[i], E.indptr[i + 1])
    j = pair_terms.j[s]
    return (pair_terms.grad_w[s] * (A[j] * table.mass[j] / rho[j])[:, None]).sum(axis=0)


def compute_density(table: ParticleTable, E: EffectiveNeighbors, pair_terms: PairTerms) -> np.ndarray:
    """``rho_i = sum_j W_ij m_j`` over ``E_k(i)``, self term included."""
    return np.bincount(pair_terms.i, pair_terms.w * table.mass[pair_terms.j], minlength=table.n)


def apply_eos(table: ParticleTable, cfg: ForceConfig) -> np.ndarray:
    """Pressures from the barotropic law ``P = K rho**gamma``."""
    if not (np.isfinite(cfg.K) and cfg.K >= 0) or not cfg.gamma >= 1:
        raise ValueError("invalid equation of state parameters")
    rho = table.require_density()
    return cfg.K * rho**cfg.gamma


def sound_speed(table: ParticleTable, cfg: ForceConfig) -> np.ndarray:
    return np.sqrt(cfg.gamma * table.pressure / table.require_density())


def pair_accelerations(table: ParticleTable, pair_terms: PairTerms, cfg: ForceConfig):
    """Per-pair acceleration ``-m_j Pi_ij grad_i W_ij`` (self pairs dropped).

    Returns the pair ids and the (P, 3) contributions.
    """
    rho = table.require_density()
    P = table.pressure
    if not np.isfinite(P).all():
        raise ValueError("pressure contains NaN or inf")
    keep = pair_terms.i != pair_terms.j
    i, j = pair_terms.i[keep], pair_terms.j[keep]
    grad = pair_terms.grad_w[keep]
    p_over_rho2 = P / (rho * rho)
    Pi = p_over_rho2[i] + p_over_rho2[j]
    if cfg.viscous:
        h = pair_terms.h[keep]
        dx = table.position[i] - table.position[j]
        dv = table.velocity[i] - table.velocity[j]
        vr = (dv * dx).sum(axis=1)
        mu = h * vr / ((dx * dx).sum(axis=1) + cfg.epsilon * h * h)
        c = sound_speed(table, cfg)
        c_mean = 0.5 * (c[i] + c[j])
        rho_mean = 0.5 * (rho[i] + rho[j])
        visc = (-cfg.alpha * c_mean * mu + cfg.beta * mu * mu) / rho_mean
        Pi = Pi + np.where(vr < 0, visc, 0.0)
    return i, j, -(table.mass[j] * Pi)[:, None] * grad


def compute_forces(table: ParticleTable, E: EffectiveNeighbors, pair_terms: PairTerms, cfg: ForceConfig) -> np.ndarray:
    """Accelerations ``dv_i/dt = -sum_j m_j Pi_ij grad_i W_ij + F_i``."""
    i, _, acc = pair_accelerations(table, pair_terms, cfg)
    a = np.stack([np.bincount(i, acc[:, c], minlength=table.n) for c in range(3)], axis=1)
    return a + cfg.external(table.position)


@dataclass
class PipelineState:
    relation: NeighborRelation
    effective: EffectiveNeighbors
    pair_terms: PairTerms
    smoothing_length: np.ndarray
    metrics: np.ndarray | None = None


@dataclass
class SPHPipeline:
    """Neighbor rebuild -> pair terms -> density -> EOS -> forces.

    Calling the pipeline on a table refreshes its densities and pressures in
    place and returns the accelerations. The last intermediate state is kept
    on ``state`` for diagnostics.

    ``metric`` selects the neighbor geometry: ``euclidean`` (isotropic
    kernel), ``mahalanobis`` (covariance-adapted per particle) or ``stress``
    (inverse of a caller-supplied SPD tensor, per particle from the
    ``stress_*`` attributes or global from ``stress``).
    """

    k: int = 33
    metric: str = "euclidean"
    iterations: int = 2
    floor_fraction: float = 1e-3
    support_scale: float = 1.0
    leaf_capacity: int = 16
    stress: np.ndarray | None = None
    min_smoothing_length: float = 0.0
    state: PipelineState | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.metric not in METRIC_KINDS:
            raise ValueError(f"unknown metric {self.metric!r}")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not self.support_scale > 0:
            raise ValueError("support_scale must be > 0")

    def stress_metrics(self, table: ParticleTable) -> np.ndarray:
        if all(name in table.attributes for name in STRESS_COMPONENTS):
            xx, yy, zz, xy, xz, yz = (table.attributes[c] for c in STRESS_COMPONENTS)
            T = np.stack(
                [np.stack([xx, xy, xz], -1), np.stack([xy, yy, yz], -1), np.stack([xz, yz, zz], -1)],
                axis=1,
            )
        elif self.stress is not None:
            T = np.broadcast_to(np.asarray(self.stress, dtype=np.float64), (table.n, 3, 3))
        else:
            raise ValueError("stress metric needs stress_* attributes or a global stress tensor")
        if (np.linalg.eigvalsh(T)[:, 0] <= 0).any():
            raise ValueError("stress tensor must be positive definite")
        return invert_spd_batch(T, self.floor_fraction)

    def neighbors(self, table: ParticleTable):
        """k-NN relation and per-particle metrics (``None`` when Euclidean)."""
        tree = build_octree(table, self.leaf_capacity)
        if self.metric == "euclidean":
            return knn_all(tree, self.k), None
        if self.metric == "mahalanobis":
            return adaptive_metric_knn(tree, self.k, self.iterations, self.floor_fraction)[::-1]
        M = self.stress_metrics(table)
        return knn_all(tree, self.k, M), M

    def prepare(self, table: ParticleTable) -> PipelineState:
        relation, metrics = self.neighbors(table)
        E = symmetric_closure(relation)
        if metrics is None:
            h = smoothing_lengths(relation, self.support_scale, self.min_smoothing_length)
            terms = build_pair_terms(table, E, smoothing_lengths=h)
        else:
            Mk = kernel_metrics(relation, metrics, self.support_scale, self.min_smoothing_length)
            h = np.linalg.det(Mk) ** (-1.0 / 6.0)
            terms = build_pair_terms(table, E, kernel_metrics=Mk)
        self.state = PipelineState(relation, E, terms, h, metrics)
        return self.state

    def density(self, table: ParticleTable) -> np.ndarray:
        """Refresh ``table.density`` and return it."""
        st = self.prepare(table)
        table.density = compute_density(table, st.effective, st.pair_terms)
        return table.density

    def __call__(self, table: ParticleTable, cfg: ForceConfig) -> np.ndarray:
        self.density(table)
        table.pressure = apply_eos(table, cfg)
        return compute_forces(table, self.state.effective, self.state.pair_terms, cfg)


@dataclass
class StepResult:
    table: ParticleTable
    accelerations: np.ndarray
    diagnostics: dict


def diagnostics(table: ParticleTable, cfg: ForceConfig | None = None, dt=None, smoothing_length=None) -> dict:
    """Total momentum, kinetic energy, density range and (optionally) CFL."""
    m, v = table.mass, table.velocity
    # overflow shows up as inf and is caught by check_diagnostics
    with np.errstate(over="ignore", invalid="ignore"):
        out = {
            "momentum": (m[:, None] * v).sum(axis=0).tolist(),
            "momentum_scale": float((m * np.linalg.norm(v, axis=1)).sum()),
            "kinetic_energy": float(0.5 * (m * (v * v).sum(axis=1)).sum()),
            "density_min": float(table.density.min()),
            "density_max": float(table.density.max()),
        }
    if cfg is not None and dt is not None and smoothing_length is not None and (table.density > 0).all():
        c = sound_speed(table, cfg)
        out["cfl"] = float(dt * np.max(c / smoothing_length))
    return out


def check_diagnostics(diag: dict, step_index=None) -> None:
    """Raise :class:`NumericalError` if any reported quantity overflowed."""
    values = np.hstack([np.ravel(v) for v in diag.values()]).astype(np.float64)
    if not np.isfinite(values).all():
        raise NumericalError("non-finite diagnostics", step_index)


def step(table: ParticleTable, cfg: ForceConfig, dt: float, pipeline: Callable, accelerations=None, step_index=None) -> StepResult:
    """One kick-drift-kick leapfrog step.

    ``pipeline(table, cfg)`` must return accelerations for the table's
    current state. Pass the previous step's closing ``accelerations`` to
    skip re-evaluating them at the start; the input table is left untouched.
    """
    if not (np.isfinite(dt) and dt > 0):
        raise ValueError("dt must be finite and > 0")
    if accelerations is None:
        work = table.copy()
        accelerations = pipeline(work, cfg)
    new = table.copy()
    v_half = table.velocity + (0.5 * dt) * accelerations
    new.position = table.position + dt * v_half
    new.velocity = v_half
    if not (np.isfinite(new.position).all() and np.isfinite(new.velocity).all()):
        raise NumericalError("non-finite state after drift", step_index)
    a_new = pipeline(new, cfg)
    new.velocity = v_half + (0.5 * dt) * a_new
    if not (np.isfinite(new.velocity).all() and np.isfinite(a_new).all()):
        raise NumericalError("non-finite state after kick", step_index)
    state = getattr(pipeline, "state", None)
    h = state.smoothing_length if state is not None else None
    diag = diagnostics(new, cfg, dt, h)
    check_diagnostics(diag, step_index)
    return StepResult(new, a_new, diag)
