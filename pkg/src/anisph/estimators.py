"""scikit-learn style wrappers around the neighbor search and density pass.

These let the anisotropic k-NN and the kernel density estimate slot into
pipelines, grid searches and anything else that speaks ``fit`` /
``get_params``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .kernel import pair_kernel
from .metric import MetricTensor
from .neighbors import Octree, adaptive_metric_knn, knn_all, knn_positions, symmetric_closure
from .particles import create_table
from .sph import build_pair_terms, compute_density, kernel_metrics, smoothing_lengths

__all__ = ["AnisotropicNeighbors", "KNNDensityEstimator"]


def _check_points(X):
    X = check_array(X, dtype=np.float64)
    if X.shape[1] != 3:
        raise ValueError(f"expected 3 features (x, y, z), got {X.shape[1]}")
    return X


def _is_named(metric, name):
    return isinstance(metric, str) and metric == name


def _global_metric(metric):
    if isinstance(metric, MetricTensor):
        return metric.matrix
    if metric is None or _is_named(metric, "euclidean"):
        return np.eye(3)
    if isinstance(metric, str):
        raise ValueError(f"unknown metric {metric!r}")
    return MetricTensor(np.asarray(metric, dtype=np.float64)).matrix


class AnisotropicNeighbors(BaseEstimator):
    """k-nearest neighbors under a quadratic-form metric.

    Parameters
    ----------
    n_neighbors : int, default=8
        Neighbors per point, the point itself included at rank 0.
    metric : {"euclidean", "mahalanobis"} or array of shape (3, 3), default="euclidean"
        ``"mahalanobis"`` adapts a unit-determinant metric per point from its
        neighbors' covariance; a matrix is used as one global metric.
    iterations : int, default=2
        Covariance refinements for ``metric="mahalanobis"``.
    floor_fraction : float, default=1e-3
        Eigenvalue floor when inverting covariances.
    leaf_size : int, default=16
        Octree leaf capacity.

    Attributes
    ----------
    tree_ : Octree
    metrics_ : ndarray of shape (n_samples, 3, 3)
    neighbors_ : NeighborRelation
    effective_neighbors_ : EffectiveNeighbors
    """

    def __init__(self, n_neighbors=8, metric="euclidean", iterations=2, floor_fraction=1e-3, leaf_size=16):
        self.n_neighbors = n_neighbors
        self.metric = metric
        self.iterations = iterations
        self.floor_fraction = floor_fraction
        self.leaf_size = leaf_size

    def fit(self, X, y=None):
        X = _check_points(X)
        self.tree_ = Octree(X, self.leaf_size)
        if self._adaptive:
            self.metrics_, self.neighbors_ = adaptive_metric_knn(
                self.tree_, self.n_neighbors, self.iterations, self.floor_fraction
            )
        else:
            M = _global_metric(self.metric)
            self.metrics_ = np.broadcast_to(M, (X.shape[0], 3, 3))
            self.neighbors_ = knn_all(self.tree_, self.n_neighbors, M)
        self.effective_neighbors_ = symmetric_closure(self.neighbors_)
        self.n_features_in_ = 3
        return self

    def kneighbors(self, X=None, n_neighbors=None, return_distance=True):
        """Neighbors of the training points (``X=None``) or of new points.

        Distances are squared metric distances. New points are only supported
        with a global metric, since adapted metrics belong to training points.
        """
        check_is_fitted(self, "tree_")
        k = self.n_neighbors if n_neighbors is None else n_neighbors
        if X is None:
            if k == self.n_neighbors:
                ind, dist = self.neighbors_.indices, self.neighbors_.xi
            else:
                rel = knn_all(self.tree_, k, self.metrics_ if self._adaptive else self.metrics_[0])
                ind, dist = rel.indices, rel.xi
        else:
            if self._adaptive:
                raise ValueError("queries at new points need a global metric")
            ind, dist = knn_positions(self.tree_, _check_points(X), k, self.metrics_[0])
        return (dist, ind) if return_distance else ind

    @property
    def _adaptive(self):
        return _is_named(self.metric, "mahalanobis")


class KNNDensityEstimator(BaseEstimator):
    """Kernel density estimate with a k-NN-sized cubic spline kernel.

    ``fit`` runs the density pass over the effective neighbors of the
    training points. ``score_samples`` returns log densities (mass per unit
    volume, so normalize ``sample_weight`` for a probability density).

    Parameters
    ----------
    n_neighbors : int, default=33
    metric : {"euclidean", "mahalanobis"}, default="euclidean"
    iterations, floor_fraction, leaf_size
        As for :class:`AnisotropicNeighbors`.
    support_scale : float, default=1.0
        Kernel support in units of the k-th neighbor distance.
    """

    def __init__(self, n_neighbors=33, metric="euclidean", iterations=2, floor_fraction=1e-3,
                 leaf_size=16, support_scale=1.0):
        self.n_neighbors = n_neighbors
        self.metric = metric
        self.iterations = iterations
        self.floor_fraction = floor_fraction
        self.leaf_size = leaf_size
        self.support_scale = support_scale

    def fit(self, X, y=None, sample_weight=None):
        X = _check_points(X)
        n = X.shape[0]
        mass = np.ones(n) if sample_weight is None else np.asarray(sample_weight, dtype=np.float64)
        self.table_ = create_table(mass, X, np.zeros((n, 3)))
        nn = AnisotropicNeighbors(self.n_neighbors, self.metric, self.iterations, self.floor_fraction,
                                  self.leaf_size).fit(X)
        self.neighbors_ = nn
        E = nn.effective_neighbors_
        if _is_named(self.metric, "euclidean"):
            self.smoothing_length_ = smoothing_lengths(nn.neighbors_, self.support_scale)
            terms = build_pair_terms(self.table_, E, smoothing_lengths=self.smoothing_length_)
        else:
            Mk = kernel_metrics(nn.neighbors_, nn.metrics_, self.support_scale)
            self.smoothing_length_ = np.linalg.det(Mk) ** (-1.0 / 6.0)
            terms = build_pair_terms(self.table_, E, kernel_metrics=Mk)
        self.pair_terms_ = terms
        self.density_ = compute_density(self.table_, E, terms)
        self.table_.density = self.density_
        self.n_features_in_ = 3
        return self

    def score_samples(self, X=None):
        """Log density at the training points, or gathered at new points.

        A new point takes votes from its own ``n_neighbors`` nearest training
        points with a kernel sized by the k-th distance (Euclidean only).
        """
        check_is_fitted(self, "density_")
        if X is None:
            return np.log(self.density_)
        if not _is_named(self.metric, "euclidean"):
            raise ValueError("density at new points is only available for the euclidean metric")
        X = _check_points(X)
        ind, xi = knn_positions(self.neighbors_.tree_, X, self.n_neighbors, np.eye(3))
        h = self.support_scale * np.sqrt(xi[:, -1])
        dx = (X[:, None, :] - self.table_.position[ind]).reshape(-1, 3)
        w, _, _ = pair_kernel(dx, smoothing_length=np.repeat(h, self.n_neighbors))
        rho = (w.reshape(ind.shape) * self.table_.mass[ind]).sum(axis=1)
        with np.errstate(divide="ignore"):
            return np.log(rho)
