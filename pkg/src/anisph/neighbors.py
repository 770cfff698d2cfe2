"""Octree index, anisotropic k-NN queries and the effective-neighbor closure.

One octree, built on plain Euclidean geometry, serves every metric. A metric
``M`` only enters through the pruning bound ``lambda_min(M) * d_box**2``,
which never exceeds the true squared metric distance to anything in a box.

Ordering is by ``(xi, id)``: ties in squared distance go to the smaller id.
For id queries the particle itself is always rank 0 (the improper neighbor).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _knn_kernels
from .metric import (
    MetricTensor,
    estimate_covariances,
    invert_spd_batch,
    normalize_determinant,
    quadratic_form,
)
from .particles import ParticleTable

__all__ = [
    "Octree",
    "NeighborRelation",
    "EffectiveNeighbors",
    "build_octree",
    "knn_query",
    "knn_all",
    "knn_positions",
    "brute_force_knn",
    "symmetric_closure",
    "adaptive_metric_knn",
]

MAX_DEPTH = 48
# shrink the pruning bound a hair so rounding in the quadratic form can never
# make a skipped box hide a point that belongs in the result
_BOUND_SAFETY = 1.0 - 1e-9


class Octree:
    """Flat-array octree over a fixed set of positions.

    Nodes are laid out depth first; node ``c`` owns the contiguous slice
    ``order[start[c]:start[c] + count[c]]`` of particle ids, so leaves
    partition the ids and every internal node covers its subtree.

    Attributes
    ----------
    lo, hi : ndarray, shape (n_nodes, 3)
        Axis-aligned node boxes.
    child : ndarray, shape (n_nodes, 8)
        Child node index per octant, ``-1`` where the octant is empty.
    start, count : ndarray, shape (n_nodes,)
    leaf : ndarray of bool, shape (n_nodes,)
    order : ndarray, shape (n,)
        Particle ids in tree order; ascending within each leaf.
    """

    def __init__(self, positions, leaf_capacity=16):
        X = np.ascontiguousarray(positions, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != 3 or X.shape[0] == 0:
            raise ValueError("octree needs a non-empty (n, 3) position array")
        if not np.isfinite(X).all():
            raise ValueError("octree positions must be finite")
        if leaf_capacity < 1:
            raise ValueError("leaf_capacity must be >= 1")
        self.positions = X
        self.leaf_capacity = int(leaf_capacity)
        self._build()

    def _build(self):
        X, B = self.positions, self.leaf_capacity
        xmin, xmax = X.min(axis=0), X.max(axis=0)
        center = 0.5 * (xmin + xmax)
        half = 0.5 * float((xmax - xmin).max()) * (1.0 + 1e-6)
        if half == 0.0:
            half = 1e-6 * max(1.0, float(np.abs(center).max()))

        lo, hi, child, start, count, leaf = [], [], [], [], [], []
        order = np.empty(X.shape[0], dtype=np.int64)
        filled = 0

        def new_node(b_lo, b_hi):
            lo.append(b_lo)
            hi.append(b_hi)
            child.append([-1] * 8)
            start.append(0)
            count.append(0)
            leaf.append(False)
            return len(lo) - 1

        # explicit recursion keeps the depth-first layout
        def build(node, ids, depth):
            nonlocal filled
            start[node] = filled
            count[node] = ids.size
            pts = X[ids]
            if ids.size <= B or depth >= MAX_DEPTH or not np.ptp(pts, axis=0).any():
                leaf[node] = True
                order[filled:filled + ids.size] = ids
                filled += ids.size
                return
            b_lo, b_hi = lo[node], hi[node]
            mid = 0.5 * (b_lo + b_hi)
            upper = pts >= mid
            octant = upper[:, 0] | (upper[:, 1].astype(np.int64) << 1) | (upper[:, 2].astype(np.int64) << 2)
            for o in range(8):
                sub = ids[octant == o]
                if sub.size == 0:
                    continue
                bits = np.array([bool(o & (1 << a)) for a in range(3)])
                ch = new_node(np.where(bits, mid, b_lo), np.where(bits, b_hi, mid))
                child[node][o] = ch
                build(ch, sub, depth + 1)

        root = new_node(center - half, center + half)
        build(root, np.arange(X.shape[0], dtype=np.int64), 0)

        self.lo = np.array(lo, dtype=np.float64)
        self.hi = np.array(hi, dtype=np.float64)
        self.child = np.array(child, dtype=np.int64)
        self.start = np.array(start, dtype=np.int64)
        self.count = np.array(count, dtype=np.int64)
        self.leaf = np.array(leaf, dtype=np.bool_)
        self.order = order

    @property
    def n_nodes(self) -> int:
        return self.lo.shape[0]

    def leaves(self):
        """Yield ``(node, ids)`` for every leaf."""
        for node in np.flatnonzero(self.leaf):
            s = self.start[node]
            yield int(node), self.order[s:s + self.count[node]]

    def query(self, queries, k, metrics, self_ids=None):
        """k smallest ``(xi, id)`` for each query point.

        ``metrics`` is one (3, 3) matrix or one per query. With ``self_ids``
        the listed particle is pinned to rank 0 and skipped in the scan.
        """
        Q = np.ascontiguousarray(np.atleast_2d(queries), dtype=np.float64)
        Ms = np.asarray(metrics.matrix if isinstance(metrics, MetricTensor) else metrics, dtype=np.float64)
        Ms = np.ascontiguousarray(Ms.reshape(-1, 3, 3))
        if Ms.shape[0] not in (1, Q.shape[0]):
            raise ValueError("need one metric or one metric per query")
        lams = np.linalg.eigvalsh(Ms)[:, 0] * _BOUND_SAFETY
        if (lams <= 0).any():
            raise ValueError("metrics must be positive definite")
        if self_ids is None:
            self_ids = np.full(Q.shape[0], -1, dtype=np.int64)
        _knn_kernels.configure_threads()
        return _knn_kernels.knn_batch(
            Q, np.ascontiguousarray(self_ids, dtype=np.int64), self.positions, Ms, lams, int(k),
            self.lo, self.hi, self.child, self.start, self.count, self.leaf, self.order,
        )


def build_octree(table: ParticleTable, leaf_capacity: int = 16) -> Octree:
    return Octree(table.position, leaf_capacity)


@dataclass
class NeighborRelation:
    """Per-particle ordered k-NN lists; row ``i`` starts with ``i`` itself.

    Attributes
    ----------
    indices : ndarray, shape (n, k)
    xi : ndarray, shape (n, k)
        Squared metric distances, nondecreasing along each row.
    """

    indices: np.ndarray
    xi: np.ndarray

    @property
    def k(self) -> int:
        return self.indices.shape[1]

    @property
    def n(self) -> int:
        return self.indices.shape[0]

    @property
    def xi_max(self) -> np.ndarray:
        return self.xi[:, -1]

    def __getitem__(self, i):
        return self.indices[i]

    def pairs(self) -> np.ndarray:
        """All ordered pairs ``(i, j)`` with ``j`` in ``N_k(i)``."""
        rows = np.repeat(np.arange(self.n, dtype=np.int64), self.k)
        return np.column_stack([rows, self.indices.ravel()])

    def __contains__(self, pair):
        i, j = pair
        return bool(np.any(self.indices[i] == j))


@dataclass
class EffectiveNeighbors:
    """Symmetric closure of a k-NN relation in CSR form.

    ``indices[indptr[i]:indptr[i + 1]]`` is ``E_k(i)``, sorted ascending.
    """

    indptr: np.ndarray
    indices: np.ndarray

    @property
    def n(self) -> int:
        return self.indptr.shape[0] - 1

    def __getitem__(self, i):
        return self.indices[self.indptr[i]:self.indptr[i + 1]]

    def __len__(self):
        return self.indices.shape[0]

    def __contains__(self, pair):
        i, j = pair
        row = self[i]
        pos = np.searchsorted(row, j)
        return bool(pos < row.size and row[pos] == j)

    def sizes(self) -> np.ndarray:
        return np.diff(self.indptr)

    def pairs(self) -> np.ndarray:
        rows = np.repeat(np.arange(self.n, dtype=np.int64), self.sizes())
        return np.column_stack([rows, self.indices])


def _check_k(k, n):
    if not 1 <= k <= n:
        raise ValueError(f"k must satisfy 1 <= k <= n={n}, got {k}")


def _metric_stack(metric, n):
    if metric is None:
        return np.eye(3)[None]
    M = metric.matrix if isinstance(metric, MetricTensor) else np.asarray(metric, dtype=np.float64)
    M = M.reshape(-1, 3, 3)
    if M.shape[0] not in (1, n):
        raise ValueError("need a single metric or one per particle")
    return M


def knn_all(tree: Octree, k: int, metric=None) -> NeighborRelation:
    """k-NN relation for every particle indexed by ``tree``.

    ``metric`` is a :class:`MetricTensor`, a (3, 3) array, an (n, 3, 3)
    stack of per-particle metrics, or ``None`` for Euclidean.
    """
    X = tree.positions
    n = X.shape[0]
    _check_k(k, n)
    idx, xi = tree.query(X, k, _metric_stack(metric, n), np.arange(n, dtype=np.int64))
    return NeighborRelation(idx, xi)


def knn_query(tree: Octree, table: ParticleTable, i: int, k: int, metric=None):
    """Ordered k-NN ids of particle ``i`` and their squared distances."""
    n = table.n
    if not 0 <= i < n:
        raise IndexError(f"particle id {i} out of range for n={n}")
    _check_k(k, n)
    M = _metric_stack(metric, n)
    M = M[i:i + 1] if M.shape[0] == n and n > 1 else M[:1]
    idx, xi = tree.query(table.position[i:i + 1], k, M, np.array([i]))
    return idx[0], xi[0]


def knn_positions(tree: Octree, queries, k: int, metric=None):
    """k-NN of arbitrary points (no self pinning)."""
    _check_k(k, tree.positions.shape[0])
    return tree.query(queries, k, _metric_stack(metric, np.atleast_2d(queries).shape[0]))


def brute_force_knn(positions, k, metric=None, self_ids=None, queries=None):
    """O(N^2) reference scan under the same ``(xi, id)`` ordering rule."""
    X = np.asarray(positions, dtype=np.float64)
    n = X.shape[0]
    if queries is None:
        queries = X
        self_ids = np.arange(n) if self_ids is None else self_ids
    Q = np.atleast_2d(queries)
    Ms = _metric_stack(metric, Q.shape[0])
    out_i = np.empty((Q.shape[0], k), dtype=np.int64)
    out_x = np.empty((Q.shape[0], k))
    ids = np.arange(n)
    for t in range(Q.shape[0]):
        xi = quadratic_form(Ms[t if Ms.shape[0] > 1 else 0], X - Q[t])
        s = -1 if self_ids is None else self_ids[t]
        if s >= 0:
            # self first, then the rest by (xi, id)
            key_first = np.where(ids == s, 0, 1)
            order = np.lexsort((ids, xi, key_first))
            xi = np.where(ids == s, 0.0, xi)
        else:
            order = np.lexsort((ids, xi))
        out_i[t] = order[:k]
        out_x[t] = xi[order[:k]]
    return out_i, out_x


def symmetric_closure(N: NeighborRelation) -> EffectiveNeighbors:
    """Union of ``N`` with its transpose, as sorted CSR rows."""
    n = N.n
    p = N.pairs()
    both = np.concatenate([p, p[:, ::-1]])
    keys = np.unique(both[:, 0] * n + both[:, 1])
    rows, cols = np.divmod(keys, n)
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=n), out=indptr[1:])
    return EffectiveNeighbors(indptr, cols.astype(np.int64))


def adaptive_metric_knn(table_or_tree, k, iterations=2, floor_fraction=1e-3, leaf_capacity=16, query_ids=None):
    """Iteratively covariance-adapted k-NN.

    Iteration 0 is a Euclidean query. Each further iteration estimates every
    particle's second-moment tensor over its current neighbors (self
    excluded), inverts it with eigenvalue flooring, rescales it to unit
    determinant and queries again.

    Parameters
    ----------
    query_ids : array_like of int, optional
        Adapt only these particles; rows of the result follow this order.
        Useful when ``k`` is large and only a few metrics are needed.

    Returns
    -------
    metrics : ndarray, shape (n_query, 3, 3)
    relation : NeighborRelation
    """
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    if isinstance(table_or_tree, Octree):
        tree = table_or_tree
    else:
        tree = build_octree(table_or_tree, leaf_capacity)
    X = tree.positions
    n = X.shape[0]
    _check_k(k, n)
    ids = np.arange(n, dtype=np.int64) if query_ids is None else np.asarray(query_ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise IndexError("query id out of range")
    metrics = np.broadcast_to(np.eye(3), (ids.size, 3, 3)).copy()
    relation = NeighborRelation(*tree.query(X[ids], k, np.eye(3)[None], ids))
    for _ in range(iterations):
        S = estimate_covariances(X, ids, relation.indices[:, 1:])
        metrics = normalize_determinant(invert_spd_batch(S, floor_fraction))
        relation = NeighborRelation(*tree.query(X[ids], k, metrics, ids))
    return metrics, relation
