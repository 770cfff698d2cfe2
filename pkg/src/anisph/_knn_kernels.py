"""Compiled tree-search loops for :mod:`anisph.neighbors`."""

import os

import numba
import numpy as np
from numba import njit, prange

# the bundled TBB is too old for numba; avoid the probe and its warning
if "NUMBA_THREADING_LAYER" not in os.environ:
    numba.config.THREADING_LAYER = "workqueue"


def configure_threads():
    """Cap numba's worker pool from ``SPHR_THREADS`` (default: all cores)."""
    value = os.environ.get("SPHR_THREADS")
    if value:
        numba.set_num_threads(max(1, min(int(value), numba.config.NUMBA_NUM_THREADS)))


@njit(cache=True, inline="always")
def _qform(M, d0, d1, d2):
    # same expression as metric.quadratic_form, keep in sync
    return (
        d0 * (M[0, 0] * d0 + M[0, 1] * d1 + M[0, 2] * d2)
        + d1 * (M[1, 0] * d0 + M[1, 1] * d1 + M[1, 2] * d2)
        + d2 * (M[2, 0] * d0 + M[2, 1] * d1 + M[2, 2] * d2)
    )


@njit(cache=True)
def _box_dist2(lo, hi, node, p0, p1, p2):
    s = 0.0
    for a, p in ((0, p0), (1, p1), (2, p2)):
        if p < lo[node, a]:
            t = lo[node, a] - p
            s += t * t
        elif p > hi[node, a]:
            t = p - hi[node, a]
            s += t * t
    return s


@njit(cache=True)
def _query_one(q, X, M, lam, skip, m, lo, hi, child, start, count, leaf, order, out_i, out_x):
    """Fill ``out_i/out_x`` (length m) with the m smallest (xi, id) pairs."""
    filled = 0
    p0, p1, p2 = q[0], q[1], q[2]
    stack = np.empty(64 * 8 + 8, dtype=np.int64)
    sb = np.empty(64 * 8 + 8, dtype=np.float64)
    top = 0
    stack[0] = 0
    sb[0] = lam * _box_dist2(lo, hi, 0, p0, p1, p2)
    top = 1
    cb = np.empty(8, dtype=np.float64)
    cn = np.empty(8, dtype=np.int64)
    while top > 0:
        top -= 1
        node = stack[top]
        if filled == m and sb[top] > out_x[m - 1]:
            continue
        if leaf[node]:
            for s in range(start[node], start[node] + count[node]):
                j = order[s]
                if j == skip:
                    continue
                xi = _qform(M, X[j, 0] - p0, X[j, 1] - p1, X[j, 2] - p2)
                if filled == m:
                    w = out_x[m - 1]
                    if xi > w or (xi == w and j > out_i[m - 1]):
                        continue
                    pos = m - 1
                else:
                    pos = filled
                    filled += 1
                while pos > 0 and (out_x[pos - 1] > xi or (out_x[pos - 1] == xi and out_i[pos - 1] > j)):
                    out_x[pos] = out_x[pos - 1]
                    out_i[pos] = out_i[pos - 1]
                    pos -= 1
                out_x[pos] = xi
                out_i[pos] = j
        else:
            nc = 0
            for c in range(8):
                ch = child[node, c]
                if ch < 0:
                    continue
                b = lam * _box_dist2(lo, hi, ch, p0, p1, p2)
                if filled == m and b > out_x[m - 1]:
                    continue
                # keep candidates sorted by bound, descending, so the nearest is pushed last
                pos = nc
                while pos > 0 and cb[pos - 1] < b:
                    cb[pos] = cb[pos - 1]
                    cn[pos] = cn[pos - 1]
                    pos -= 1
                cb[pos] = b
                cn[pos] = ch
                nc += 1
            for c in range(nc):
                stack[top] = cn[c]
                sb[top] = cb[c]
                top += 1
    return filled


@njit(cache=True, parallel=True)
def knn_batch(Q, self_ids, X, Ms, lams, k, lo, hi, child, start, count, leaf, order):
    nq = Q.shape[0]
    out_i = np.empty((nq, k), dtype=np.int64)
    out_x = np.empty((nq, k), dtype=np.float64)
    stride = 1 if Ms.shape[0] > 1 else 0
    for t in prange(nq):
        mi = t * stride
        s = self_ids[t]
        if s >= 0:
            out_i[t, 0] = s
            out_x[t, 0] = 0.0
            if k > 1:
                _query_one(Q[t], X, Ms[mi], lams[mi], s, k - 1, lo, hi, child, start, count, leaf,
                           order, out_i[t, 1:], out_x[t, 1:])
        else:
            _query_one(Q[t], X, Ms[mi], lams[mi], -1, k, lo, hi, child, start, count, leaf,
                       order, out_i[t], out_x[t])
    return out_i, out_x
