# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels: per-sample classifier SGD sweep and exact top-k select.

Semantics match daret._kernels_py; see that module for the contracts. The
sweep is the genuinely sequential hot loop (each update depends on the
previous one); top-k uses a bounded min-heap ordered by (score, -index) so
ties break toward the smaller index, identical to the stable-argsort
fallback.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, log

cnp.import_array()

BACKEND_NAME = "compiled"


def classifier_sweep(double[:, ::1] W, double[:, ::1] X, cnp.int64_t[::1] y,
                     cnp.int64_t[::1] order, double lr):
    cdef Py_ssize_t n = order.shape[0]
    cdef Py_ssize_t d = X.shape[1]
    cdef Py_ssize_t ii, j, idx
    cdef double z0, z1, m, e0, e1, s, p0, p1, pt, g0, g1
    cdef double total = 0.0
    for ii in range(n):
        idx = order[ii]
        z0 = 0.0
        z1 = 0.0
        for j in range(d):
            z0 += W[0, j] * X[idx, j]
            z1 += W[1, j] * X[idx, j]
        m = z0 if z0 > z1 else z1
        e0 = exp(z0 - m)
        e1 = exp(z1 - m)
        s = e0 + e1
        p0 = e0 / s
        p1 = e1 / s
        if y[idx] == 0:
            pt = p0
            g0 = p0 - 1.0
            g1 = p1
        else:
            pt = p1
            g0 = p0
            g1 = p1 - 1.0
        if pt < 1e-12:
            pt = 1e-12
        total -= log(pt)
        for j in range(d):
            W[0, j] -= lr * g0 * X[idx, j]
            W[1, j] -= lr * g1 * X[idx, j]
    return total / n


cdef inline bint _worse(double sa, cnp.int64_t ia, double sb, cnp.int64_t ib):
    # "a ranks below b": lower score, or equal score with larger index
    if sa < sb:
        return True
    if sa == sb and ia > ib:
        return True
    return False


cdef void _select_row(const double* scores, Py_ssize_t n, Py_ssize_t k,
                      double* hs, cnp.int64_t* hi, cnp.int64_t* out):
    # min-heap keyed "worse first"; root is the worst entry currently kept
    cdef Py_ssize_t size = 0, i, pos, parent, child, right
    cdef double s, ts
    cdef cnp.int64_t ti
    for i in range(n):
        s = scores[i]
        if size < k:
            pos = size
            size += 1
            hs[pos] = s
            hi[pos] = i
            while pos > 0:
                parent = (pos - 1) >> 1
                if _worse(hs[pos], hi[pos], hs[parent], hi[parent]):
                    ts = hs[pos]; hs[pos] = hs[parent]; hs[parent] = ts
                    ti = hi[pos]; hi[pos] = hi[parent]; hi[parent] = ti
                    pos = parent
                else:
                    break
        elif _worse(hs[0], hi[0], s, i):
            hs[0] = s
            hi[0] = i
            pos = 0
            while True:
                child = 2 * pos + 1
                if child >= k:
                    break
                right = child + 1
                if right < k and _worse(hs[right], hi[right], hs[child], hi[child]):
                    child = right
                if _worse(hs[child], hi[child], hs[pos], hi[pos]):
                    ts = hs[pos]; hs[pos] = hs[child]; hs[child] = ts
                    ti = hi[pos]; hi[pos] = hi[child]; hi[child] = ti
                    pos = child
                else:
                    break
    # heap-sort extraction: pops come worst-first, fill output back to front
    cdef Py_ssize_t t
    for t in range(size - 1, -1, -1):
        out[t] = hi[0]
        size -= 1
        hs[0] = hs[size]
        hi[0] = hi[size]
        pos = 0
        while True:
            child = 2 * pos + 1
            if child >= size:
                break
            right = child + 1
            if right < size and _worse(hs[right], hi[right], hs[child], hi[child]):
                child = right
            if _worse(hs[child], hi[child], hs[pos], hi[pos]):
                ts = hs[pos]; hs[pos] = hs[child]; hs[child] = ts
                ti = hi[pos]; hi[pos] = hi[child]; hi[child] = ti
                pos = child
            else:
                break


def top_k_select(double[::1] scores, k):
    cdef Py_ssize_t n = scores.shape[0]
    cdef Py_ssize_t kk = min(int(k), n)
    out = np.empty(kk, dtype=np.int64)
    if kk == 0:
        return out
    heap_s = np.empty(kk, dtype=np.float64)
    heap_i = np.empty(kk, dtype=np.int64)
    cdef double[::1] hs = heap_s
    cdef cnp.int64_t[::1] hi = heap_i
    cdef cnp.int64_t[::1] ov = out
    _select_row(&scores[0], n, kk, &hs[0], &hi[0], &ov[0])
    return out


def top_k_batch(double[:, ::1] scores, k):
    cdef Py_ssize_t q = scores.shape[0]
    cdef Py_ssize_t n = scores.shape[1]
    cdef Py_ssize_t kk = min(int(k), n)
    out = np.empty((q, kk), dtype=np.int64)
    if kk == 0 or q == 0:
        return out
    heap_s = np.empty(kk, dtype=np.float64)
    heap_i = np.empty(kk, dtype=np.int64)
    cdef double[::1] hs = heap_s
    cdef cnp.int64_t[::1] hi = heap_i
    cdef cnp.int64_t[:, ::1] ov = out
    cdef Py_ssize_t row
    for row in range(q):
        _select_row(&scores[row, 0], n, kk, &hs[0], &hi[0], &ov[row, 0])
    return out
