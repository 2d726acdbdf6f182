# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled top-k inner-product scan.

One pass over the key rows keeps a size-k min-heap keyed on (score, -index),
so a candidate evicts the heap root when it has a higher score, or an equal
score and a lower row index.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()


cdef inline bint _worse(double sa, Py_ssize_t ia, double sb, Py_ssize_t ib) nogil:
    # True when entry a ranks below entry b
    if sa < sb:
        return True
    if sa > sb:
        return False
    return ia > ib


cdef void _sift_down(double* hs, Py_ssize_t* hi, Py_ssize_t n, Py_ssize_t pos) nogil:
    cdef Py_ssize_t child, right
    cdef double ts
    cdef Py_ssize_t ti
    while True:
        child = 2 * pos + 1
        if child >= n:
            break
        right = child + 1
        if right < n and _worse(hs[right], hi[right], hs[child], hi[child]):
            child = right
        if _worse(hs[child], hi[child], hs[pos], hi[pos]):
            ts = hs[pos]; hs[pos] = hs[child]; hs[child] = ts
            ti = hi[pos]; hi[pos] = hi[child]; hi[child] = ti
            pos = child
        else:
            break


cdef void _scan(const double[:, ::1] keys, const double* q, Py_ssize_t k,
                double* hs, Py_ssize_t* hi) nogil:
    cdef Py_ssize_t m = keys.shape[0]
    cdef Py_ssize_t d = keys.shape[1]
    cdef Py_ssize_t i, j, t, n = 0
    cdef double s
    cdef const double* row
    for i in range(m):
        row = &keys[i, 0]
        s = 0.0
        for j in range(d):
            s += row[j] * q[j]
        if n < k:
            # sift up
            hs[n] = s
            hi[n] = i
            j = n
            n += 1
            while j > 0:
                if _worse(hs[j], hi[j], hs[(j - 1) // 2], hi[(j - 1) // 2]):
                    s = hs[j]; hs[j] = hs[(j - 1) // 2]; hs[(j - 1) // 2] = s
                    t = hi[j]; hi[j] = hi[(j - 1) // 2]; hi[(j - 1) // 2] = t
                    j = (j - 1) // 2
                else:
                    break
        elif _worse(hs[0], hi[0], s, i):
            hs[0] = s
            hi[0] = i
            _sift_down(hs, hi, n, 0)
    # heap-sort in place: repeatedly move the worst to the end
    while n > 1:
        n -= 1
        s = hs[0]; hs[0] = hs[n]; hs[n] = s
        t = hi[0]; hi[0] = hi[n]; hi[n] = t
        _sift_down(hs, hi, n, 0)


def topk_dot(const double[:, ::1] keys, const double[::1] query, Py_ssize_t k):
    """Return (indices, scores) of the k best rows, best first."""
    cdef Py_ssize_t m = keys.shape[0]
    if m == 0:
        raise ValueError("empty memory")
    if query.shape[0] != keys.shape[1]:
        raise ValueError(f"query length {query.shape[0]} != key dim {keys.shape[1]}")
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > m:
        k = m
    cdef cnp.ndarray[cnp.float64_t, ndim=1] scores = np.empty(k, dtype=np.float64)
    cdef cnp.ndarray[cnp.intp_t, ndim=1] idx = np.empty(k, dtype=np.intp)
    with nogil:
        _scan(keys, &query[0], k, <double*>scores.data, <Py_ssize_t*>idx.data)
    return idx, scores


def topk_dot_batch(const double[:, ::1] keys, const double[:, ::1] queries, Py_ssize_t k):
    """Row-wise topk_dot for a stack of queries; returns (N, k) arrays."""
    cdef Py_ssize_t m = keys.shape[0]
    cdef Py_ssize_t nq = queries.shape[0]
    cdef Py_ssize_t r
    if m == 0:
        raise ValueError("empty memory")
    if queries.shape[1] != keys.shape[1]:
        raise ValueError(f"query length {queries.shape[1]} != key dim {keys.shape[1]}")
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > m:
        k = m
    cdef cnp.ndarray[cnp.float64_t, ndim=2] scores = np.empty((nq, k), dtype=np.float64)
    cdef cnp.ndarray[cnp.intp_t, ndim=2] idx = np.empty((nq, k), dtype=np.intp)
    cdef double* sp = <double*>scores.data
    cdef Py_ssize_t* ip = <Py_ssize_t*>idx.data
    with nogil:
        for r in range(nq):
            _scan(keys, &queries[r, 0], k, sp + r * k, ip + r * k)
    return idx, scores
