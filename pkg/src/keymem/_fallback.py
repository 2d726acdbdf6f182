"""Pure-Python twin of ``_kernels.pyx``.

Same contract and tie-breaking: scores come from one numpy matvec, selection
is a size-k heap over (score, -index) pairs.
"""
from __future__ import annotations

import heapq

import numpy as np


def topk_dot(keys, query, k):
    keys = np.asarray(keys, dtype=np.float64)
    query = np.asarray(query, dtype=np.float64)
    m = keys.shape[0]
    if m == 0:
        raise ValueError("empty memory")
    if query.shape[0] != keys.shape[1]:
        raise ValueError(f"query length {query.shape[0]} != key dim {keys.shape[1]}")
    if k < 1:
        raise ValueError("k must be >= 1")
    k = min(k, m)
    scores = (keys @ query).tolist()
    heap: list[tuple[float, int]] = []
    for i, s in enumerate(scores):
        item = (s, -i)
        if len(heap) < k:
            heapq.heappush(heap, item)
        elif item > heap[0]:
            heapq.heapreplace(heap, item)
    heap.sort(reverse=True)
    idx = np.array([-i for _, i in heap], dtype=np.intp)
    return idx, np.array([s for s, _ in heap], dtype=np.float64)


def topk_dot_batch(keys, queries, k):
    queries = np.asarray(queries, dtype=np.float64)
    if queries.ndim != 2 or queries.shape[1] != np.shape(keys)[1]:
        raise ValueError(f"query shape {queries.shape} does not match keys {np.shape(keys)}")
    out = [topk_dot(keys, q, k) for q in queries]
    kk = min(k, np.shape(keys)[0]) if k >= 1 else k
    if not out:
        return np.empty((0, kk), dtype=np.intp), np.empty((0, kk))
    return np.stack([o[0] for o in out]), np.stack([o[1] for o in out])
