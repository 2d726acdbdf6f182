"""Backend selection for the hot top-k scan.

The compiled extension is used when it imports; set ``KEYMEM_PURE=1`` to
force the pure-Python path.  ``BACKEND`` names the active one.
"""
from __future__ import annotations

import os

import numpy as np

from . import _fallback

try:
    if os.environ.get("KEYMEM_PURE") == "1":
        raise ImportError("pure backend requested")
    from . import _kernels as _compiled
except ImportError:
    _compiled = None

BACKEND = "compiled" if _compiled is not None else "python"
BACKENDS = {"python": _fallback}
if _compiled is not None:
    BACKENDS["compiled"] = _compiled


def _impl(backend):
    if backend is None:
        backend = BACKEND
    try:
        return BACKENDS[backend]
    except KeyError:
        raise ValueError(f"backend {backend!r} unavailable; have {sorted(BACKENDS)}") from None


def topk_dot(keys, query, k, backend=None):
    keys = np.ascontiguousarray(keys, dtype=np.float64)
    query = np.ascontiguousarray(query, dtype=np.float64)
    if keys.ndim != 2 or keys.shape[0] == 0:
        raise ValueError("empty memory")
    return _impl(backend).topk_dot(keys, query, int(k))


def topk_dot_batch(keys, queries, k, backend=None):
    keys = np.ascontiguousarray(keys, dtype=np.float64)
    queries = np.ascontiguousarray(queries, dtype=np.float64)
    if keys.ndim != 2 or keys.shape[0] == 0:
        raise ValueError("empty memory")
    return _impl(backend).topk_dot_batch(keys, queries, int(k))
