"""Window planning and top-k key retrieval."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .memory import KeyValueMemory

SIMILARITIES = ("dot", "cosine")


@dataclass(frozen=True)
class WindowPlan:
    seq_len: int
    chunk_len: int
    padded_len: int
    windows: tuple[tuple[int, ...], ...]
    probe_windows: tuple[tuple[int, ...], ...]

    @property
    def n_probe(self) -> int:
        return len(self.probe_windows)

    def valid(self, index: int) -> bool:
        return index < self.seq_len


def plan_windows(seq_len: int, chunk_len: int) -> WindowPlan:
    """Split ``seq_len`` positions into windows of ``chunk_len``.

    The tail is padded up to a whole window (padded positions are invalid).
    Probe window ``w`` is the last position of window ``w`` followed by the
    first ``chunk_len - 1`` positions of window ``w + 1``.
    """
    if chunk_len < 2:
        raise ValueError(f"chunk_len must be >= 2, got {chunk_len}")
    if seq_len < 1:
        raise ValueError("seq_len must be >= 1")
    n_win = -(-seq_len // chunk_len)
    padded = n_win * chunk_len
    windows = tuple(tuple(range(w * chunk_len, (w + 1) * chunk_len)) for w in range(n_win))
    probes = tuple(
        (windows[w][-1],) + windows[w + 1][: chunk_len - 1] for w in range(n_win - 1)
    )
    return WindowPlan(seq_len, chunk_len, padded, windows, probes)


@dataclass
class RetrievalResult:
    indices: np.ndarray
    scores: np.ndarray
    keys: np.ndarray
    values: np.ndarray


def _bank(memory: KeyValueMemory, similarity: str):
    if similarity == "dot":
        return memory.keys
    if similarity == "cosine":
        return memory.unit_keys()
    raise ValueError(f"unknown similarity {similarity!r}; expected one of {SIMILARITIES}")


def _unit(q):
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    return q / np.maximum(n, 1e-12)


def top_k(query, memory: KeyValueMemory, k: int, similarity: str = "dot",
          backend: str | None = None) -> RetrievalResult:
    """The ``k`` keys with the highest similarity, ties to the lower row index."""
    vec = getattr(query, "vector", query)
    vec = np.asarray(vec, dtype=np.float64)
    if memory.size == 0:
        raise ValueError("empty memory")
    if k < 1:
        raise ValueError("k must be >= 1")
    if similarity == "cosine":
        vec = _unit(vec)
    idx, scores = kernels.topk_dot(_bank(memory, similarity), vec, k, backend=backend)
    return RetrievalResult(idx, scores, memory.keys[idx], memory.values[idx])


def top_k_batch(queries, memory: KeyValueMemory, k: int, similarity: str = "dot",
                backend: str | None = None):
    """Batched retrieval: ``(indices (N,k), scores (N,k), keys (N,k,d), values (N,k,d))``."""
    queries = np.asarray(queries, dtype=np.float64)
    if similarity == "cosine":
        queries = _unit(queries)
    idx, scores = kernels.topk_dot_batch(_bank(memory, similarity), queries, k, backend=backend)
    return idx, scores, memory.keys[idx], memory.values[idx]
