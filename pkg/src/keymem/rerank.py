"""Cross-attention over retrieved memory rows, pooling and source fusion.

The probe vector is the single query; retrieved keys and values are the
attention keys and values.  Memory rows are constants: gradients reach the
projections and the probe, never the memory tensors.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import ShapeError, make_rng

POOL_EPS = 1e-12


@dataclass
class CrossAttnParams:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    n_heads: int = 1
    dropout_rate: float = 0.0

    def __post_init__(self):
        d = self.wq.shape[0]
        for w in (self.wq, self.wk, self.wv):
            if w.shape != (d, d):
                raise ShapeError(f"projection shape {w.shape} != {(d, d)}")
        if d % self.n_heads:
            raise ValueError(f"d={d} not divisible by n_heads={self.n_heads}")

    @property
    def d(self) -> int:
        return self.wq.shape[0]

    @classmethod
    def init(cls, d: int, n_heads: int, seed: int, dropout_rate: float = 0.0, std=None):
        rng = make_rng(seed, "cross-attn")
        std = 1.0 / math.sqrt(d) if std is None else std
        return cls(*(rng.normal(0, std, (d, d)) for _ in range(3)), n_heads=n_heads,
                   dropout_rate=dropout_rate)

    @classmethod
    def identity(cls, d: int, n_heads: int = 1):
        return cls(np.eye(d), np.eye(d), np.eye(d), n_heads=n_heads)

    def tensors(self, prefix: str) -> dict[str, np.ndarray]:
        return {prefix + "wq": self.wq, prefix + "wk": self.wk, prefix + "wv": self.wv}


@dataclass
class FusedKnowledge:
    doc_part: np.ndarray
    graph_part: np.ndarray

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.doc_part, self.graph_part])


def cross_attend_batch(params: CrossAttnParams, q, K, V, train: bool = False, rng=None):
    """Attention of N queries (N, d) over their own k rows (N, k, d).

    Returns ``(out (N, d), cache)``; ``cache["att"]`` holds the per-head
    weights (N, heads, k) before dropout.
    """
    q = np.asarray(q, dtype=np.float64)
    K = np.asarray(K, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    N, d = q.shape
    if K.ndim != 3 or K.shape[0] != N or K.shape[2] != d or V.shape != K.shape:
        raise ShapeError(f"query {q.shape} vs keys {K.shape} / values {V.shape}")
    k = K.shape[1]
    if k == 0:
        raise ValueError("cross-attention over an empty retrieval")
    h = params.n_heads
    dh = d // h
    qp = (q @ params.wq).reshape(N, h, dh)
    Kp = (K @ params.wk).reshape(N, k, h, dh).transpose(0, 2, 1, 3)
    Vp = (V @ params.wv).reshape(N, k, h, dh).transpose(0, 2, 1, 3)
    s = np.einsum("nhd,nhkd->nhk", qp, Kp) / math.sqrt(dh)
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    att = e / e.sum(axis=-1, keepdims=True)
    drop = None
    att_used = att
    if train and params.dropout_rate > 0:
        if rng is None:
            raise ValueError("training with dropout needs an rng")
        drop = (rng.random(att.shape) >= params.dropout_rate) / (1.0 - params.dropout_rate)
        att_used = att * drop
    out = np.einsum("nhk,nhkd->nhd", att_used, Vp).reshape(N, d)
    cache = dict(q=q, K=K, V=V, qp=qp, Kp=Kp, Vp=Vp, att=att, att_used=att_used, drop=drop)
    return out, cache


def cross_attend_backward(params: CrossAttnParams, cache, dout):
    """Returns ``(grads {"wq","wk","wv"}, d_query)``; memory rows get nothing."""
    q, K, V = cache["q"], cache["K"], cache["V"]
    N, k, d = K.shape
    h = params.n_heads
    dh = d // h
    dout = np.asarray(dout, dtype=np.float64).reshape(N, h, dh)
    qp, Kp, Vp, att = cache["qp"], cache["Kp"], cache["Vp"], cache["att"]
    datt = np.einsum("nhd,nhkd->nhk", dout, Vp)
    dVp = np.einsum("nhk,nhd->nhkd", cache["att_used"], dout)
    if cache["drop"] is not None:
        datt = datt * cache["drop"]
    ds = att * (datt - (datt * att).sum(axis=-1, keepdims=True)) / math.sqrt(dh)
    dqp = np.einsum("nhk,nhkd->nhd", ds, Kp).reshape(N, d)
    dKp = np.einsum("nhk,nhd->nhkd", ds, qp).transpose(0, 2, 1, 3).reshape(N * k, d)
    dVp = dVp.transpose(0, 2, 1, 3).reshape(N * k, d)
    grads = {
        "wq": q.T @ dqp,
        "wk": K.reshape(N * k, d).T @ dKp,
        "wv": V.reshape(N * k, d).T @ dVp,
    }
    return grads, dqp @ params.wq.T


def cross_attend(params: CrossAttnParams, query, retrieved) -> np.ndarray:
    """Single-probe form; ``query`` may be a ProbeQuery or a bare vector."""
    vec = np.asarray(getattr(query, "vector", query), dtype=np.float64)
    keys = np.asarray(retrieved.keys)
    if keys.shape[0] == 0:
        raise ValueError("cross-attention over an empty retrieval")
    out, _ = cross_attend_batch(params, vec[None], keys[None], np.asarray(retrieved.values)[None])
    return out[0]


def attention_weights(params: CrossAttnParams, query, retrieved) -> np.ndarray:
    vec = np.asarray(getattr(query, "vector", query), dtype=np.float64)
    _, cache = cross_attend_batch(params, vec[None], np.asarray(retrieved.keys)[None],
                                  np.asarray(retrieved.values)[None])
    return cache["att"][0]


def pool(v) -> np.ndarray:
    """L2 normalization along the last axis; near-zero rows pass through."""
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return np.where(n < POOL_EPS, v, v / np.where(n < POOL_EPS, 1.0, n))


def pool_backward(v, dy) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    safe = np.where(n < POOL_EPS, 1.0, n)
    y = v / safe
    dv = (dy - y * (y * dy).sum(axis=-1, keepdims=True)) / safe
    return np.where(n < POOL_EPS, dy, dv)


def fuse(doc, graph) -> FusedKnowledge:
    doc = np.asarray(doc, dtype=np.float64)
    graph = np.asarray(graph, dtype=np.float64)
    if doc.shape != graph.shape:
        raise ShapeError(f"doc part {doc.shape} and graph part {graph.shape} differ")
    return FusedKnowledge(pool(doc), pool(graph))
