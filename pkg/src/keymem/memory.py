"""Feed-forward layers read as key-value memories.

A layer ``FF(x) = act(x W1 + b1) W2 + b2`` is the same function as
``sum_i act(x . k_i + b1_i) v_i + b2`` with ``k_i`` the i-th column of W1 and
``v_i`` the i-th row of W2.  Keys are stored transposed so each one is a
contiguous row.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .numerics import ACTIVATIONS, ShapeError


class Source(str, Enum):
    DOCUMENT = "doc"
    GRAPH = "graph"


@dataclass
class FfnLayer:
    w1: np.ndarray  # (d, d_ff), keys by column
    b1: np.ndarray  # (d_ff,)
    w2: np.ndarray  # (d_ff, d), values by row
    b2: np.ndarray  # (d,)
    activation: str = "gelu"

    def __post_init__(self):
        self.w1 = np.asarray(self.w1, dtype=np.float64)
        self.w2 = np.asarray(self.w2, dtype=np.float64)
        self.b1 = np.asarray(self.b1, dtype=np.float64)
        self.b2 = np.asarray(self.b2, dtype=np.float64)
        d, d_ff = self.w1.shape
        if self.w2.shape != (d_ff, d) or self.b1.shape != (d_ff,) or self.b2.shape != (d,):
            raise ShapeError(
                f"inconsistent FFN shapes w1={self.w1.shape} b1={self.b1.shape} "
                f"w2={self.w2.shape} b2={self.b2.shape}"
            )
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def d(self) -> int:
        return self.w1.shape[0]

    @property
    def d_ff(self) -> int:
        return self.w1.shape[1]


@dataclass
class LoraAdapter:
    a1: np.ndarray  # (d, r)
    b1: np.ndarray  # (r, d_ff)
    a2: np.ndarray  # (d_ff, r)
    b2: np.ndarray  # (r, d)

    def __post_init__(self):
        for name in ("a1", "b1", "a2", "b2"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        d, r = self.a1.shape
        d_ff = self.b1.shape[1]
        if self.b1.shape != (r, d_ff) or self.a2.shape != (d_ff, r) or self.b2.shape != (r, d):
            raise ShapeError(
                f"inconsistent adapter shapes a1={self.a1.shape} b1={self.b1.shape} "
                f"a2={self.a2.shape} b2={self.b2.shape}"
            )
        if r < 1 or r > min(d, d_ff):
            raise ValueError(f"rank {r} outside [1, min(d, d_ff)={min(d, d_ff)}]")

    @property
    def rank(self) -> int:
        return self.a1.shape[1]

    @classmethod
    def init(cls, d: int, d_ff: int, rank: int, rng: np.random.Generator, scale: float = 0.02):
        """Standard start: random A factors, zero B factors (zero update)."""
        return cls(
            a1=rng.normal(0.0, scale, (d, rank)),
            b1=np.zeros((rank, d_ff)),
            a2=rng.normal(0.0, scale, (d_ff, rank)),
            b2=np.zeros((rank, d)),
        )

    def key_update(self) -> np.ndarray:
        return self.a1 @ self.b1

    def value_update(self) -> np.ndarray:
        return self.a2 @ self.b2


@dataclass(frozen=True)
class KeyValueMemory:
    keys: np.ndarray  # (m, d)
    values: np.ndarray  # (m, d)
    source: Source
    layer_index: int
    _norm_keys: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        keys = np.ascontiguousarray(self.keys, dtype=np.float64)
        values = np.ascontiguousarray(self.values, dtype=np.float64)
        if keys.ndim != 2 or keys.shape != values.shape:
            raise ShapeError(f"keys {keys.shape} and values {values.shape} must match")
        keys.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "keys", keys)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "source", Source(self.source))

    @property
    def size(self) -> int:
        return self.keys.shape[0]

    def unit_keys(self) -> np.ndarray:
        """Row-normalized keys (cached) for cosine retrieval."""
        if "unit" not in self._norm_keys:
            n = np.linalg.norm(self.keys, axis=1, keepdims=True)
            self._norm_keys["unit"] = np.ascontiguousarray(self.keys / np.maximum(n, 1e-12))
        return self._norm_keys["unit"]


def _check_input(layer: FfnLayer, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != layer.d:
        raise ShapeError(f"input length {x.shape[-1]} != layer width {layer.d}")
    return x


def ffn_forward_matrix(layer: FfnLayer, x) -> np.ndarray:
    x = _check_input(layer, x)
    act = ACTIVATIONS[layer.activation][0]
    return act(x @ layer.w1 + layer.b1) @ layer.w2 + layer.b2


def ffn_forward_keyvalue(layer: FfnLayer, x) -> np.ndarray:
    """Explicit sum over (key, value) pairs; slow, meant as the readable form."""
    x = _check_input(layer, x)
    act = ACTIVATIONS[layer.activation][0]
    out = np.array(layer.b2, dtype=np.float64)
    for i in range(layer.d_ff):
        coeff = act(np.dot(x, layer.w1[:, i]) + layer.b1[i])
        out = out + coeff * layer.w2[i]
    return out


def ffn_forward_lora(layer: FfnLayer, adapter: LoraAdapter, x) -> np.ndarray:
    x = _check_input(layer, x)
    if adapter.a1.shape[0] != layer.d or adapter.b1.shape[1] != layer.d_ff:
        raise ShapeError(
            f"adapter for ({adapter.a1.shape[0]}, {adapter.b1.shape[1]}) "
            f"does not fit layer ({layer.d}, {layer.d_ff})"
        )
    act = ACTIVATIONS[layer.activation][0]
    # factored: never materializes A1 B1 or A2 B2
    pre = x @ layer.w1 + (x @ adapter.a1) @ adapter.b1 + layer.b1
    z = act(pre)
    return z @ layer.w2 + (z @ adapter.a2) @ adapter.b2 + layer.b2


def merged_layer(layer: FfnLayer, adapter: LoraAdapter) -> FfnLayer:
    return FfnLayer(
        layer.w1 + adapter.key_update(),
        layer.b1.copy(),
        layer.w2 + adapter.value_update(),
        layer.b2.copy(),
        layer.activation,
    )


def extract_document_memory(layer: FfnLayer, layer_index: int) -> KeyValueMemory:
    return KeyValueMemory(layer.w1.T.copy(), layer.w2.copy(), Source.DOCUMENT, layer_index)


def extract_graph_memory(adapter: LoraAdapter, layer_index: int) -> KeyValueMemory:
    # values are the adapter's own product, kept apart from W2
    return KeyValueMemory(
        adapter.key_update().T.copy(), adapter.value_update(), Source.GRAPH, layer_index
    )
