"""Dense numerics shared by every other module.

Everything here works on float64 numpy arrays in row-major order.  The
random source is a SplitMix64 generator so that streams are identical on
every platform; bulk draws go through a numpy ``Generator`` seeded from it.
"""
from __future__ import annotations

import math
from typing import Callable

import numpy as np

MASK64 = (1 << 64) - 1
GELU_C = math.sqrt(2.0 / math.pi)


class ShapeError(ValueError):
    """Raised when operand shapes do not conform."""


class SplitMix64:
    """SplitMix64 (Steele, Lea, Flood 2014).

    state += 0x9E3779B97F4A7C15; z = state;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB;
    return z ^ (z >> 31)
    """

    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)

    def uniform(self) -> float:
        # top 53 bits -> [0, 1)
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def randbelow(self, n: int) -> int:
        if n <= 0:
            raise ValueError("n must be positive")
        return self.next_u64() % n


def derive_seed(seed: int, *keys: int | str) -> int:
    """Mix ``seed`` with a path of keys into a new 64-bit seed."""
    state = SplitMix64(seed).next_u64()
    for key in keys:
        if isinstance(key, str):
            key = int.from_bytes(key.encode("utf-8")[:8].ljust(8, b"\0"), "little") ^ len(key)
        state = SplitMix64(state ^ (key & MASK64)).next_u64()
    return state


def make_rng(seed: int, *keys: int | str) -> np.random.Generator:
    """numpy Generator whose PCG64 state is seeded from the SplitMix64 mix."""
    return np.random.Generator(np.random.PCG64(derive_seed(seed, *keys)))


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def softmax(v, scale: float = 1.0, axis: int = -1) -> np.ndarray:
    """Softmax of ``v * scale`` with max subtraction."""
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ValueError("softmax of an empty vector")
    if scale <= 0:
        raise ValueError("scale must be positive")
    z = v * scale
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def relu(x):
    return np.maximum(x, 0.0)


def relu_grad(x):
    return (x > 0).astype(np.float64)


def gelu(x):
    """Tanh approximation of GeLU."""
    # x * x * x: float ** 3 goes through pow() and is far slower
    return 0.5 * x * (1.0 + np.tanh(GELU_C * (x + 0.044715 * (x * x * x))))


def gelu_grad(x):
    x2 = x * x
    u = GELU_C * (x + 0.044715 * (x2 * x))
    t = np.tanh(u)
    du = GELU_C * (1.0 + 3 * 0.044715 * x2)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du


ACTIVATIONS = {"relu": (relu, relu_grad), "gelu": (gelu, gelu_grad)}


def finite_diff_check(
    f: Callable[[np.ndarray], float],
    analytic_grad,
    point,
    step: float = 1e-5,
    coords=None,
) -> float:
    """Max relative error between central differences and ``analytic_grad``.

    ``coords`` optionally restricts the check to a subset of flat indices.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.array(point, dtype=np.float64).ravel()
    g = np.asarray(analytic_grad, dtype=np.float64).ravel()
    if g.shape != x.shape:
        raise ShapeError(f"gradient shape {g.shape} does not match point shape {x.shape}")
    idx = range(x.size) if coords is None else coords
    worst = 0.0
    for i in idx:
        orig = x[i]
        x[i] = orig + step
        fp = f(x.copy())
        x[i] = orig - step
        fm = f(x.copy())
        x[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value at coordinate {i}")
        num = (fp - fm) / (2 * step)
        err = abs(num - g[i]) / max(abs(g[i]), 1e-8)
        worst = max(worst, err)
    return worst
