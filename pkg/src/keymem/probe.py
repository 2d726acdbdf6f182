"""Activation-weighted probe queries over a token window.

Tokens that sit far from the window mean get more weight.  Distance is one
of: plain Euclidean, per-dimension variance scaled (diagonal Mahalanobis),
or full-covariance Mahalanobis with a ridge.  Window statistics and weights
are constants for the backward pass; only the weighted sum is differentiated.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .numerics import ShapeError

KINDS = ("mean", "euclidean", "mahalanobis-diag", "mahalanobis-full")


@dataclass(frozen=True)
class ProbeStrategy:
    kind: str = "mahalanobis-diag"
    variance_floor: float = 1e-8
    weight_floor: float = 1e-12
    # None -> max(1e-3 * trace(cov) / D, variance_floor)
    ridge: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown probe strategy {self.kind!r}; expected one of {KINDS}")
        if self.variance_floor <= 0 or self.weight_floor <= 0:
            raise ValueError("floors must be positive")
        if self.ridge is not None and self.ridge < 0:
            raise ValueError("ridge must be >= 0")


@dataclass
class Window:
    vectors: np.ndarray  # (L, D)
    valid_mask: np.ndarray  # (L,)

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.valid_mask is None:
            self.valid_mask = np.ones(self.vectors.shape[0])
        self.valid_mask = np.asarray(self.valid_mask, dtype=np.float64)
        if self.vectors.ndim != 2 or self.valid_mask.shape != (self.vectors.shape[0],):
            raise ShapeError(f"window {self.vectors.shape} with mask {self.valid_mask.shape}")
        if self.vectors.shape[0] < 1 or self.valid_mask.sum() < 1:
            raise ValueError("window needs at least one valid position")


@dataclass
class ProbeQuery:
    vector: np.ndarray  # (D,)
    weights: np.ndarray  # (L,)
    scores: np.ndarray  # (L,)


def _stats(V, M):
    """Masked mean, centred rows and valid counts for a (N, L, D) stack."""
    cnt = M.sum(axis=1)
    mean = (V * M[..., None]).sum(axis=1) / cnt[:, None]
    dev = (V - mean[:, None, :]) * M[..., None]
    return mean, dev, cnt


def window_means(V, M) -> np.ndarray:
    return _stats(V, M)[0]


def scores_batch(V, M, strategy: ProbeStrategy) -> np.ndarray:
    """Per-token deviation scores for a stack of windows, shape (N, L)."""
    kind = strategy.kind
    if kind == "mean":
        raise ValueError("mean strategy has no activation scores")
    _, dev, cnt = _stats(V, M)
    if kind == "euclidean":
        return np.sqrt((dev * dev).sum(axis=-1))
    denom = np.maximum(cnt - 1, 1)[:, None]
    if kind == "mahalanobis-diag":
        var = (dev * dev).sum(axis=1) / denom
        var = np.maximum(var, strategy.variance_floor)
        phi = np.sqrt((dev * dev / var[:, None, :]).sum(axis=-1))
    else:
        phi = np.empty(M.shape)
        D = V.shape[-1]
        for i in range(V.shape[0]):
            if cnt[i] < 2 or not np.any(dev[i]):
                phi[i] = 0.0
                continue
            cov = dev[i].T @ dev[i] / denom[i, 0]
            lam = strategy.ridge
            if lam is None:
                # floored like the diagonal variances so underflowing spreads stay SPD
                lam = max(1e-3 * np.trace(cov) / D, strategy.variance_floor)
            if cnt[i] <= D and lam <= 0:
                raise ValueError("full covariance is singular for L <= D; set ridge > 0")
            a = cov + lam * np.eye(D)
            fac = scipy.linalg.cho_factor(a, lower=True)
            sol = scipy.linalg.cho_solve(fac, dev[i].T)
            phi[i] = np.sqrt(np.maximum((dev[i].T * sol).sum(axis=0), 0.0))
    # a single valid token carries no spread information
    phi = np.where(cnt[:, None] > 1, phi, 0.0)
    return phi * M


def probe_batch(V, M, strategy: ProbeStrategy):
    """Vectorized build_probe: returns (Q (N, D), alpha (N, L), phi (N, L))."""
    V = np.asarray(V, dtype=np.float64)
    M = np.asarray(M, dtype=np.float64)
    uniform = M / M.sum(axis=1, keepdims=True)
    if strategy.kind == "mean":
        phi = np.zeros_like(M)
        alpha = uniform
    else:
        phi = scores_batch(V, M, strategy)
        tot = phi.sum(axis=1, keepdims=True)
        ok = tot >= strategy.weight_floor
        alpha = np.where(ok, phi / np.where(ok, tot, 1.0), uniform)
    Q = np.einsum("nl,nld->nd", alpha, V)
    return Q, alpha, phi


def window_mean(w: Window) -> np.ndarray:
    return window_means(w.vectors[None], w.valid_mask[None])[0]


def activation_scores(w: Window, strategy: ProbeStrategy) -> np.ndarray:
    return scores_batch(w.vectors[None], w.valid_mask[None], strategy)[0]


def build_probe(w: Window, strategy: ProbeStrategy) -> ProbeQuery:
    Q, alpha, phi = probe_batch(w.vectors[None], w.valid_mask[None], strategy)
    return ProbeQuery(Q[0], alpha[0], phi[0])


def probe_backward(alpha, dQ) -> np.ndarray:
    """Gradient w.r.t. the window rows with the weights held fixed."""
    return np.asarray(alpha)[..., :, None] * np.asarray(dQ)[..., None, :]
