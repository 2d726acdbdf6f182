"""Latency measurement: top-k scaling in memory size, and a per-stage pipeline breakdown.

Timings are wall-clock medians over repeated batches, each batch long enough
for the timer to resolve; per-call time is batch time over inner repetitions.
"""
from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import kernels
from .classifier import Pipeline, feature_dim
from .probe import probe_batch
from .rerank import cross_attend_batch, pool
from .retrieval import top_k_batch

REPEATS = 31
MIN_BATCH_NS = 200_000
STAGES = ("encode", "probe", "retrieve", "rerank", "head")


def measure(fn, repeats: int = REPEATS, warmup: int = 3, min_batch_ns: int = MIN_BATCH_NS) -> float:
    """Median ns per call of ``fn()``."""
    for _ in range(warmup):
        fn()
    inner = 1
    while True:
        t0 = time.perf_counter_ns()
        for _ in range(inner):
            fn()
        dt = time.perf_counter_ns() - t0
        if dt >= min_batch_ns or inner >= 1 << 20:
            break
        inner *= 2
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter_ns()
        for _ in range(inner):
            fn()
        samples.append((time.perf_counter_ns() - t0) / inner)
    return float(np.median(samples))


def linear_r2(x, y) -> float:
    x, y = np.asarray(x, float), np.asarray(y, float)
    A = np.column_stack([x, np.ones_like(x)])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    ss_res = float(((y - A @ coef) ** 2).sum())
    ss_tot = float(((y - y.mean()) ** 2).sum())
    return 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0


@dataclass
class RetrievalBench:
    backend: str
    d: int
    k: int
    sizes: list
    ns_per_query: list
    r2: float

    def to_dict(self):
        return asdict(self)


def bench_retrieval(d: int = 64, k: int = 8, sizes=(1024, 4096, 16384, 65536), backend=None,
                    seed: int = 0, repeats: int = REPEATS) -> RetrievalBench:
    sizes = [int(m) for m in sizes]
    if len(sizes) < 4 or sizes != sorted(sizes) or len(set(sizes)) != len(sizes):
        raise ValueError("need at least 4 strictly ascending sizes")
    backend = backend or kernels.BACKEND
    rng = np.random.default_rng(seed)
    keys_all = rng.normal(size=(sizes[-1], d))
    q = rng.normal(size=d)
    out = []
    for m in sizes:
        keys = np.ascontiguousarray(keys_all[:m])
        out.append(measure(lambda: kernels.topk_dot(keys, q, k, backend=backend), repeats=repeats))
    return RetrievalBench(backend, d, k, sizes, out, linear_r2(sizes, out))


def compare_backends(d=64, k=8, sizes=(1024, 4096, 16384, 65536), repeats=REPEATS) -> list[RetrievalBench]:
    return [bench_retrieval(d, k, sizes, backend=b, repeats=repeats) for b in sorted(kernels.BACKENDS)]


def _stage_fns(pl: Pipeline, tokens, mask):
    """Closures that replay one stage each on cached inputs from the previous stage."""
    cfg = pl.config
    H, _ = pl.encoder.forward(tokens, mask)
    d = H.shape[-1]
    cnt = mask.sum(axis=1)
    fns = {"encode": lambda: pl.encoder.forward(tokens, mask)}
    state = {}
    if cfg.sources:
        owners, slots, idx = pl._windows(cnt.astype(int), mask)

        def probe():
            Vw = H[owners[:, None], idx]
            return probe_batch(Vw, mask[owners[:, None], idx], pl.strategy)[0]

        Q = probe()
        got = {s: top_k_batch(Q, pl.memories[s], cfg.top_k, cfg.similarity) for s in cfg.sources}

        def retrieve():
            for s in cfg.sources:
                top_k_batch(Q, pl.memories[s], cfg.top_k, cfg.similarity)

        def rerank():
            for s in cfg.sources:
                pool(cross_attend_batch(pl.ca[s], Q, got[s][2], got[s][3])[0])

        fns.update(probe=probe, retrieve=retrieve, rerank=rerank)
        state["n_probes"] = len(owners)
    F = np.zeros((H.shape[0], feature_dim(d, cfg.n_probe_max)))

    def head():
        F[:, :d] = (H * mask[..., None]).sum(axis=1) / cnt[:, None]
        return pl.head.forward(F)

    fns["head"] = head
    return fns, state


def bench_pipeline(pl: Pipeline, records, vocab, repeats: int = 11) -> dict:
    """Per-stage median ns for one batch of ``records``; stages a variant skips report 0."""
    tokens, mask, _ = pl.batch(records, vocab)
    fns, state = _stage_fns(pl, tokens, mask)
    stages = {s: (measure(fns[s], repeats=repeats, warmup=1) if s in fns else 0.0) for s in STAGES}
    total = measure(lambda: pl.forward(tokens, mask), repeats=repeats, warmup=1)
    return {
        "variant": pl.config.variant,
        "backend": kernels.BACKEND,
        "batch": len(records),
        "n_probes": state.get("n_probes", 0),
        "stages_ns": stages,
        "stage_sum_ns": float(sum(stages.values())),
        "total_ns": total,
    }


def retrieval_csv(results: list[RetrievalBench]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["backend", "d", "k", "m", "ns_per_query", "r2"])
    for r in results:
        for m, t in zip(r.sizes, r.ns_per_query):
            w.writerow([r.backend, r.d, r.k, m, f"{t:.1f}", f"{r.r2:.6f}"])
    return buf.getvalue()


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"
