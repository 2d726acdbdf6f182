"""End-to-end outcome classifier over encoder states and retrieved memory.

Per record: encode the codes, mean-pool the valid rows, build one probe per
probe window, retrieve top-k rows from the document and graph memories,
cross-attend, L2-pool, concatenate, and classify the concatenation with a
two-layer MLP.  Gradient contracts: probe weights and the top-k selection
are held fixed in the backward pass; memory tensors never move.
"""
from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import metrics as M
from .encoder import Encoder
from .knowledge import pad_batch
from .memory import KeyValueMemory
from .numerics import ShapeError, make_rng
from .optim import AdamW
from .probe import ProbeStrategy, probe_backward, probe_batch
from .rerank import CrossAttnParams, cross_attend_backward, cross_attend_batch, pool, pool_backward
from .retrieval import plan_windows, top_k_batch

log = logging.getLogger(__name__)

VARIANTS = ("k2k", "no-retrieval", "doc-only", "graph-only")
SOURCES = ("doc", "graph")


@dataclass
class PipelineConfig:
    variant: str = "k2k"
    probe: str = "mahalanobis-diag"
    chunk_len: int = 8
    top_k: int = 4
    layer: int = -1
    similarity: str = "dot"
    ca_heads: int = 2
    ca_dropout: float = 0.3
    head_hidden: int = 64
    n_probe_max: int = 4
    finetune_encoder: bool = True
    task: str = "mortality"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        ProbeStrategy(self.probe)
        if self.chunk_len < 2:
            raise ValueError("chunk_len must be >= 2")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")

    @property
    def sources(self) -> tuple[str, ...]:
        return {"k2k": SOURCES, "doc-only": ("doc",), "graph-only": ("graph",),
                "no-retrieval": ()}[self.variant]

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    adam_epsilon: float = 1e-8
    weight_decay: float = 0.01
    batch_size: int = 16
    max_epochs: int = 12
    patience: int = 4
    seed: int = 42

    def __post_init__(self):
        if self.learning_rate <= 0 or self.adam_epsilon <= 0 or self.batch_size < 1:
            raise ValueError("learning rate, epsilon and batch size must be positive")

    def to_dict(self):
        return asdict(self)


@dataclass
class HeadParams:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @classmethod
    def init(cls, input_dim: int, hidden: int, seed: int):
        rng = make_rng(seed, "head")
        # zero output layer: every input maps to p = 0.5 before training
        return cls(rng.normal(0, math.sqrt(2.0 / input_dim), (input_dim, hidden)),
                   np.zeros(hidden), np.zeros((hidden, 2)), np.zeros(2))

    @property
    def input_dim(self) -> int:
        return self.w1.shape[0]

    def tensors(self, prefix="head.") -> dict[str, np.ndarray]:
        return {prefix + k: getattr(self, k) for k in ("w1", "b1", "w2", "b2")}

    def forward(self, F):
        F = np.asarray(F, dtype=np.float64)
        if F.shape[-1] != self.input_dim:
            raise ShapeError(f"feature length {F.shape[-1]} != head input {self.input_dim}")
        a = F @ self.w1 + self.b1
        h = np.maximum(a, 0.0)
        return h @ self.w2 + self.b2, (F, a, h)

    def backward(self, cache, dlogits):
        F, a, h = cache
        g = {"w2": h.T @ dlogits, "b2": dlogits.sum(axis=0)}
        da = (dlogits @ self.w2.T) * (a > 0)
        g["w1"] = F.T @ da
        g["b1"] = da.sum(axis=0)
        return g, da @ self.w1.T


def feature_dim(d: int, n_probe_max: int) -> int:
    return d + n_probe_max * 2 * d


def assemble_features(H, fused, n_probe_max: int, valid_mask=None) -> np.ndarray:
    """[mean of valid rows of H ; fused_1 ; ... ; zeros for absent slots]."""
    H = np.asarray(H, dtype=np.float64)
    d = H.shape[1]
    if len(fused) > n_probe_max:
        raise ValueError(f"{len(fused)} fused vectors exceed n_probe_max={n_probe_max}")
    m = np.ones(H.shape[0]) if valid_mask is None else np.asarray(valid_mask, dtype=np.float64)
    out = np.zeros(feature_dim(d, n_probe_max))
    out[:d] = (H * m[:, None]).sum(axis=0) / m.sum()
    for i, f in enumerate(fused):
        v = np.asarray(getattr(f, "vector", f), dtype=np.float64)
        if v.shape != (2 * d,):
            raise ShapeError(f"fused vector of length {v.shape} != {2 * d}")
        out[d + 2 * d * i: d + 2 * d * (i + 1)] = v
    return out


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    y = np.atleast_1d(np.asarray(labels, dtype=np.intp))
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    per = -logp[np.arange(len(y)), y]
    grad = np.exp(logp)
    grad[np.arange(len(y)), y] -= 1.0
    return float(per.mean()), grad / len(y), per


def loss(head: HeadParams, features, label) -> float:
    logits, _ = head.forward(np.atleast_2d(features))
    return cross_entropy(logits, np.atleast_1d(label))[0]


@dataclass
class Pipeline:
    """Trainable model plus its frozen memories."""

    config: PipelineConfig
    encoder: Encoder
    head: HeadParams
    ca: dict[str, CrossAttnParams]
    memories: dict[str, KeyValueMemory]
    pad_id: int = 0
    strategy: ProbeStrategy = field(init=False)

    def __post_init__(self):
        self.strategy = ProbeStrategy(self.config.probe)
        for s in self.config.sources:
            if s not in self.memories:
                raise ValueError(f"variant {self.config.variant} needs a {s} memory")
            if self.memories[s].keys.shape[1] != self.encoder.config.d_model:
                raise ShapeError("memory key width differs from encoder width")

    @classmethod
    def build(cls, config: PipelineConfig, encoder: Encoder, memories, seed: int, pad_id=0):
        d = encoder.config.d_model
        ca = {s: CrossAttnParams.init(d, config.ca_heads, seed=seed + i, dropout_rate=config.ca_dropout)
              for i, s in enumerate(SOURCES)}
        head = HeadParams.init(feature_dim(d, config.n_probe_max), config.head_hidden, seed)
        return cls(config, encoder.copy(), head, ca, dict(memories), pad_id)

    # -- parameters -------------------------------------------------------

    def trainable(self) -> dict[str, np.ndarray]:
        p = dict(self.head.tensors())
        for s in self.config.sources:
            p.update(self.ca[s].tensors(f"ca.{s}."))
        if self.config.finetune_encoder:
            p.update({"encoder." + k: v for k, v in self.encoder.params.items()})
        return p

    def state(self) -> dict[str, np.ndarray]:
        out = dict(self.head.tensors())
        for s in SOURCES:
            out.update(self.ca[s].tensors(f"ca.{s}."))
        out.update({"encoder." + k: v for k, v in self.encoder.params.items()})
        for s, mem in self.memories.items():
            out[f"memory.{s}.keys"] = mem.keys
            out[f"memory.{s}.values"] = mem.values
        return out

    def snapshot(self):
        return {k: v.copy() for k, v in self.state().items() if not k.startswith("memory.")}

    def restore(self, snap):
        for k, v in self.state().items():
            if k in snap:
                v[...] = snap[k]

    # -- forward / backward -----------------------------------------------

    def _windows(self, lengths, mask):
        """Gather probe windows: returns (owner rows, slots, index arrays)."""
        L = self.config.chunk_len
        owners, slots, idx = [], [], []
        for b, n in enumerate(lengths):
            plan = plan_windows(int(n), L)
            for slot, pw in enumerate(plan.probe_windows[: self.config.n_probe_max]):
                owners.append(b)
                slots.append(slot)
                idx.append(pw)
        return np.array(owners, dtype=np.intp), np.array(slots, dtype=np.intp), \
            np.array(idx, dtype=np.intp).reshape(len(idx), L)

    def forward(self, tokens, mask, train=False, rng=None, routing=None):
        """Logits for a padded batch plus a cache for ``backward``.

        ``routing`` (from a previous cache) pins probe weights and retrieved
        indices, which is what the backward pass treats as constant.
        """
        cfg = self.config
        H, enc_cache = self.encoder.forward(tokens, mask, train=train and cfg.finetune_encoder,
                                            rng=rng)
        B, n, d = H.shape
        cnt = mask.sum(axis=1)
        F = np.zeros((B, feature_dim(d, cfg.n_probe_max)))
        F[:, :d] = (H * mask[..., None]).sum(axis=1) / cnt[:, None]
        cache = {"H": H, "enc": enc_cache, "mask": mask, "src": {}}
        new_routing = {}
        if cfg.sources:
            owners, slots, idx = self._windows(cnt.astype(int), mask)
            cache.update(owners=owners, slots=slots, idx=idx)
            if len(owners):
                Vw = H[owners[:, None], idx]
                Mw = mask[owners[:, None], idx]
                if routing is None:
                    Q, alpha, _ = probe_batch(Vw, Mw, self.strategy)
                else:
                    alpha = routing["alpha"]
                    Q = np.einsum("nl,nld->nd", alpha, Vw)
                new_routing["alpha"] = alpha
                cache["alpha"] = alpha
                for s_i, s in enumerate(cfg.sources):
                    mem = self.memories[s]
                    if routing is None:
                        ridx, _, Kr, Vr = top_k_batch(Q, mem, cfg.top_k, cfg.similarity)
                    else:
                        ridx = routing[s]
                        Kr, Vr = mem.keys[ridx], mem.values[ridx]
                    new_routing[s] = ridx
                    out, ca_cache = cross_attend_batch(self.ca[s], Q, Kr, Vr, train=train, rng=rng)
                    pooled = pool(out)
                    off = d + slots * 2 * d + (0 if s == "doc" else d)
                    cols = off[:, None] + np.arange(d)
                    F[owners[:, None], cols] = pooled
                    cache["src"][s] = (out, ca_cache, cols)
        logits, head_cache = self.head.forward(F)
        cache.update(F=F, head=head_cache, routing=new_routing)
        return logits, cache

    def backward(self, cache, dlogits) -> dict[str, np.ndarray]:
        cfg = self.config
        hg, dF = self.head.backward(cache["head"], dlogits)
        grads = {"head." + k: v for k, v in hg.items()}
        H, mask = cache["H"], cache["mask"]
        B, n, d = H.shape
        cnt = mask.sum(axis=1)
        dH = mask[..., None] * (dF[:, :d] / cnt[:, None])[:, None, :]
        if cache["src"]:
            owners, idx = cache["owners"], cache["idx"]
            dQ = np.zeros((len(owners), d))
            for s, (out, ca_cache, cols) in cache["src"].items():
                dpool = dF[owners[:, None], cols]
                dout = pool_backward(out, dpool)
                g, dq = cross_attend_backward(self.ca[s], ca_cache, dout)
                for k, v in g.items():
                    grads[f"ca.{s}.{k}"] = v
                dQ += dq
            dVw = probe_backward(cache["alpha"], dQ)
            np.add.at(dH, (owners[:, None], idx), dVw)
        if cfg.finetune_encoder:
            eg = self.encoder.backward(cache["enc"], dH)
            grads["encoder.input_embeddings"] = eg.pop("input_embeddings")
            grads.update({"encoder." + k: v for k, v in eg.items()})
        grads["H"] = dH
        return grads

    def batch(self, records, vocab):
        seqs = [vocab.encode(r.tokens()) for r in records]
        tokens, mask = pad_batch(seqs, self.pad_id, multiple=self.config.chunk_len)
        if tokens.shape[1] > self.encoder.config.max_seq_len:
            raise ValueError(f"padded record length {tokens.shape[1]} exceeds encoder max_seq_len")
        labels = np.array([r.label(self.config.task) for r in records], dtype=np.intp)
        return tokens, mask, labels

    def predict_proba(self, records, vocab, batch_size: int = 128) -> np.ndarray:
        out = []
        for i in range(0, len(records), batch_size):
            tokens, mask, _ = self.batch(records[i: i + batch_size], vocab)
            logits, _ = self.forward(tokens, mask, train=False)
            z = logits - logits.max(axis=1, keepdims=True)
            p = np.exp(z)
            out.append(p[:, 1] / p.sum(axis=1))
        return np.concatenate(out) if out else np.zeros(0)

    def predict(self, record, vocab) -> float:
        return float(self.predict_proba([record], vocab)[0])


def n_probe_for(max_tokens: int, chunk_len: int) -> int:
    return max(0, -(-max_tokens // chunk_len) - 1)


def train(pipeline: Pipeline, records, vocab, cfg: TrainConfig, log_path=None):
    """Fit ``pipeline`` in place; returns the training log (one dict per epoch).

    The parameters restored at the end are those of the best dev-AUROC epoch.
    """
    tr = [r for r in records if r.split == "train"]
    dev = [r for r in records if r.split == "dev"]
    if not tr or not dev:
        raise ValueError(f"empty split: {len(tr)} train / {len(dev)} dev records")
    task = pipeline.config.task
    ytr = {r.label(task) for r in tr}
    if len(ytr) < 2:
        raise ValueError(f"training labels for {task} contain a single class {ytr}")
    ids = {s: {r.patient_id for r in records if r.split == s} for s in ("train", "dev", "test")}
    if ids["train"] & ids["dev"] or ids["train"] & ids["test"] or ids["dev"] & ids["test"]:
        raise ValueError("a patient id spans more than one split")

    opt = AdamW(lr=cfg.learning_rate, eps=cfg.adam_epsilon, weight_decay=cfg.weight_decay)
    order_rng = make_rng(cfg.seed, "train-order")
    drop_rng = make_rng(cfg.seed, "train-dropout")
    ydev = np.array([r.label(task) for r in dev])
    best, best_auc, stale = None, -1.0, 0
    history = []
    fh = open(log_path, "w") if log_path else None
    try:
        for epoch in range(cfg.max_epochs):
            order = order_rng.permutation(len(tr))
            losses = []
            for i in range(0, len(tr), cfg.batch_size):
                batch = [tr[j] for j in order[i: i + cfg.batch_size]]
                tokens, mask, y = pipeline.batch(batch, vocab)
                logits, cache = pipeline.forward(tokens, mask, train=True, rng=drop_rng)
                l, dlogits, _ = cross_entropy(logits, y)
                grads = pipeline.backward(cache, dlogits)
                # batches too short for a probe window leave cross-attention without gradients
                opt.step(pipeline.trainable(), grads)
                losses.append(l)
            pdev = pipeline.predict_proba(dev, vocab)
            rep = M.evaluate(pdev, ydev) if 0 < ydev.sum() < len(ydev) else None
            auc = rep.auroc if rep else float("nan")
            entry = {"epoch": epoch, "train_loss": float(np.mean(losses)),
                     "dev_auroc": auc, "dev_auprc": rep.auprc if rep else float("nan")}
            history.append(entry)
            if fh:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
            log.info("epoch %d loss %.4f dev auroc %.4f", epoch, entry["train_loss"], auc)
            if auc > best_auc:
                best_auc, best, stale = auc, pipeline.snapshot(), 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    break
    finally:
        if fh:
            fh.close()
    if best is not None:
        pipeline.restore(best)
    return history


def evaluate_split(pipeline: Pipeline, records, vocab, split: str, threshold_from="dev"):
    rows = [r for r in records if r.split == split]
    y = np.array([r.label(pipeline.config.task) for r in rows])
    p = pipeline.predict_proba(rows, vocab)
    tuned = None
    if threshold_from:
        ref = [r for r in records if r.split == threshold_from]
        yr = np.array([r.label(pipeline.config.task) for r in ref])
        if yr.sum() > 0:
            tuned = M.best_threshold(pipeline.predict_proba(ref, vocab), yr)
    return M.evaluate(p, y, tuned_threshold=tuned)


def clone(pipeline: Pipeline) -> Pipeline:
    return copy.deepcopy(pipeline)
