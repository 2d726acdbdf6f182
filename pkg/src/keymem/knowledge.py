"""Knowledge infusion: document corpus into the base weights, graph triples into LoRA adapters."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from .encoder import Encoder
from .numerics import make_rng
from .optim import AdamW
from .synthdata import PAD, TEMPLATE_WORDS, Triple, Vocabulary

log = logging.getLogger(__name__)

THE, RELATIONSHIP, BETWEEN, AND, IS = TEMPLATE_WORDS


@dataclass
class InfusionConfig:
    epochs: int = 8
    batch_size: int = 32
    lr: float = 3e-3
    adam_epsilon: float = 1e-8
    weight_decay: float = 0.01
    heldout_fraction: float = 0.1
    rank: int = 4
    seed: int = 42

    def to_dict(self):
        return asdict(self)


def linearize(t: Triple) -> list[str]:
    return [THE, RELATIONSHIP, BETWEEN, t.head, AND, t.tail, IS, t.relation]


def parse_linearized(tokens) -> Triple:
    tokens = list(tokens)
    if len(tokens) != 8 or tokens[:3] != [THE, RELATIONSHIP, BETWEEN] or tokens[4] != AND \
            or tokens[6] != IS:
        raise ValueError(f"not a linearized triple: {tokens!r}")
    return Triple(tokens[3], tokens[7], tokens[5])


def pad_batch(seqs, pad_id: int, multiple: int = 1):
    n = max(len(s) for s in seqs)
    n = -(-n // multiple) * multiple
    tokens = np.full((len(seqs), n), pad_id, dtype=np.intp)
    mask = np.zeros((len(seqs), n))
    for i, s in enumerate(seqs):
        tokens[i, : len(s)] = s
        mask[i, : len(s)] = 1.0
    return tokens, mask


def _split_heldout(seqs, fraction, seed):
    order = make_rng(seed, "heldout").permutation(len(seqs))
    n_held = max(1, int(round(fraction * len(seqs)))) if len(seqs) > 1 else 0
    held = [seqs[i] for i in order[:n_held]]
    train = [seqs[i] for i in order[n_held:]]
    return train, held


def perplexity(encoder: Encoder, seqs, pad_id: int, batch_size: int = 64) -> float:
    tot = cnt = 0.0
    for i in range(0, len(seqs), batch_size):
        chunk = [s for s in seqs[i: i + batch_size] if len(s) > 1]
        if not chunk:
            continue
        tokens, mask = pad_batch(chunk, pad_id)
        loss, _ = encoder.lm_loss(tokens, mask, with_grad=False)
        n = float((mask[:, :-1] * mask[:, 1:]).sum())
        tot += loss * n
        cnt += n
    return math.exp(tot / cnt)


def _lm_train(encoder: Encoder, seqs, pad_id, cfg: InfusionConfig, adapters_only: bool, tag: str,
              epochs=None):
    epochs = cfg.epochs if epochs is None else epochs
    opt = AdamW(lr=cfg.lr, eps=cfg.adam_epsilon, weight_decay=cfg.weight_decay)
    rng = make_rng(cfg.seed, tag, "order")
    drop_rng = make_rng(cfg.seed, tag, "dropout")
    history = []
    for epoch in range(epochs):
        order = rng.permutation(len(seqs))
        losses = []
        for i in range(0, len(seqs), cfg.batch_size):
            batch = [seqs[j] for j in order[i: i + cfg.batch_size]]
            tokens, mask = pad_batch(batch, pad_id)
            loss, grads = encoder.lm_loss(tokens, mask, train=True, rng=drop_rng,
                                          adapters_only=adapters_only)
            if adapters_only:
                opt.step(encoder.adapter_tensors(), grads)
            else:
                opt.step(encoder.params, grads)
            losses.append(loss)
        history.append(float(np.mean(losses)))
        log.info("%s epoch %d loss %.4f", tag, epoch, history[-1])
    return history


def train_document_memory(base: Encoder, corpus, vocab: Vocabulary, cfg: InfusionConfig,
                          epochs=None):
    """Next-token training of every base weight on the document corpus.

    Returns ``(encoder, log)``; the input encoder is left untouched.
    """
    if not corpus:
        raise ValueError("empty document corpus")
    seqs = [vocab.encode(d) for d in corpus]
    train, held = _split_heldout(seqs, cfg.heldout_fraction, cfg.seed)
    enc = base.copy()
    before = perplexity(enc, held, vocab.index[PAD])
    history = _lm_train(enc, train, vocab.index[PAD], cfg, False, "document", epochs)
    after = perplexity(enc, held, vocab.index[PAD])
    return enc, {"perplexity_before": before, "perplexity_after": after, "loss": history}


def triple_sequences(triples, vocab: Vocabulary):
    return [vocab.encode(linearize(t)) for t in triples]


def train_graph_memory(doc_encoder: Encoder, triples, vocab: Vocabulary, cfg: InfusionConfig,
                       epochs=None):
    """LoRA adapters on every FFN layer, trained on linearized triples.

    The base weights stay frozen; only adapter tensors move.
    """
    if not triples:
        raise ValueError("no triples to infuse")
    if cfg.rank < 1:
        raise ValueError("rank must be >= 1")
    enc = doc_encoder.copy()
    enc.adapters.clear()
    enc.add_adapters(cfg.rank, cfg.seed)
    seqs = triple_sequences(triples, vocab)
    pad = vocab.index[PAD]
    tokens, mask = pad_batch(seqs, pad)
    initial = enc.lm_loss(tokens, mask, with_grad=False)[0]
    history = _lm_train(enc, seqs, pad, cfg, True, "graph", epochs)
    final = enc.lm_loss(tokens, mask, with_grad=False)[0]
    return enc, {"loss_initial": initial, "loss_final": final, "loss": history}


def tensor_checksum(tensors: dict) -> str:
    import hashlib

    h = hashlib.sha256()
    for k in sorted(tensors):
        h.update(k.encode())
        h.update(np.ascontiguousarray(tensors[k]).tobytes())
    return h.hexdigest()
