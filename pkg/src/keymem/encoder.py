"""A small causal pre-norm transformer with a hand-written backward pass.

Forward and backward are batched over ``(B, n)`` token arrays.  Each FFN
block may carry a LoRA adapter; adapters are kept separate from the base
weights and their gradients are reported under ``layers.<l>.lora.*``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .memory import FfnLayer, LoraAdapter
from .numerics import ACTIVATIONS, ShapeError, make_rng

LN_EPS = 1e-5
NEG_INF = -1e30


@dataclass
class EncoderConfig:
    vocab_size: int = 512
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 256
    max_seq_len: int = 256
    dropout_rate: float = 0.3
    activation: str = "gelu"

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.d_ff < self.d_model:
            raise ValueError("d_ff must be >= d_model")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TokenSequence:
    token_ids: list[int]
    attention_mask: list[int] | None = None

    def __post_init__(self):
        if self.attention_mask is None:
            self.attention_mask = [1] * len(self.token_ids)
        if len(self.attention_mask) != len(self.token_ids):
            raise ShapeError("token_ids and attention_mask differ in length")


def _layer_norm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd)


def _layer_norm_back(dy, g, cache):
    xhat, rstd = cache
    dxhat = dy * g
    dx = rstd * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    red = tuple(range(dy.ndim - 1))
    return dx, (dy * xhat).sum(axis=red), dy.sum(axis=red)


@dataclass
class Encoder:
    config: EncoderConfig
    params: dict[str, np.ndarray]
    adapters: dict[int, LoraAdapter] = field(default_factory=dict)

    @classmethod
    def init(cls, config: EncoderConfig, seed: int, std: float = 0.02) -> "Encoder":
        rng = make_rng(seed, "encoder-init")
        d, f = config.d_model, config.d_ff
        p = {
            "tok_emb": rng.normal(0, std, (config.vocab_size, d)),
            "pos_emb": rng.normal(0, std, (config.max_seq_len, d)),
        }
        for l in range(config.n_layers):
            pre = f"layers.{l}."
            p[pre + "ln1.g"] = np.ones(d)
            p[pre + "ln1.b"] = np.zeros(d)
            for w in ("wq", "wk", "wv"):
                p[pre + "attn." + w] = rng.normal(0, std, (d, d))
            # residual projections scaled down with depth
            p[pre + "attn.wo"] = rng.normal(0, std / math.sqrt(2 * config.n_layers), (d, d))
            p[pre + "ln2.g"] = np.ones(d)
            p[pre + "ln2.b"] = np.zeros(d)
            p[pre + "ffn.w1"] = rng.normal(0, std, (d, f))
            p[pre + "ffn.b1"] = np.zeros(f)
            p[pre + "ffn.w2"] = rng.normal(0, std / math.sqrt(2 * config.n_layers), (f, d))
            p[pre + "ffn.b2"] = np.zeros(d)
        p["lnf.g"] = np.ones(d)
        p["lnf.b"] = np.zeros(d)
        return cls(config, p)

    def copy(self) -> "Encoder":
        return Encoder(
            EncoderConfig(**self.config.to_dict()),
            {k: v.copy() for k, v in self.params.items()},
            {
                l: LoraAdapter(a.a1.copy(), a.b1.copy(), a.a2.copy(), a.b2.copy())
                for l, a in self.adapters.items()
            },
        )

    # -- adapters ---------------------------------------------------------

    def add_adapters(self, rank: int, seed: int, layers=None) -> None:
        c = self.config
        layers = range(c.n_layers) if layers is None else layers
        for l in layers:
            self.adapters[l] = LoraAdapter.init(c.d_model, c.d_ff, rank, make_rng(seed, "lora", l))

    def adapter_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for l, a in self.adapters.items():
            for name in ("a1", "b1", "a2", "b2"):
                out[f"layers.{l}.lora.{name}"] = getattr(a, name)
        return out

    def all_tensors(self) -> dict[str, np.ndarray]:
        return {**self.params, **self.adapter_tensors()}

    def ffn_layer(self, l: int) -> FfnLayer:
        pre = f"layers.{l}.ffn."
        return FfnLayer(
            self.params[pre + "w1"], self.params[pre + "b1"],
            self.params[pre + "w2"], self.params[pre + "b2"], self.config.activation,
        )

    # -- forward ----------------------------------------------------------

    def _check(self, tokens, mask):
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None]
        if mask is None:
            mask = np.ones(tokens.shape)
        mask = np.asarray(mask, dtype=np.float64).reshape(tokens.shape)
        n = tokens.shape[1]
        if n > self.config.max_seq_len:
            raise ValueError(f"sequence length {n} exceeds max_seq_len={self.config.max_seq_len}")
        if n == 0:
            raise ValueError("empty sequence")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.config.vocab_size):
            raise ValueError("token id outside vocabulary")
        return tokens.astype(np.intp), mask

    def forward(self, tokens, mask=None, train: bool = False, rng=None):
        """Return ``(H, cache)`` with ``H`` of shape ``(B, n, d_model)``."""
        tokens, mask = self._check(tokens, mask)
        c, p = self.config, self.params
        B, n = tokens.shape
        d, nh = c.d_model, c.n_heads
        dh = d // nh
        act, _ = ACTIVATIONS[c.activation]
        drop = c.dropout_rate if train else 0.0
        if drop > 0 and rng is None:
            raise ValueError("training with dropout needs an rng")

        allowed = np.tril(np.ones((n, n), dtype=bool))[None, None] & (mask[:, None, None, :] > 0)
        bias = np.where(allowed, 0.0, NEG_INF)

        x = p["tok_emb"][tokens] + p["pos_emb"][:n]
        caches = []
        for l in range(c.n_layers):
            pre = f"layers.{l}."
            lc = {}
            h, lc["ln1"] = _layer_norm(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
            q = (h @ p[pre + "attn.wq"]).reshape(B, n, nh, dh).transpose(0, 2, 1, 3)
            k = (h @ p[pre + "attn.wk"]).reshape(B, n, nh, dh).transpose(0, 2, 1, 3)
            v = (h @ p[pre + "attn.wv"]).reshape(B, n, nh, dh).transpose(0, 2, 1, 3)
            s = q @ k.transpose(0, 1, 3, 2) / math.sqrt(dh) + bias
            s = s - s.max(axis=-1, keepdims=True)
            e = np.exp(s)
            att = e / e.sum(axis=-1, keepdims=True)
            o = (att @ v).transpose(0, 2, 1, 3).reshape(B, n, d)
            a = o @ p[pre + "attn.wo"]
            if drop > 0:
                lc["drop_a"] = (rng.random(a.shape) >= drop) / (1.0 - drop)
                a = a * lc["drop_a"]
            x = x + a
            lc.update(h=h, q=q, k=k, v=v, att=att, o=o)

            h2, lc["ln2"] = _layer_norm(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
            w1, w2 = p[pre + "ffn.w1"], p[pre + "ffn.w2"]
            ad = self.adapters.get(l)
            if ad is not None:
                w1 = w1 + ad.a1 @ ad.b1
                w2 = w2 + ad.a2 @ ad.b2
            u = h2 @ w1 + p[pre + "ffn.b1"]
            z = act(u)
            f = z @ w2 + p[pre + "ffn.b2"]
            if drop > 0:
                lc["drop_f"] = (rng.random(f.shape) >= drop) / (1.0 - drop)
                f = f * lc["drop_f"]
            x = x + f
            lc.update(h2=h2, u=u, z=z, w1=w1, w2=w2)
            caches.append(lc)
        H, lnf = _layer_norm(x, p["lnf.g"], p["lnf.b"])
        cache = {"tokens": tokens, "mask": mask, "layers": caches, "lnf": lnf}
        return H, cache

    def encode(self, seq: TokenSequence) -> np.ndarray:
        H, _ = self.forward(np.asarray(seq.token_ids)[None], np.asarray(seq.attention_mask)[None])
        return H[0]

    # -- backward ---------------------------------------------------------

    def backward(self, cache, dH, adapters_only: bool = False) -> dict[str, np.ndarray]:
        """Gradients of ``sum(dH * H)`` for every parameter (and adapter).

        With ``adapters_only`` the base-weight gradients are skipped where
        they are not needed to propagate further.
        """
        c, p = self.config, self.params
        tokens = cache["tokens"]
        B, n = tokens.shape
        dH = np.asarray(dH, dtype=np.float64)
        if dH.shape != (B, n, c.d_model):
            raise ShapeError(f"upstream gradient {dH.shape} != {(B, n, c.d_model)}")
        d, nh = c.d_model, c.n_heads
        dh = d // nh
        _, act_grad = ACTIVATIONS[c.activation]
        g: dict[str, np.ndarray] = {}

        dx, g["lnf.g"], g["lnf.b"] = _layer_norm_back(dH, p["lnf.g"], cache["lnf"])
        for l in reversed(range(c.n_layers)):
            pre = f"layers.{l}."
            lc = cache["layers"][l]
            # FFN block
            df = dx * lc["drop_f"] if "drop_f" in lc else dx
            z, u, h2 = lc["z"], lc["u"], lc["h2"]
            df2 = df.reshape(-1, d)
            z2 = z.reshape(-1, z.shape[-1])
            h22 = h2.reshape(-1, d)
            dw2e = z2.T @ df2
            g[pre + "ffn.b2"] = df2.sum(axis=0)
            dz = df @ lc["w2"].T
            du = dz * act_grad(u)
            du2 = du.reshape(-1, du.shape[-1])
            dw1e = h22.T @ du2
            g[pre + "ffn.b1"] = du2.sum(axis=0)
            g[pre + "ffn.w1"] = dw1e
            g[pre + "ffn.w2"] = dw2e
            ad = self.adapters.get(l)
            if ad is not None:
                g[pre + "lora.a1"] = dw1e @ ad.b1.T
                g[pre + "lora.b1"] = ad.a1.T @ dw1e
                g[pre + "lora.a2"] = dw2e @ ad.b2.T
                g[pre + "lora.b2"] = ad.a2.T @ dw2e
            dh2 = du @ lc["w1"].T
            dxl, g[pre + "ln2.g"], g[pre + "ln2.b"] = _layer_norm_back(dh2, p[pre + "ln2.g"], lc["ln2"])
            dx = dx + dxl
            # attention block
            da = dx * lc["drop_a"] if "drop_a" in lc else dx
            o = lc["o"]
            g[pre + "attn.wo"] = o.reshape(-1, d).T @ da.reshape(-1, d)
            do = (da @ p[pre + "attn.wo"].T).reshape(B, n, nh, dh).transpose(0, 2, 1, 3)
            att, q, k, v = lc["att"], lc["q"], lc["k"], lc["v"]
            datt = do @ v.transpose(0, 1, 3, 2)
            dv = att.transpose(0, 1, 3, 2) @ do
            ds = att * (datt - (datt * att).sum(axis=-1, keepdims=True)) / math.sqrt(dh)
            dq = ds @ k
            dk = ds.transpose(0, 1, 3, 2) @ q
            merge = lambda t: t.transpose(0, 2, 1, 3).reshape(B * n, d)  # noqa: E731
            dq, dk, dv = merge(dq), merge(dk), merge(dv)
            h = lc["h"].reshape(-1, d)
            g[pre + "attn.wq"] = h.T @ dq
            g[pre + "attn.wk"] = h.T @ dk
            g[pre + "attn.wv"] = h.T @ dv
            dhh = (dq @ p[pre + "attn.wq"].T + dk @ p[pre + "attn.wk"].T
                   + dv @ p[pre + "attn.wv"].T).reshape(B, n, d)
            dxl, g[pre + "ln1.g"], g[pre + "ln1.b"] = _layer_norm_back(dhh, p[pre + "ln1.g"], lc["ln1"])
            dx = dx + dxl
        g["pos_emb"] = np.zeros_like(p["pos_emb"])
        g["pos_emb"][:n] = dx.sum(axis=0)
        dtok = np.zeros_like(p["tok_emb"])
        np.add.at(dtok, tokens.ravel(), dx.reshape(-1, d))
        g["tok_emb"] = dtok
        g["input_embeddings"] = dx
        if adapters_only:
            g = {k: v for k, v in g.items() if ".lora." in k}
        return g

    # -- language modelling ----------------------------------------------

    def lm_loss(self, tokens, mask=None, train=False, rng=None, with_grad=True,
                adapters_only=False):
        """Mean next-token cross-entropy using tied input embeddings."""
        tokens, mask = self._check(tokens, mask)
        H, cache = self.forward(tokens, mask, train=train, rng=rng)
        W = self.params["tok_emb"]
        logits = H[:, :-1] @ W.T
        tgt = tokens[:, 1:]
        valid = mask[:, :-1] * mask[:, 1:]
        count = valid.sum()
        if count == 0:
            raise ValueError("no next-token targets in batch")
        logits = logits - logits.max(axis=-1, keepdims=True)
        logp = logits - np.log(np.exp(logits).sum(axis=-1, keepdims=True))
        nll = -np.take_along_axis(logp, tgt[..., None], axis=-1)[..., 0]
        loss = float((nll * valid).sum() / count)
        if not with_grad:
            return loss, None
        dlogits = np.exp(logp)
        np.put_along_axis(dlogits, tgt[..., None],
                          np.take_along_axis(dlogits, tgt[..., None], axis=-1) - 1.0, axis=-1)
        dlogits *= (valid / count)[..., None]
        dH = np.zeros_like(H)
        dH[:, :-1] = dlogits @ W
        grads = self.backward(cache, dH, adapters_only=adapters_only)
        if not adapters_only:
            grads["tok_emb"] = grads["tok_emb"] + dlogits.reshape(-1, W.shape[0]).T @ H[:, :-1].reshape(-1, W.shape[1])
        return loss, grads
