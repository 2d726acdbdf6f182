"""Stage driver: data -> document infusion -> graph infusion -> memories -> classifier.

Every stage reads and writes plain files so the CLI can run them one at a
time; ``run`` chains them in memory for the acceptance and ablation runs.
"""
from __future__ import annotations

import copy
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import metrics as M
from .classifier import HeadParams, Pipeline, PipelineConfig, TrainConfig, evaluate_split, n_probe_for, train
from .encoder import Encoder, EncoderConfig
from .knowledge import InfusionConfig, tensor_checksum, train_document_memory, train_graph_memory
from .memory import KeyValueMemory, LoraAdapter, extract_document_memory, extract_graph_memory
from .rerank import CrossAttnParams
from .synthdata import Dataset, GeneratorConfig, Vocabulary, generate, read_dataset

log = logging.getLogger(__name__)

SECTIONS = ("generator", "encoder", "infusion", "pipeline", "train")


@dataclass
class ExperimentConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    encoder: EncoderConfig = field(default_factory=lambda: EncoderConfig(
        d_model=64, n_layers=2, n_heads=4, d_ff=256, max_seq_len=64, dropout_rate=0.1))
    infusion: InfusionConfig = field(default_factory=InfusionConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    doc_epochs: int = 8
    graph_epochs: int = 60

    def to_dict(self) -> dict:
        out = {s: getattr(self, s).to_dict() for s in SECTIONS}
        out["doc_epochs"], out["graph_epochs"] = self.doc_epochs, self.graph_epochs
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        base = cls()
        kinds = {"generator": GeneratorConfig, "encoder": EncoderConfig, "infusion": InfusionConfig,
                 "pipeline": PipelineConfig, "train": TrainConfig}
        unknown = set(d) - set(SECTIONS) - {"doc_epochs", "graph_epochs"}
        if unknown:
            raise ValueError(f"unknown config sections {sorted(unknown)}")
        kw = {}
        for s, kind in kinds.items():
            merged = getattr(base, s).to_dict()
            extra = set(d.get(s, {})) - set(merged)
            if extra:
                raise ValueError(f"unknown keys in [{s}]: {sorted(extra)}")
            merged.update(d.get(s, {}))
            kw[s] = kind(**merged)
        return cls(**kw, doc_epochs=int(d.get("doc_epochs", base.doc_epochs)),
                   graph_epochs=int(d.get("graph_epochs", base.graph_epochs)))

    def with_overrides(self, overrides) -> "ExperimentConfig":
        """Apply ``section.key=value`` strings; values are parsed as JSON when possible."""
        d = self.to_dict()
        for item in overrides:
            key, sep, raw = item.partition("=")
            if not sep:
                raise ValueError(f"override {item!r} is not key=value")
            try:
                val = json.loads(raw)
            except json.JSONDecodeError:
                val = raw
            parts = key.split(".")
            if len(parts) == 1:
                d[parts[0]] = val
            elif len(parts) == 2 and parts[0] in SECTIONS:
                d[parts[0]][parts[1]] = val
            else:
                raise ValueError(f"bad override key {key!r}")
        return ExperimentConfig.from_dict(d)

    def hash(self) -> str:
        return ckpt.config_hash(self.to_dict())


def load_config(path=None, overrides=()) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if path:
        cfg = ExperimentConfig.from_dict(json.loads(Path(path).read_text()))
    return cfg.with_overrides(overrides) if overrides else cfg


def encoder_config_for(cfg: ExperimentConfig, vocab: Vocabulary) -> EncoderConfig:
    e = copy.deepcopy(cfg.encoder)
    e.vocab_size = len(vocab)
    need = cfg.generator.max_tokens + cfg.pipeline.chunk_len
    e.max_seq_len = max(e.max_seq_len, need)
    return e


def pipeline_config_for(cfg: ExperimentConfig) -> PipelineConfig:
    p = copy.deepcopy(cfg.pipeline)
    p.n_probe_max = n_probe_for(cfg.generator.max_tokens, p.chunk_len)
    return p


# -- stages -----------------------------------------------------------------

def infuse_document(cfg: ExperimentConfig, ds: Dataset):
    base = Encoder.init(encoder_config_for(cfg, ds.vocab), cfg.infusion.seed)
    return train_document_memory(base, ds.corpus, ds.vocab, cfg.infusion, epochs=cfg.doc_epochs)


def infuse_graph(cfg: ExperimentConfig, ds: Dataset, doc_encoder: Encoder):
    return train_graph_memory(doc_encoder, ds.triples, ds.vocab, cfg.infusion, epochs=cfg.graph_epochs)


def memory_layer(cfg: ExperimentConfig, encoder: Encoder) -> int:
    layer = cfg.pipeline.layer
    n = encoder.config.n_layers
    if not -n <= layer < n:
        raise ValueError(f"layer {layer} out of range for a {n}-layer encoder")
    return layer % n


def extract_memories(doc_encoder: Encoder, graph_encoder: Encoder, layer: int) -> dict[str, KeyValueMemory]:
    return {"doc": extract_document_memory(doc_encoder.ffn_layer(layer), layer),
            "graph": extract_graph_memory(graph_encoder.adapters[layer], layer)}


def backbone(doc_encoder: Encoder) -> Encoder:
    """The classifier encodes records with the document-adapted weights, adapters removed."""
    enc = doc_encoder.copy()
    enc.adapters.clear()
    return enc


def fit(cfg: ExperimentConfig, ds: Dataset, doc_encoder: Encoder, memories, seed=None, log_path=None):
    seed = cfg.train.seed if seed is None else seed
    pl = Pipeline.build(pipeline_config_for(cfg), backbone(doc_encoder), memories, seed,
                        pad_id=ds.vocab.pad_id)
    tc = copy.deepcopy(cfg.train)
    tc.seed = seed
    history = train(pl, ds.records, ds.vocab, tc, log_path=log_path)
    return pl, history


@dataclass
class RunResult:
    variant: str
    seed: int
    test: M.MetricsReport
    history: list
    seconds: float


def run(cfg: ExperimentConfig, variants=("k2k",), seeds=None, ds: Dataset | None = None,
        encoders=None, probe_overrides=None) -> tuple[list[RunResult], dict]:
    """Generate, infuse once, then train each (variant, seed) and score the test split.

    ``probe_overrides`` maps extra run names to a probe strategy, trained as k2k.
    """
    t0 = time.perf_counter()
    ds = ds or generate(cfg.generator)
    if encoders is None:
        doc, doc_log = infuse_document(cfg, ds)
        graph, graph_log = infuse_graph(cfg, ds, doc)
    else:
        doc, graph = encoders
        doc_log = graph_log = {}
    layer = memory_layer(cfg, doc)
    mems = extract_memories(doc, graph, layer)
    timing = {"infusion_seconds": time.perf_counter() - t0}
    runs = [(v, cfg.pipeline.probe, v) for v in variants]
    runs += [(name, probe, "k2k") for name, probe in (probe_overrides or {}).items()]
    results = []
    for seed in seeds or (cfg.train.seed,):
        for name, probe, variant in runs:
            c = copy.deepcopy(cfg)
            c.pipeline.variant, c.pipeline.probe = variant, probe
            t1 = time.perf_counter()
            pl, hist = fit(c, ds, doc, mems, seed=seed)
            rep = evaluate_split(pl, ds.records, ds.vocab, "test")
            results.append(RunResult(name, seed, rep, hist, time.perf_counter() - t1))
            log.info("%s seed %d test auroc %.4f", name, seed, rep.auroc)
    timing["total_seconds"] = time.perf_counter() - t0
    timing["doc_log"], timing["graph_log"] = doc_log, graph_log
    return results, timing


# -- checkpoints ----------------------------------------------------------------

def save_encoder(path, encoder: Encoder, cfg: ExperimentConfig, meta=None):
    tensors = {"encoder." + k: v for k, v in encoder.all_tensors().items()}
    meta = dict(meta or {}, encoder_config=encoder.config.to_dict())
    return ckpt.save(path, tensors, cfg.to_dict(), seeds={"infusion": cfg.infusion.seed}, meta=meta)


def encoder_from_tensors(tensors: dict, enc_cfg: EncoderConfig, prefix="encoder.") -> Encoder:
    params, lora = {}, {}
    for k, v in tensors.items():
        if not k.startswith(prefix):
            continue
        k = k[len(prefix):]
        if ".lora." in k:
            _, l, _, name = k.split(".")
            lora.setdefault(int(l), {})[name] = v
        else:
            params[k] = v
    adapters = {l: LoraAdapter(**parts) for l, parts in sorted(lora.items())}
    return Encoder(enc_cfg, params, adapters)


def load_encoder(path) -> tuple[Encoder, dict]:
    tensors, manifest = ckpt.load(path)
    enc_cfg = EncoderConfig(**manifest["meta"]["encoder_config"])
    return encoder_from_tensors(tensors, enc_cfg), manifest


def save_memory(path, mem: KeyValueMemory, cfg: ExperimentConfig, source: str, meta=None):
    return ckpt.save(path, {"keys": mem.keys, "values": mem.values}, cfg.to_dict(),
                     meta=dict(meta or {}, source=source, layer=mem.layer_index))


def load_memory(path) -> KeyValueMemory:
    tensors, manifest = ckpt.load(path)
    m = manifest["meta"]
    return KeyValueMemory(tensors["keys"], tensors["values"], m["source"], int(m["layer"]))


def save_pipeline(path, pl: Pipeline, cfg: ExperimentConfig, meta=None):
    meta = dict(meta or {}, encoder_config=pl.encoder.config.to_dict(),
                pipeline_config=pl.config.to_dict(), pad_id=pl.pad_id,
                memory_layers={s: m.layer_index for s, m in pl.memories.items()})
    return ckpt.save(path, pl.state(), cfg.to_dict(), seeds={"train": cfg.train.seed}, meta=meta)


def load_pipeline(path) -> tuple[Pipeline, dict]:
    tensors, manifest = ckpt.load(path)
    m = manifest["meta"]
    enc = encoder_from_tensors(tensors, EncoderConfig(**m["encoder_config"]))
    pc = PipelineConfig(**m["pipeline_config"])
    mems = {s: KeyValueMemory(tensors[f"memory.{s}.keys"], tensors[f"memory.{s}.values"], s, int(l))
            for s, l in m["memory_layers"].items()}
    d = enc.config.d_model
    head = HeadParams(tensors["head.w1"], tensors["head.b1"], tensors["head.w2"], tensors["head.b2"])
    ca = {s: CrossAttnParams(tensors[f"ca.{s}.wq"], tensors[f"ca.{s}.wk"], tensors[f"ca.{s}.wv"],
                             pc.ca_heads, pc.ca_dropout) for s in ("doc", "graph")}
    if head.input_dim != d + 2 * d * pc.n_probe_max:
        raise ckpt.CheckpointError(f"{path}: head width does not match the stored pipeline config")
    return Pipeline(pc, enc, head, ca, mems, int(m["pad_id"])), manifest


def load_data(path) -> Dataset:
    return read_dataset(path)


def data_checksum(path) -> str:
    return json.loads((Path(path) / "meta.json").read_text())["checksum"]


def memory_checksums(mems) -> dict:
    return {s: tensor_checksum({"k": m.keys, "v": m.values}) for s, m in mems.items()}


def summarize(results: list[RunResult]) -> dict[str, float]:
    """Median test AUROC per run name."""
    by = {}
    for r in results:
        by.setdefault(r.variant, []).append(r.test.auroc)
    return {k: float(np.median(v)) for k, v in by.items()}
