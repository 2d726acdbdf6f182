"""Synthetic visit-coded patient records with planted pair rules.

Every record carries exactly two codes from the mortality risk pool.  The
mortality label is 1 iff those two codes form one of the planted pairs, so
each risk code on its own is uninformative and only relational knowledge
(which codes pair with which) resolves the label.  Readmission works the
same way on a second pool, gated by a sampled day gap <= the window.

The planted pairs are also emitted as knowledge-graph triples and, as
co-occurrences, inside a document corpus.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .numerics import make_rng

PAD, SEP = "[PAD]", "[SEP]"
TEMPLATE_WORDS = ("The", "relationship", "between", "and", "is")
CO_RISK, INCREASES_RISK = "co_risk", "increases_risk_of"
OUTCOMES = {"mortality": "DEATH", "readmission": "READMISSION"}
GAP_BUCKET = 5
MAX_GAP = 60
SPLITS = ("train", "dev", "test")
TASKS = ("mortality", "readmission")


@dataclass
class GeneratorConfig:
    n_codes: int = 120
    n_patients: int = 2500
    visits_min: int = 2
    visits_max: int = 4
    codes_min: int = 1
    codes_max: int = 3
    n_risk_pairs: int = 6
    risk_prevalence: float = 0.1
    n_readmit_pairs: int = 4
    readmit_pair_rate: float = 0.5
    label_noise: float = 0.05
    readmission_window_days: int = 15
    n_documents: int = 3000
    doc_pair_rate: float = 0.5
    split_fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 42

    def __post_init__(self):
        self.split_fractions = tuple(self.split_fractions)
        if not 0 <= self.label_noise < 0.5:
            raise ValueError("label_noise must lie in [0, 0.5)")
        if self.readmission_window_days <= 0:
            raise ValueError("readmission_window_days must be positive")
        if self.n_risk_pairs < 1 or self.n_readmit_pairs < 1:
            raise ValueError("need at least one planted pair per task")
        needed = 2 * (self.n_risk_pairs + self.n_readmit_pairs) + self.codes_max
        if self.n_codes < needed:
            raise ValueError(
                f"vocabulary of {self.n_codes} codes too small for {self.n_risk_pairs} risk and "
                f"{self.n_readmit_pairs} readmission pairs (need >= {needed})"
            )
        if not (1 <= self.visits_min <= self.visits_max and 1 <= self.codes_min <= self.codes_max):
            raise ValueError("visit/code ranges must be nonempty and positive")
        if not 0 < self.risk_prevalence < 1 or not 0 < self.readmit_pair_rate <= 1:
            raise ValueError("rates must lie in (0, 1)")
        if abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise ValueError("split fractions must sum to 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split_fractions"] = list(self.split_fractions)
        return d

    @property
    def max_tokens(self) -> int:
        """Upper bound on the token length of a record."""
        per_visit = self.codes_max + 4  # background + up to 4 pool codes
        return self.visits_max * per_visit + self.visits_max - 1 + 1


def code_name(i: int) -> str:
    return f"code_{i:03d}"


def gap_token(days: int) -> str:
    return f"gap_{min(MAX_GAP, GAP_BUCKET * math.ceil(days / GAP_BUCKET)):02d}"


class Vocabulary:
    def __init__(self, symbols):
        self.symbols = list(symbols)
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("duplicate vocabulary symbols")
        self.index = {s: i for i, s in enumerate(self.symbols)}

    @classmethod
    def for_config(cls, config: GeneratorConfig) -> "Vocabulary":
        syms = [PAD, SEP, *TEMPLATE_WORDS, CO_RISK, INCREASES_RISK, *OUTCOMES.values()]
        syms += [f"pair_{i:02d}" for i in range(config.n_risk_pairs + config.n_readmit_pairs)]
        syms += [f"gap_{g:02d}" for g in range(GAP_BUCKET, MAX_GAP + 1, GAP_BUCKET)]
        syms += [code_name(i) for i in range(config.n_codes)]
        return cls(syms)

    def __len__(self):
        return len(self.symbols)

    def __contains__(self, sym):
        return sym in self.index

    def encode(self, symbols) -> list[int]:
        try:
            return [self.index[s] for s in symbols]
        except KeyError as exc:
            raise KeyError(f"symbol {exc.args[0]!r} not in vocabulary") from None

    def decode(self, ids) -> list[str]:
        return [self.symbols[i] for i in ids]

    @property
    def pad_id(self) -> int:
        return self.index[PAD]


@dataclass
class Rules:
    risk_pairs: list[tuple[str, str]]
    readmit_pairs: list[tuple[str, str]]
    window_days: int

    def to_dict(self):
        return {"risk_pairs": [list(p) for p in self.risk_pairs],
                "readmit_pairs": [list(p) for p in self.readmit_pairs],
                "window_days": self.window_days}

    @classmethod
    def from_dict(cls, d):
        return cls([tuple(p) for p in d["risk_pairs"]], [tuple(p) for p in d["readmit_pairs"]],
                   int(d["window_days"]))

    def clean_labels(self, visits, gap_days) -> tuple[int, int]:
        codes = {c for v in visits for c in v}
        mort = int(any(a in codes and b in codes for a, b in self.risk_pairs))
        pair = any(a in codes and b in codes for a, b in self.readmit_pairs)
        read = int(pair and gap_days <= self.window_days)
        return mort, read


@dataclass
class SyntheticRecord:
    patient_id: str
    visits: list[list[str]]
    gap_days: int
    mortality_label: int
    readmission_label: int
    split: str = "train"
    provenance: dict = field(default_factory=dict)

    def tokens(self) -> list[str]:
        out = []
        for i, v in enumerate(self.visits):
            if i:
                out.append(SEP)
            out.extend(v)
        out.append(gap_token(self.gap_days))
        return out

    def label(self, task: str) -> int:
        if task not in TASKS:
            raise ValueError(f"unknown task {task!r}")
        return self.mortality_label if task == "mortality" else self.readmission_label

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d) -> "SyntheticRecord":
        return cls(**d)


@dataclass
class Triple:
    head: str
    relation: str
    tail: str

    def __post_init__(self):
        if not (self.head and self.relation and self.tail):
            raise ValueError("triple fields must be nonempty")
        for f in (self.head, self.relation, self.tail):
            if any(ch.isspace() for ch in f):
                raise ValueError(f"triple field {f!r} contains whitespace")


@dataclass
class Dataset:
    config: GeneratorConfig
    vocab: Vocabulary
    rules: Rules
    records: list[SyntheticRecord]
    triples: list[Triple]
    corpus: list[list[str]]

    def split(self, name: str) -> list[SyntheticRecord]:
        return [r for r in self.records if r.split == name]


def _pick_pairs(rng, pool, n):
    pool = list(pool)
    return [(pool[2 * i], pool[2 * i + 1]) for i in range(n)]


def _unmatched_pair(rng, pool_codes, pairs):
    matched = {frozenset(p) for p in pairs}
    while True:
        a, b = rng.choice(len(pool_codes), size=2, replace=False)
        cand = (pool_codes[a], pool_codes[b])
        if frozenset(cand) not in matched:
            return cand


def _visit_skeleton(rng, cfg, background):
    n_visits = int(rng.integers(cfg.visits_min, cfg.visits_max + 1))
    visits = []
    for _ in range(n_visits):
        n = int(rng.integers(cfg.codes_min, cfg.codes_max + 1))
        visits.append([background[i] for i in rng.choice(len(background), size=n, replace=False)])
    return visits


def _insert(rng, visits, code):
    v = visits[int(rng.integers(len(visits)))]
    v.insert(int(rng.integers(len(v) + 1)), code)


def _generate_record(cfg, rules, pools, background, i) -> SyntheticRecord:
    rng = make_rng(cfg.seed, "patient", i)
    visits = _visit_skeleton(rng, cfg, background)
    risk_pool, read_pool = pools
    if rng.random() < cfg.risk_prevalence:
        risk = rules.risk_pairs[int(rng.integers(len(rules.risk_pairs)))]
    else:
        risk = _unmatched_pair(rng, risk_pool, rules.risk_pairs)
    if rng.random() < cfg.readmit_pair_rate:
        read = rules.readmit_pairs[int(rng.integers(len(rules.readmit_pairs)))]
    else:
        read = _unmatched_pair(rng, read_pool, rules.readmit_pairs)
    for code in (*risk, *read):
        _insert(rng, visits, code)
    gap = int(rng.integers(1, MAX_GAP + 1))
    mort, readm = rules.clean_labels(visits, gap)
    flip_m = bool(rng.random() < cfg.label_noise)
    flip_r = bool(rng.random() < cfg.label_noise)
    return SyntheticRecord(
        patient_id=f"P{i:06d}",
        visits=visits,
        gap_days=gap,
        mortality_label=mort ^ int(flip_m),
        readmission_label=readm ^ int(flip_r),
        provenance={
            "risk_codes": list(risk),
            "readmit_codes": list(read),
            "clean_mortality": mort,
            "clean_readmission": readm,
            "flipped_mortality": flip_m,
            "flipped_readmission": flip_r,
        },
    )


def _documents(cfg, rules, background):
    """Code co-occurrence documents; about ``doc_pair_rate`` of them hold a planted pair."""
    rng = make_rng(cfg.seed, "corpus")
    pairs = rules.risk_pairs + rules.readmit_pairs
    pool = sorted({c for p in pairs for c in p})
    docs = []
    for _ in range(cfg.n_documents):
        visits = _visit_skeleton(rng, cfg, background)
        if rng.random() < cfg.doc_pair_rate:
            a, b = pairs[int(rng.integers(len(pairs)))]
            if rng.random() < 0.5:
                a, b = b, a
            v = visits[int(rng.integers(len(visits)))]
            pos = int(rng.integers(len(v) + 1))
            v[pos:pos] = [a, b]
        else:
            _insert(rng, visits, pool[int(rng.integers(len(pool)))])
        doc = []
        for j, v in enumerate(visits):
            if j:
                doc.append(SEP)
            doc.extend(v)
        docs.append(doc)
    return docs


def assign_splits(patient_ids, fractions, seed) -> dict[str, str]:
    ids = sorted(set(patient_ids))
    order = make_rng(seed, "split").permutation(len(ids))
    n_train = int(round(fractions[0] * len(ids)))
    n_dev = int(round(fractions[1] * len(ids)))
    out = {}
    for rank, j in enumerate(order):
        out[ids[j]] = "train" if rank < n_train else "dev" if rank < n_train + n_dev else "test"
    return out


def generate(config: GeneratorConfig) -> Dataset:
    cfg = config
    vocab = Vocabulary.for_config(cfg)
    rng = make_rng(cfg.seed, "rules")
    codes = [code_name(i) for i in rng.permutation(cfg.n_codes)]
    n_r, n_a = 2 * cfg.n_risk_pairs, 2 * cfg.n_readmit_pairs
    risk_pool, read_pool, background = codes[:n_r], codes[n_r:n_r + n_a], codes[n_r + n_a:]
    rules = Rules(_pick_pairs(rng, risk_pool, cfg.n_risk_pairs),
                  _pick_pairs(rng, read_pool, cfg.n_readmit_pairs),
                  cfg.readmission_window_days)
    records = [_generate_record(cfg, rules, (risk_pool, read_pool), background, i)
               for i in range(cfg.n_patients)]
    splits = assign_splits([r.patient_id for r in records], cfg.split_fractions, cfg.seed)
    for r in records:
        r.split = splits[r.patient_id]
    triples = []
    for task, pairs, offset in (("mortality", rules.risk_pairs, 0),
                                ("readmission", rules.readmit_pairs, cfg.n_risk_pairs)):
        for j, (a, b) in enumerate(pairs):
            triples.append(Triple(a, CO_RISK, b))
            triples.append(Triple(f"pair_{offset + j:02d}", INCREASES_RISK, OUTCOMES[task]))
    corpus = _documents(cfg, rules, background)
    check_patient_disjoint(records)
    return Dataset(cfg, vocab, rules, records, triples, corpus)


def check_patient_disjoint(records) -> None:
    seen: dict[str, str] = {}
    for r in records:
        prev = seen.setdefault(r.patient_id, r.split)
        if prev != r.split:
            raise ValueError(f"patient {r.patient_id} appears in splits {prev} and {r.split}")


@dataclass
class LabelReport:
    n: int
    mortality_mismatches: int
    readmission_mismatches: int
    provenance_errors: int

    @property
    def mortality_mismatch_rate(self) -> float:
        return self.mortality_mismatches / self.n

    @property
    def readmission_mismatch_rate(self) -> float:
        return self.readmission_mismatches / self.n


def verify_labels(records, rules: Rules) -> LabelReport:
    """Re-derive every label from visits and the planted rules."""
    mm = rm = bad = 0
    for r in records:
        mort, read = rules.clean_labels(r.visits, r.gap_days)
        mm += mort != r.mortality_label
        rm += read != r.readmission_label
        p = r.provenance
        if p and (p.get("clean_mortality") != mort or p.get("clean_readmission") != read):
            bad += 1
    return LabelReport(len(records), mm, rm, bad)


# -- files ------------------------------------------------------------------

def write_triples(triples, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in triples:
            fh.write(f"{t.head}\t{t.relation}\t{t.tail}\n")


def read_triples(path) -> list[Triple]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"{path}:{n}: expected 3 tab-separated fields, got {len(parts)}")
            out.append(Triple(*parts))
    return out


def write_corpus(docs, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in docs:
            fh.write(" ".join(d) + "\n")


def read_corpus(path) -> list[list[str]]:
    with open(path, encoding="utf-8") as fh:
        return [line.split() for line in fh if line.strip()]


def write_dataset(ds: Dataset, out_dir) -> dict[str, str]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "dataset.jsonl", "w", encoding="utf-8") as fh:
        for r in ds.records:
            fh.write(r.to_json() + "\n")
    write_triples(ds.triples, out / "triples.tsv")
    write_corpus(ds.corpus, out / "corpus.txt")
    (out / "vocab.txt").write_text("\n".join(ds.vocab.symbols) + "\n", encoding="utf-8")
    meta = {"generator": ds.config.to_dict(), "rules": ds.rules.to_dict(),
            "checksum": dataset_checksum(out / "dataset.jsonl")}
    (out / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")
    return {"dataset": str(out / "dataset.jsonl"), "checksum": meta["checksum"]}


def read_dataset(in_dir) -> Dataset:
    d = Path(in_dir)
    meta = json.loads((d / "meta.json").read_text())
    cfg = GeneratorConfig(**meta["generator"])
    with open(d / "dataset.jsonl", encoding="utf-8") as fh:
        records = [SyntheticRecord.from_dict(json.loads(line)) for line in fh if line.strip()]
    vocab = Vocabulary((d / "vocab.txt").read_text(encoding="utf-8").split("\n")[:-1])
    check_patient_disjoint(records)
    return Dataset(cfg, vocab, Rules.from_dict(meta["rules"]), records,
                   read_triples(d / "triples.tsv"), read_corpus(d / "corpus.txt"))


def dataset_checksum(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def bag_of_codes(records, vocab: Vocabulary) -> np.ndarray:
    X = np.zeros((len(records), len(vocab)))
    for i, r in enumerate(records):
        for c in {c for v in r.visits for c in v}:
            X[i, vocab.index[c]] = 1.0
    return X
