import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from keymem.synthdata import (
    SPLITS,
    GeneratorConfig,
    Rules,
    Triple,
    bag_of_codes,
    check_patient_disjoint,
    generate,
    gap_token,
    read_dataset,
    read_triples,
    verify_labels,
    write_dataset,
)

SEED42_CHECKSUM = "abe696d32e9cdc7697fc9ee432cf7e7960e21280f88ea826a559094e8f907ae2"


@pytest.fixture(scope="module")
def default_ds():
    return generate(GeneratorConfig())


@pytest.fixture(scope="module")
def clean_ds():
    return generate(GeneratorConfig(label_noise=0.0))


RULES = Rules([("code_001", "code_002"), ("code_003", "code_004")], [("code_010", "code_011")], 15)


def test_pair_rule_examples():
    assert RULES.clean_labels([["code_001", "code_050"], ["code_002"]], 30) == (1, 0)
    assert RULES.clean_labels([["code_001", "code_003"], ["code_050"]], 30) == (0, 0)
    assert RULES.clean_labels([["code_010"], ["code_011"]], 15) == (0, 1)
    assert RULES.clean_labels([["code_010"], ["code_011"]], 16) == (0, 0)


def test_seed42_checksum_pinned(tmp_path):
    info = write_dataset(generate(GeneratorConfig()), tmp_path)
    assert info["checksum"] == SEED42_CHECKSUM


def test_default_split_sizes_and_disjoint(default_ds):
    sizes = {s: len(default_ds.split(s)) for s in SPLITS}
    assert sizes == {"train": 2000, "dev": 250, "test": 250}
    ids = {s: {r.patient_id for r in default_ds.split(s)} for s in SPLITS}
    assert not (ids["train"] & ids["dev"] or ids["train"] & ids["test"] or ids["dev"] & ids["test"])


def test_split_overlap_detected(default_ds):
    recs = [default_ds.records[0], default_ds.records[1]]
    twin = type(recs[0])(**{**recs[0].__dict__, "split": "test" if recs[0].split != "test" else "dev"})
    with pytest.raises(ValueError, match="appears in splits"):
        check_patient_disjoint(recs + [twin])


def test_noiseless_labels_rederive(clean_ds):
    rep = verify_labels(clean_ds.records, clean_ds.rules)
    assert rep.mortality_mismatches == 0 and rep.readmission_mismatches == 0
    assert rep.provenance_errors == 0
    prev = np.mean([r.mortality_label for r in clean_ds.records])
    assert 0.07 <= prev <= 0.13


def test_noise_rate_within_binomial_interval():
    ds = generate(GeneratorConfig(label_noise=0.1, n_patients=5000))
    rep = verify_labels(ds.records, ds.rules)
    assert 0.089 <= rep.mortality_mismatch_rate <= 0.111
    assert 0.089 <= rep.readmission_mismatch_rate <= 0.111
    assert rep.provenance_errors == 0


def test_records_well_formed(default_ds):
    for r in default_ds.records[:500]:
        assert r.visits and all(r.visits)
        toks = r.tokens()
        assert toks[-1] == gap_token(r.gap_days)
        assert len(toks) <= default_ds.config.max_tokens
        assert all(t in default_ds.vocab for t in toks)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2499), st.randoms(use_true_random=False))
def test_labels_invariant_to_visit_and_code_order(i, rnd):
    ds = _CACHE.setdefault("ds", generate(GeneratorConfig(label_noise=0.0)))
    r = ds.records[i]
    visits = [list(v) for v in r.visits]
    rnd.shuffle(visits)
    for v in visits:
        rnd.shuffle(v)
    assert ds.rules.clean_labels(visits, r.gap_days) == (r.mortality_label, r.readmission_label)


_CACHE = {}


def test_triples_encode_exactly_the_planted_pairs(default_ds):
    rules, triples = default_ds.rules, default_ds.triples
    co = {(t.head, t.tail) for t in triples if t.relation == "co_risk"}
    assert co == set(rules.risk_pairs) | set(rules.readmit_pairs)
    out = [t.tail for t in triples if t.relation == "increases_risk_of"]
    assert out.count("DEATH") == len(rules.risk_pairs)
    assert out.count("READMISSION") == len(rules.readmit_pairs)


def test_corpus_mentions_planted_pairs(default_ds):
    pairs = default_ds.rules.risk_pairs
    hits = sum(any(a in d and b in d for a, b in pairs) for d in default_ds.corpus)
    assert hits > 0.1 * len(default_ds.corpus)


def test_bag_of_codes_logistic_cannot_solve_pair_rule(clean_ds):
    from sklearn.linear_model import LogisticRegression
    from sklearn.metrics import roc_auc_score

    X = bag_of_codes(clean_ds.records, clean_ds.vocab)
    y = np.array([r.mortality_label for r in clean_ds.records])
    tr = np.array([r.split == "train" for r in clean_ds.records])
    model = LogisticRegression(max_iter=2000).fit(X[tr], y[tr])
    assert roc_auc_score(y[~tr], model.decision_function(X[~tr])) <= 0.75


def test_round_trip_files(tmp_path, default_ds):
    write_dataset(default_ds, tmp_path)
    back = read_dataset(tmp_path)
    assert [r.to_json() for r in back.records] == [r.to_json() for r in default_ds.records]
    assert back.triples == default_ds.triples and back.corpus == default_ds.corpus
    assert back.vocab.symbols == default_ds.vocab.symbols
    line = (tmp_path / "triples.tsv").read_text().splitlines()[0]
    assert len(line.split("\t")) == 3


def test_bad_triples_file(tmp_path):
    p = tmp_path / "t.tsv"
    p.write_text("a\tb\n")
    with pytest.raises(ValueError, match="3 tab-separated"):
        read_triples(p)
    with pytest.raises(ValueError):
        Triple("a b", "r", "c")


def test_config_errors():
    with pytest.raises(ValueError, match="too small"):
        GeneratorConfig(n_codes=10)
    with pytest.raises(ValueError):
        GeneratorConfig(label_noise=0.5)
    with pytest.raises(ValueError):
        GeneratorConfig(readmission_window_days=0)


def test_generation_is_deterministic():
    a = generate(GeneratorConfig(n_patients=50, n_documents=20, seed=7))
    b = generate(GeneratorConfig(n_patients=50, n_documents=20, seed=7))
    c = generate(GeneratorConfig(n_patients=50, n_documents=20, seed=8))
    assert [r.to_json() for r in a.records] == [r.to_json() for r in b.records]
    assert [r.to_json() for r in a.records] != [r.to_json() for r in c.records]
