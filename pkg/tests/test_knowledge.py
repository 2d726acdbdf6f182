import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from keymem.encoder import Encoder, EncoderConfig
from keymem.knowledge import (
    InfusionConfig,
    linearize,
    parse_linearized,
    tensor_checksum,
    train_document_memory,
    train_graph_memory,
)
from keymem.memory import extract_document_memory, extract_graph_memory
from keymem.synthdata import GeneratorConfig, Triple, generate


@pytest.fixture(scope="module")
def ds():
    return generate(GeneratorConfig(n_patients=20, n_documents=150))


def tiny_encoder(vocab, seed=0, d=16, f=32, std=0.02):
    cfg = EncoderConfig(vocab_size=len(vocab), d_model=d, n_layers=2, n_heads=2, d_ff=f,
                        max_seq_len=32, dropout_rate=0.0)
    return Encoder.init(cfg, seed, std=std)


def test_linearize_template():
    assert linearize(Triple("code_001", "co_risk", "code_002")) == [
        "The", "relationship", "between", "code_001", "and", "code_002", "is", "co_risk"]


names = st.text(st.characters(whitelist_categories=("L", "N"), whitelist_characters="_"), min_size=1,
                max_size=12)


@given(names, names, names)
def test_linearize_round_trip(h, r, t):
    tr = Triple(h, r, t)
    assert parse_linearized(linearize(tr)) == tr


def test_parse_rejects_other_sentences():
    with pytest.raises(ValueError):
        parse_linearized(["The", "relation", "between", "a", "and", "b", "is", "r"])
    with pytest.raises(ValueError):
        parse_linearized(["a", "b"])


def test_document_infusion_lowers_heldout_perplexity(ds):
    enc = tiny_encoder(ds.vocab)
    before = tensor_checksum(enc.params)
    out, info = train_document_memory(enc, ds.corpus, ds.vocab, InfusionConfig(lr=3e-3, seed=1), epochs=3)
    assert info["perplexity_after"] < info["perplexity_before"]
    assert tensor_checksum(enc.params) == before
    assert not np.array_equal(out.params["layers.1.ffn.w1"], enc.params["layers.1.ffn.w1"])


def test_graph_infusion_freezes_base_and_lowers_loss(ds):
    doc = tiny_encoder(ds.vocab, seed=3)
    before = {k: v.copy() for k, v in doc.params.items()}
    g, info = train_graph_memory(doc, ds.triples, ds.vocab, InfusionConfig(lr=1e-2, seed=42), epochs=30)
    assert info["loss_final"] < info["loss_initial"]
    assert all(g.params[k].tobytes() == before[k].tobytes() for k in before)
    assert all(doc.params[k].tobytes() == before[k].tobytes() for k in before)
    assert not doc.adapters and sorted(g.adapters) == [0, 1]
    for l in range(2):
        dm = extract_document_memory(g.ffn_layer(l), l)
        gm = extract_graph_memory(g.adapters[l], l)
        assert dm.keys.shape == gm.keys.shape and dm.values.shape == gm.values.shape
        assert gm.keys.any()


def test_graph_infusion_reproducible(ds):
    doc = tiny_encoder(ds.vocab, seed=4)
    cfg = InfusionConfig(lr=1e-2, seed=5)
    a, _ = train_graph_memory(doc, ds.triples, ds.vocab, cfg, epochs=5)
    b, _ = train_graph_memory(doc, ds.triples, ds.vocab, cfg, epochs=5)
    assert tensor_checksum(a.adapter_tensors()) == tensor_checksum(b.adapter_tensors())


def test_full_rank_fits_at_least_as_well_as_rank_one(ds):
    d, f = 8, 16
    gaps = []
    for seed in range(3):
        # wide init so logits are not pinned near zero and capacity shows
        doc = tiny_encoder(ds.vocab, seed=seed, d=d, f=f, std=0.5)
        losses = []
        for r in (1, min(d, f)):
            _, info = train_graph_memory(doc, ds.triples, ds.vocab,
                                         InfusionConfig(lr=2e-2, batch_size=20, rank=r, seed=seed), epochs=150)
            losses.append(info["loss_final"])
        gaps.append(losses[1] - losses[0])
    assert np.median(gaps) < 0


def test_infusion_errors(ds):
    enc = tiny_encoder(ds.vocab)
    with pytest.raises(ValueError, match="empty"):
        train_document_memory(enc, [], ds.vocab, InfusionConfig())
    with pytest.raises(ValueError, match="no triples"):
        train_graph_memory(enc, [], ds.vocab, InfusionConfig())
    with pytest.raises(ValueError, match="rank"):
        train_graph_memory(enc, ds.triples, ds.vocab, InfusionConfig(rank=0))
