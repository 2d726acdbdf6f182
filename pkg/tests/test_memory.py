import numpy as np
import pytest

from keymem.memory import (
    FfnLayer,
    LoraAdapter,
    Source,
    extract_document_memory,
    extract_graph_memory,
    ffn_forward_keyvalue,
    ffn_forward_lora,
    ffn_forward_matrix,
    merged_layer,
)
from keymem.numerics import ShapeError


@pytest.fixture
def tiny_layer():
    # keys k1=[1,0], k2=[0,1] as columns; values v1=[1,1], v2=[2,0] as rows
    return FfnLayer(np.array([[1.0, 0.0], [0.0, 1.0]]), np.zeros(2),
                    np.array([[1.0, 1.0], [2.0, 0.0]]), np.zeros(2), "relu")


def random_layer(rng, d, f, act=None):
    act = act or rng.choice(["relu", "gelu"])
    return FfnLayer(rng.normal(size=(d, f)), rng.normal(size=f), rng.normal(size=(f, d)),
                    rng.normal(size=d), act)


def rel(a, b):
    return np.max(np.abs(a - b)) / max(1.0, np.max(np.abs(b)))


@pytest.mark.parametrize("x, expected", [([3, -1], [3, 3]), ([0, 0], [0, 0]), ([1, 1], [3, 1])])
def test_hand_examples_both_forms(tiny_layer, x, expected):
    assert ffn_forward_matrix(tiny_layer, x).tolist() == expected
    assert ffn_forward_keyvalue(tiny_layer, x).tolist() == expected


def test_keyvalue_equals_matrix_random():
    rng = np.random.default_rng(0)
    for _ in range(100):
        d, f = rng.integers(2, 17, size=2)
        layer = random_layer(rng, d, f)
        x = rng.normal(size=d)
        assert rel(ffn_forward_keyvalue(layer, x), ffn_forward_matrix(layer, x)) <= 1e-10


def test_single_key_layer():
    rng = np.random.default_rng(1)
    layer = random_layer(rng, 4, 1, "relu")
    x = rng.normal(size=4)
    expected = max(x @ layer.w1[:, 0] + layer.b1[0], 0.0) * layer.w2[0] + layer.b2
    assert np.allclose(ffn_forward_keyvalue(layer, x), expected, atol=1e-14)


def test_dimension_mismatch(tiny_layer):
    with pytest.raises(ShapeError):
        ffn_forward_matrix(tiny_layer, [1, 2, 3])
    with pytest.raises(ShapeError):
        FfnLayer(np.ones((2, 3)), np.ones(3), np.ones((2, 2)), np.ones(2))


def test_zero_adapter_is_base(tiny_layer):
    ad = LoraAdapter(np.ones((2, 1)), np.zeros((1, 2)), np.ones((2, 1)), np.zeros((1, 2)))
    for x in ([3, -1], [1, 1], [0.2, 5]):
        assert np.array_equal(ffn_forward_lora(tiny_layer, ad, x), ffn_forward_matrix(tiny_layer, x))


def test_rank_one_update_materializes():
    ad = LoraAdapter(np.array([[1.0], [2.0]]), np.array([[3.0, 4.0]]),
                     np.zeros((2, 1)), np.zeros((1, 2)))
    assert ad.key_update().tolist() == [[3, 4], [6, 8]]
    rng = np.random.default_rng(2)
    layer = random_layer(rng, 2, 2)
    x = rng.normal(size=2)
    assert rel(ffn_forward_lora(layer, ad, x), ffn_forward_matrix(merged_layer(layer, ad), x)) <= 1e-10
    mem = extract_graph_memory(ad, 0)
    assert mem.keys.tolist() == [[3, 6], [4, 8]]


def test_lora_factored_equals_materialized_random():
    rng = np.random.default_rng(3)
    for _ in range(100):
        d, f = rng.integers(2, 17, size=2)
        r = int(rng.integers(1, min(d, f) + 1))
        layer = random_layer(rng, d, f)
        ad = LoraAdapter(rng.normal(size=(d, r)), rng.normal(size=(r, f)),
                         rng.normal(size=(f, r)), rng.normal(size=(r, d)))
        x = rng.normal(size=d)
        assert rel(ffn_forward_lora(layer, ad, x), ffn_forward_matrix(merged_layer(layer, ad), x)) <= 1e-10


def test_adapter_rank_bounds():
    with pytest.raises(ValueError):
        LoraAdapter(np.ones((2, 3)), np.ones((3, 4)), np.ones((4, 3)), np.ones((3, 2)))
    with pytest.raises(ShapeError):
        LoraAdapter(np.ones((2, 1)), np.ones((1, 4)), np.ones((3, 1)), np.ones((1, 2)))
    with pytest.raises(ShapeError):
        ffn_forward_lora(FfnLayer(np.ones((3, 3)), np.ones(3), np.ones((3, 3)), np.ones(3)),
                         LoraAdapter(np.ones((2, 1)), np.ones((1, 4)), np.ones((4, 1)), np.ones((1, 2))),
                         [1, 2, 3])


def test_document_memory_extraction(tiny_layer):
    mem = extract_document_memory(tiny_layer, 3)
    assert mem.keys.tolist() == [[1, 0], [0, 1]]
    assert mem.values.tolist() == [[1, 1], [2, 0]]
    assert mem.source is Source.DOCUMENT and mem.layer_index == 3
    again = extract_document_memory(tiny_layer, 3)
    assert mem.keys.tobytes() == again.keys.tobytes()
    assert mem.values.tobytes() == again.values.tobytes()


def test_memory_rows_are_d_ff_and_read_only():
    rng = np.random.default_rng(4)
    layer = random_layer(rng, 5, 11)
    mem = extract_document_memory(layer, 0)
    assert mem.keys.shape == (11, 5) and mem.keys.flags.c_contiguous
    with pytest.raises(ValueError):
        mem.keys[0, 0] = 1.0
    # memory is a copy: later edits to the layer do not leak in
    layer.w1[0, 0] += 1.0
    assert mem.keys[0, 0] != layer.w1[0, 0]


def test_graph_memory_zero_adapter_and_shapes():
    ad = LoraAdapter.init(6, 10, 2, np.random.default_rng(0))
    mem = extract_graph_memory(ad, 1)
    assert mem.source is Source.GRAPH
    assert mem.keys.shape == (10, 6) and not mem.keys.any() and not mem.values.any()
    for r in (1, 3, 6):
        ad = LoraAdapter.init(6, 10, r, np.random.default_rng(r))
        ad.b1[:] = 1.0
        assert extract_graph_memory(ad, 0).keys.shape[0] == 10


def test_graph_and_document_memories_share_shape_but_not_storage():
    rng = np.random.default_rng(5)
    layer = random_layer(rng, 4, 8)
    ad = LoraAdapter(rng.normal(size=(4, 2)), rng.normal(size=(2, 8)),
                     rng.normal(size=(8, 2)), rng.normal(size=(2, 4)))
    doc, graph = extract_document_memory(layer, 0), extract_graph_memory(ad, 0)
    assert doc.keys.shape == graph.keys.shape
    assert not np.shares_memory(doc.keys, graph.keys)
    # document keys are the base W1 only, never W1 + A1 B1
    assert np.array_equal(doc.keys, layer.w1.T)
