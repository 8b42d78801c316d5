import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ubp.encoders import (MUVE_VOCAB, N_PLE_IDS, HashedEmbeddingTable, PleBins, PleEmbedding,
                          TextBag, encode_ple, encode_ple_matrix, fit_ple, muve_hash, muve_lookup,
                          text_bag)
from ubp.nn import F


# -- PLE --------------------------------------------------------------------------------
def test_fit_ple_0_to_63():
    bins = fit_ple(np.arange(64.0))
    srt = np.sort(np.arange(64.0))
    oracle = [srt[(k * 64) // 64] for k in range(1, 64)]
    np.testing.assert_array_equal(bins.edges[0], oracle)
    np.testing.assert_array_equal(bins.edges[0], np.arange(1, 64))


def test_fit_ple_constant():
    bins = fit_ple(np.full(50, 3.0))
    assert np.all(bins.edges == 3.0)
    ids = {encode_ple(v, bins.edges[0]) for v in (3.0, 3.0, 3.0)}
    assert len(ids) == 1


def test_fit_ple_uniform():
    x = np.random.default_rng(0).random(64_000)
    bins = fit_ple(x)
    np.testing.assert_allclose(bins.edges[0], np.arange(1, 64) / 64, atol=0.01)


def test_fit_ple_empty():
    with pytest.raises(ValueError):
        fit_ple(np.zeros((0, 3)))


def test_encode_clamps():
    edges = np.arange(10.0, 640.0, 10.0)
    assert encode_ple(-5.0, edges) == 0
    assert encode_ple(1e9, edges) == N_PLE_IDS - 1 == 2047


def test_encode_formula_example():
    edges = np.arange(10.0, 640.0, 10.0)
    assert len(edges) == 63
    coarse = int((edges < 15).sum())
    sub = int(np.floor(32 * (15 - 10) / (20 - 10)))
    assert (coarse, sub) == (1, 16)
    assert encode_ple(15.0, edges) == coarse * 32 + sub == 48


@given(st.lists(st.floats(-100, 100), min_size=1, max_size=300), st.floats(-150, 150),
       st.floats(-150, 150))
@settings(max_examples=100, deadline=None)
def test_encode_monotone(sample, v1, v2):
    edges = fit_ple(np.array(sample)).edges[0]
    lo, hi = sorted((v1, v2))
    a, b = encode_ple(lo, edges), encode_ple(hi, edges)
    assert 0 <= a <= b < N_PLE_IDS


def test_interval_occupancy_on_fit_sample():
    n = 6400
    x = np.random.default_rng(1).normal(size=n)
    bins = fit_ple(x)
    coarse = encode_ple_matrix(x[:, None], bins)[:, 0] // 32
    share = np.bincount(coarse, minlength=64) / n
    eps = 2 / np.sqrt(n)
    assert np.all(np.abs(share - 1 / 64) <= eps)


def test_ple_bins_json_and_width_check():
    bins = fit_ple(np.random.default_rng(0).random((100, 3)))
    assert bins.n_features == 3
    back = PleBins.from_json(bins.to_json())
    np.testing.assert_array_equal(back.edges, bins.edges)
    with pytest.raises(ValueError):
        encode_ple_matrix(np.zeros((2, 4)), bins)
    with pytest.raises(ValueError):
        PleBins(np.zeros((1, 10)))


def test_ple_embedding_tables_per_feature():
    emb = PleEmbedding(2, 2, np.random.default_rng(0), dtype=np.float64)
    out = emb(np.array([[5, 5]])).data[0]
    # same interval id in different features reads different rows
    assert not np.allclose(out[:2], out[2:])
    np.testing.assert_array_equal(out[:2], emb.table.data[5])
    np.testing.assert_array_equal(out[2:], emb.table.data[N_PLE_IDS + 5])


# -- MUVE --------------------------------------------------------------------------------
def test_muve_zero_table():
    t = HashedEmbeddingTable(4, np.random.default_rng(0), vocab=1000)
    t.weight.data[:] = 0
    assert np.all(muve_lookup("sku", 123, t).data == 0)


def test_muve_deterministic_and_in_range():
    t = HashedEmbeddingTable(4, np.random.default_rng(0), vocab=1000)
    np.testing.assert_array_equal(muve_lookup("sku", 77, t).data, muve_lookup("sku", 77, t).data)
    ids = np.arange(10_000)
    for seed in (17, 29):
        h = muve_hash("url", ids, seed, MUVE_VOCAB)
        assert h.min() >= 0 and h.max() < MUVE_VOCAB
    # namespaces separate the same raw id
    assert muve_hash("sku", 5, 17) != muve_hash("category", 5, 17)


def test_muve_is_sum_of_two_rows():
    t = HashedEmbeddingTable(3, np.random.default_rng(1), vocab=500)
    h1, h2 = t.rows("category", np.array([42]))
    np.testing.assert_allclose(muve_lookup("category", np.array([42]), t).data[0],
                               t.weight.data[h1[0]] + t.weight.data[h2[0]])


def test_muve_partial_collision_distinct():
    vocab = 64
    t = HashedEmbeddingTable(4, np.random.default_rng(2), vocab=vocab)
    ids = np.arange(5000)
    h1, h2 = t.rows("sku", ids)
    pair = None
    for i in range(len(ids)):
        same = np.flatnonzero((h1 == h1[i]) & (h2 != h2[i]) & (ids > i))
        if len(same):
            pair = (i, int(same[0]))
            break
    assert pair is not None
    a, b = (muve_lookup("sku", np.array([j]), t).data[0] for j in pair)
    assert not np.allclose(a, b)


def test_muve_grad_touches_two_rows():
    t = HashedEmbeddingTable(2, np.random.default_rng(0), vocab=1000, dtype=np.float64)
    muve_lookup("sku", np.array([9]), t).sum().backward()
    rows = np.flatnonzero(np.any(t.weight.grad.to_dense() != 0, axis=1))
    h1, h2 = t.rows("sku", np.array([9]))
    assert set(rows.tolist()) == {int(h1[0]), int(h2[0])}


# -- text bag --------------------------------------------------------------------------------
def test_text_bag_constant_bins():
    bag = TextBag(5, np.random.default_rng(0))
    np.testing.assert_allclose(text_bag([7] * 16, bag).data, bag.weight.data[7], rtol=1e-6)


def test_text_bag_one_hot_histogram():
    bag = TextBag(256, np.random.default_rng(0), dtype=np.float64)
    bag.weight.data[:] = np.eye(256)
    bins = np.random.default_rng(3).integers(0, 256, 16)
    np.testing.assert_allclose(text_bag(bins, bag).data, np.bincount(bins, minlength=256) / 16)


def test_text_bag_zero_and_errors():
    bag = TextBag(3, np.random.default_rng(0))
    bag.weight.data[:] = 0
    assert np.all(text_bag(np.arange(16), bag).data == 0)
    with pytest.raises(ValueError):
        text_bag([256] + [0] * 15, bag)
    with pytest.raises(ValueError):
        text_bag([0] * 15, bag)


def test_text_bag_batched():
    bag = TextBag(4, np.random.default_rng(0))
    x = np.random.default_rng(1).integers(0, 256, (2, 3, 16))
    out = text_bag(x, bag).data
    assert out.shape == (2, 3, 4)
    np.testing.assert_allclose(out[1, 2], F.embedding(bag.weight, x[1, 2]).data.mean(axis=0), rtol=1e-6)
