import io
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import T0, add, buy, page, rem
from ubp.events import EventType, UserHistory
from ubp.nn import Tensor
from ubp.twhin import (EdgeSet, EdgeType, IdItemTable, TwhinConfig, build_graph, make_twhin,
                       planted_block_graph, popular_items, select_users, train_twhin, twhin_logits,
                       twhin_loss, twhin_score)


def test_graph_counts():
    h = UserHistory(1, (buy(1, T0, 3), rem(1, T0 + 1, 3), buy(1, T0 + 2, 4), add(1, T0 + 3, 5)))
    g = build_graph({1: h, 2: UserHistory(2, (page(2, T0),))})
    assert len(g) == 3
    assert g.etype.tolist() == [EdgeType.PURCHASE, EdgeType.PURCHASE, EdgeType.ADD_TO_CART]
    assert 2 not in g.user


def test_graph_matches_event_filter(small_corpus):
    hs = small_corpus[3]
    g = build_graph(hs)
    oracle = sorted((e.user_id, e.sku, 0 if e.event_type == EventType.PURCHASE else 1)
                    for h in hs.values() for e in h.events
                    if e.event_type in (EventType.PURCHASE, EventType.ADD_TO_CART))
    assert sorted(zip(g.user.tolist(), g.item.tolist(), g.etype.tolist())) == oracle
    assert len(build_graph(hs, types=[EdgeType.PURCHASE])) == sum(t == 0 for *_, t in oracle)


def test_edge_csv_roundtrip():
    g = EdgeSet(np.array([1, 2]), np.array([7, 7]), np.array([0, 1]))
    text = g.to_csv_string()
    assert text.splitlines() == ["user_id,item_id,edge_type", "1,7,purchase", "2,7,add_to_cart"]
    back = EdgeSet.read_csv(io.StringIO(text))
    for a, b in zip(back.__dict__.values(), g.__dict__.values()):
        np.testing.assert_array_equal(a, b)


def test_select_users_and_popular():
    g = EdgeSet(np.array([1, 2, 2, 3, 3, 3, 4]), np.array([9, 9, 8, 8, 8, 7, 6]), np.zeros(7, int))
    assert select_users(g, [1], max_users=3).tolist() == [1, 2, 3]
    assert select_users(g, []).tolist() == [1, 2, 3, 4]
    assert popular_items(g, 2).tolist() == [8, 9]


def test_id_table_oov():
    t = IdItemTable(np.array([5, 3]), 4, np.random.default_rng(0), 0.1)
    assert t.index([3, 5, 99]).tolist() == [0, 1, 2]
    assert t.table.weight.shape == (3, 4)


# -- score / loss ------------------------------------------------------------------------
def test_score_identical_and_opposite():
    item, edge = np.array([1.0, 2.0, 0.0]), np.array([0.5, 0.0, 1.0])
    assert twhin_score(item + edge, item, edge) == pytest.approx(1.0)
    assert twhin_score(-(item + edge), item, edge) == pytest.approx(-1.0)


def test_score_random_cosine():
    r = np.random.default_rng(0)
    u, d, e = r.normal(size=(3, 6))
    v = d + e
    assert twhin_score(u, d, e) == pytest.approx(float(u @ v / np.linalg.norm(u) / np.linalg.norm(v)))
    with pytest.raises(ValueError):
        twhin_score(np.zeros(6), d, e)


@given(st.floats(1e-3, 1e3))
def test_score_scale_invariant(c):
    r = np.random.default_rng(1)
    u, d, e = r.normal(size=(3, 5))
    assert twhin_score(c * u, d, e) == pytest.approx(twhin_score(u, d, e), abs=1e-12)


def test_logits_match_score():
    r = np.random.default_rng(2)
    u, it, edge = r.normal(size=(3, 4)), r.normal(size=(3, 4)), r.normal(size=(2, 4))
    et = np.array([1, 0, 1])
    lg = twhin_logits(Tensor(u), Tensor(it), Tensor(edge), et).data
    for i in range(3):
        for j in range(3):
            assert lg[i, j] == pytest.approx(twhin_score(u[i], it[j], edge[et[i]]), abs=1e-12)


def test_loss_zero_logits():
    assert twhin_loss(Tensor(np.zeros((2, 2)))).item() == pytest.approx(2 * math.log(2), abs=1e-12)


def test_loss_extremes():
    big = np.where(np.eye(4, dtype=bool), 50.0, -50.0)
    assert twhin_loss(Tensor(big)).item() < 1e-20


def test_loss_random_3x3():
    lg = np.random.default_rng(0).normal(size=(3, 3))
    sig = 1 / (1 + np.exp(-lg))
    want = -sum(math.log(sig[i, i]) + sum(math.log(1 - sig[i, j]) for j in range(3) if j != i)
                for i in range(3)) / 3
    assert twhin_loss(Tensor(lg)).item() == pytest.approx(want, abs=1e-12)


def test_loss_needs_two():
    with pytest.raises(ValueError):
        twhin_loss(Tensor(np.zeros((1, 1))))


# -- training -------------------------------------------------------------------------------
def _small_setup(steps, seed=0, **kw):
    edges, _, _ = planted_block_graph(seed, n_users=40, n_items=20)
    cfg = TwhinConfig(steps=steps, batch_size=32, top_k_items=100, **kw)
    return edges, make_twhin(edges, np.unique(edges.user), cfg, seed)


def test_zero_steps_keep_init():
    edges, model = _small_setup(0)
    init = model.users.weight.data.copy()
    train_twhin(edges, model)
    np.testing.assert_array_equal(model.user_embeddings()[1], init)


def test_training_deterministic():
    outs = []
    for _ in range(2):
        edges, model = _small_setup(5, seed=3)
        losses = train_twhin(edges, model, seed=3)
        outs.append((losses, model.users.weight.data.copy()))
    assert outs[0][0] == outs[1][0]
    np.testing.assert_array_equal(outs[0][1], outs[1][1])


def test_users_without_edges_keep_init():
    edges, _ = _small_setup(0)
    users = np.r_[np.unique(edges.user), 10_000]
    model = make_twhin(edges, users, TwhinConfig(steps=3, batch_size=16), 0)
    init = model.users.weight.data[-1].copy()
    train_twhin(edges, model)
    np.testing.assert_array_equal(model.users.weight.data[-1], init)


def test_empty_graph_rejected():
    edges, model = _small_setup(1)
    with pytest.raises(ValueError):
        train_twhin(edges.take(np.zeros(len(edges), bool)), model)


def test_loss_trend_first_50_steps():
    edges, _, _ = planted_block_graph(0)
    model = make_twhin(edges, np.unique(edges.user), TwhinConfig(steps=50, top_k_items=1000), 0)
    losses = np.array(train_twhin(edges, model))
    ma = np.convolve(losses, np.ones(10) / 10, mode="valid")
    assert ma[-1] < ma[0]


def test_dropout_never_zeroes_a_row():
    _, model = _small_setup(0, dropout=0.9)
    model.train()
    x = Tensor(np.ones((200, 2)))
    out = model._drop(x).data
    assert np.all(np.abs(out).sum(axis=1) > 0)


def test_pretrained_item_source_requires_model():
    edges, _ = _small_setup(0)
    with pytest.raises(ValueError):
        make_twhin(edges, np.unique(edges.user), TwhinConfig(item_source="pretrained"), 0)


def test_pretrained_item_source_trains(small_corpus):
    from ubp.seq_encoder import ItemCatalog, SeqEncoder, SeqModelConfig
    hs = small_corpus[3]
    edges = build_graph(hs)
    seq = SeqEncoder(SeqModelConfig(embedding_dim=8, hidden_dim=16, num_layers=1, muve_vocab=4096))
    cfg = TwhinConfig(item_source="pretrained", dim=8, steps=3, batch_size=32)
    model = make_twhin(edges, np.unique(edges.user), cfg, 0, seq_model=seq,
                       catalog=ItemCatalog(hs.values()))
    before = seq.item_out.weight.data.copy()
    train_twhin(edges, model)
    assert not np.array_equal(before, seq.item_out.weight.data)
