"""Finite-difference cases for every differentiable op and every loss.

Each builder takes a seeded Generator and returns ``(loss_fn, inputs)`` or,
for losses with a stop-gradient, ``(loss_fn, inputs, fd_fn)`` where
``fd_fn`` is the surrogate with the stopped factor frozen at its current
value (the function the analytic gradient should match).
"""
import numpy as np

from ubp import dcn, seq_encoder as se, twhin
from ubp.encoders import HashedEmbeddingTable, PleEmbedding, TextBag, muve_lookup, text_bag
from ubp.nn import (CausalSelfAttention, F, LayerNorm, Linear, Parameter, RMSNorm, Tensor,
                    TransformerBlock)
from ubp.nn.gradcheck import dense_grad, rel_error

TOL = 1e-4
N_PROBES = 10


def p64(rng, *shape, scale=1.0, sparse=False):
    return Parameter(rng.normal(0, scale, shape), sparse=sparse)


def weighted(out: Tensor, rng) -> Tensor:
    """Contract an output with a fixed random tensor so every entry matters."""
    r = Tensor(np.random.default_rng(99).normal(size=out.shape))
    return (out * r).sum()


def _unary(op, positive=False):
    def build(rng):
        x = p64(rng, 3, 4)
        if positive:
            x.data[:] = np.abs(x.data) + 0.5
        return (lambda: weighted(op(x), rng)), [x]
    return build


def _binary(op, positive_b=False):
    def build(rng):
        a, b = p64(rng, 3, 4), p64(rng, 4)
        if positive_b:
            b.data[:] = np.abs(b.data) + 0.5
        return (lambda: weighted(op(a, b), rng)), [a, b]
    return build


def _matmul(rng):
    a, b = p64(rng, 2, 3, 4), p64(rng, 4, 5)
    return (lambda: weighted(F.matmul(a, b), rng)), [a, b]


def _getitem_slice(rng):
    x = p64(rng, 4, 5)
    return (lambda: weighted(x[1:3, ::2], rng)), [x]


def _getitem_fancy(rng):
    x = p64(rng, 6, 3)
    idx = np.array([0, 2, 2, 5])
    return (lambda: weighted(x[idx], rng)), [x]


def _concat(rng):
    a, b = p64(rng, 2, 3), p64(rng, 2, 4)
    return (lambda: weighted(F.concat([a, b], axis=-1), rng)), [a, b]


def _stack(rng):
    a, b = p64(rng, 2, 3), p64(rng, 2, 3)
    return (lambda: weighted(F.stack([a, b], axis=1), rng)), [a, b]


def _reshape_transpose(rng):
    x = p64(rng, 2, 3, 4)
    return (lambda: weighted(F.swapaxes(F.transpose(F.reshape(x, (6, 4))), 0, 1), rng)), [x]


def _reductions(rng):
    x = p64(rng, 3, 4)
    return (lambda: weighted(x.sum(axis=0), rng) + weighted(x.mean(axis=1, keepdims=True), rng)
            + x.sum() * 0.3), [x]


def _masked_fill(rng):
    x = p64(rng, 3, 4)
    mask = np.random.default_rng(5).random((3, 4)) < 0.4
    return (lambda: weighted(F.masked_fill(x, mask, -3.0), rng)), [x]


def _rms_norm(rng):
    x, g = p64(rng, 3, 5), p64(rng, 5)
    return (lambda: weighted(F.rms_norm(x, g), rng)), [x, g]


def _layer_norm(rng):
    x, g, b = p64(rng, 3, 5), p64(rng, 5), p64(rng, 5)
    return (lambda: weighted(F.layer_norm(x, g, b), rng)), [x, g, b]


def _embedding(sparse):
    def build(rng):
        table = p64(rng, 7, 3, sparse=sparse)
        idx = np.array([[0, 3], [3, 6]])
        return (lambda: weighted(F.embedding(table, idx), rng)), [table]
    return build


def _dropout(rng):
    x = p64(rng, 4, 5)
    return (lambda: weighted(F.dropout(x, 0.3, np.random.default_rng(1), True), rng)), [x]


def _attention(rng):
    q, k, v = p64(rng, 2, 4, 3), p64(rng, 2, 4, 3), p64(rng, 2, 4, 3)
    return (lambda: weighted(F.causal_self_attention(q, k, v), rng)), [q, k, v]


def _module(make, shape):
    def build(rng):
        m = make(rng)
        m.to_dtype(np.float64)
        x = p64(rng, *shape)
        return (lambda: weighted(m(x), rng)), [x] + m.parameters()
    return build


def _mlp3(rng):
    layers = [Linear(4, 6, rng, dtype=np.float64), Linear(6, 6, rng, dtype=np.float64),
              Linear(6, 2, rng, dtype=np.float64)]
    x = p64(rng, 5, 4)

    def fn():
        h = x
        for i, layer in enumerate(layers):
            h = layer(h)
            if i < 2:
                h = F.tanh(h)
        return weighted(h, rng)
    return fn, [x] + [p for layer in layers for p in layer.parameters()]


# -- encoders --------------------------------------------------------------------
def _muve(rng):
    table = HashedEmbeddingTable(3, rng, vocab=64, dtype=np.float64)
    return (lambda: weighted(muve_lookup("sku", np.array([1, 2, 9]), table), rng)), [table.weight]


def _text_bag(rng):
    bag = TextBag(3, rng, dtype=np.float64)
    emb = np.random.default_rng(2).integers(0, 256, (2, 16))
    return (lambda: weighted(text_bag(emb, bag), rng)), [bag.weight]


def _ple_embedding(rng):
    ple = PleEmbedding(3, 2, rng, dtype=np.float64)
    ids = np.array([[0, 5, 2047], [5, 5, 100]])
    return (lambda: weighted(ple(ids), rng)), [ple.table]


# -- losses ------------------------------------------------------------------------
def _netp(rng):
    logits = p64(rng, 6, 5)
    y = np.eye(5)[np.random.default_rng(3).integers(0, 5, 6)]
    return (lambda: se.loss_netp(y, F.softmax(logits))), [logits]


def _netp_logits(rng):
    logits = p64(rng, 6, 5)
    y = np.eye(5)[np.random.default_rng(3).integers(0, 5, 6)]
    return (lambda: se.loss_netp_logits(y, logits)), [logits]


def _tdp(rng):
    pred = p64(rng, 7)
    delta = np.abs(np.random.default_rng(4).normal(size=7))
    return (lambda: se.loss_tdp(delta, pred)), [pred]


def _ssm_batch(rng):
    q, pos, neg = p64(rng, 4, 6), p64(rng, 4, 6), p64(rng, 5, 6)
    tau = Parameter(np.array([np.log(0.5)]))
    return q, pos, neg, tau


def _nup(rng):
    q, pos, neg, tau = _ssm_batch(rng)
    mask = np.zeros((4, 5), dtype=bool)
    mask[1, 2] = True
    return (lambda: se.loss_nup(se.SampledSoftmaxBatch(q, pos, neg, tau, neg_mask=mask))), \
        [q, pos, neg, tau]


def _nip(rng):
    q, pos, neg, tau = _ssm_batch(rng)
    logq = np.log(np.random.default_rng(6).uniform(0.01, 0.2, 5))

    def loss():
        return se.loss_nip(se.SampledSoftmaxBatch(q, pos, neg, tau, logq=logq))

    def log_p():
        pos_l, neg_l = se._cosine_logits(se.SampledSoftmaxBatch(q, pos, neg, tau))
        allp = F.concat([F.reshape(pos_l, (-1, 1)), neg_l - Tensor(logq)], axis=-1)
        return pos_l - F.logsumexp(allp, axis=-1)

    def frozen():
        # the weight is fixed at its value at the base point, so plain
        # differentiation of this surrogate is what the stop-gradient promises
        w0 = Tensor(1.0 - np.exp(log_p().data))
        return lambda: (-(w0 * log_p())).mean()

    return loss, [q, pos, neg, tau], frozen


def _seq_total(rng):
    logits = p64(rng, 4, 5)
    pred = p64(rng, 4)
    q, pos, neg, tau = _ssm_batch(rng)
    y = np.eye(5)[[0, 1, 4, 2]]
    delta = np.array([0.1, 0.5, 2.0, 0.0])

    def fn():
        b = se.SampledSoftmaxBatch(q, pos, neg, tau)
        return se.loss_seq_total(netp=se.loss_netp_logits(y, logits), tdp=se.loss_tdp(delta, pred),
                                 nup=se.loss_nup(b))
    return fn, [logits, pred, q, pos, neg, tau]


def _twhin(rng):
    u, it, edge = p64(rng, 4, 5), p64(rng, 4, 5), p64(rng, 2, 5)
    et = np.array([0, 1, 1, 0])
    return (lambda: twhin.twhin_loss(twhin.twhin_logits(u, it, edge, et))), [u, it, edge]


def _twhin_bce(rng):
    logits = p64(rng, 3, 3, scale=2.0)
    return (lambda: twhin.twhin_loss(logits)), [logits]


def _small_dcn(rng):
    cfg = dcn.DcnConfig(seq_hidden=4, seq_out=3, ranks=(3, 2, 2), dense_hidden=4, out_dim=4)
    return dcn.DcnModel(3, 5, n_skus=4, n_categories=3, cfg=cfg, seed=1, dtype=np.float64)


def _multitask(rng):
    model = _small_dcn(rng)
    ids = np.array([[0, 40, 2047], [33, 40, 7], [5, 6, 7]])
    seq = p64(rng, 3, 5)
    r = np.random.default_rng(8)
    churn, sku, cat = r.integers(0, 2, 3), r.integers(0, 2, (3, 4)), r.integers(0, 2, (3, 3))
    return (lambda: dcn.multitask_loss(model(ids, seq), model, churn, sku, cat)[0]), \
        [seq] + model.parameters()


def _contrastive(rng):
    a, b = p64(rng, 4, 5), p64(rng, 4, 5)
    tau = Parameter(np.array([np.log(0.3)]))
    return (lambda: dcn.contrastive_loss(a, b, tau)), [a, b, tau]


def _cross_layer(rng):
    x0, xl = p64(rng, 3, 6), p64(rng, 3, 6)
    u, v, b = p64(rng, 6, 2), p64(rng, 6, 2), p64(rng, 6)

    def fn():
        out, low = dcn.cross_layer(x0, xl, u, v, b)
        return weighted(out, rng) + weighted(low, rng)
    return fn, [x0, xl, u, v, b]


def _seq_projection(rng):
    m = dcn.SeqProjection(5, 4, 3, rng, dtype=np.float64)
    x = p64(rng, 3, 5)
    return (lambda: weighted(m(x), rng)), [x] + m.parameters()


def _dcn_forward(rng):
    model = _small_dcn(rng)
    ids = np.array([[0, 40, 2047], [33, 40, 7]])
    seq = p64(rng, 2, 5)
    return (lambda: weighted(model(ids, seq), rng)), [seq] + model.parameters()


def _seq_model(rng):
    cfg = se.SeqModelConfig(max_len=6, hidden_dim=8, num_layers=1, num_heads=2, embedding_dim=4,
                            dropout=0.0, attn_dropout=0.0, muve_vocab=128)
    model = se.SeqEncoder(cfg, seed=2, dtype=np.float64)
    from conftest import random_history
    h = random_history(np.random.default_rng(11), n=6)
    feats = se.event_features(h)
    feats = {k: v[None] for k, v in feats.items()}
    return (lambda: weighted(model(feats), rng)), model.parameters()


CASES = {
    "add": _binary(F.add), "sub": _binary(F.sub), "mul": _binary(F.mul),
    "div": _binary(F.div, positive_b=True),
    "pow": _unary(lambda x: F.pow_scalar(x, 3.0)),
    "exp": _unary(F.exp), "log": _unary(F.log, positive=True),
    "sqrt": _unary(F.sqrt, positive=True), "tanh": _unary(F.tanh),
    "sigmoid": _unary(F.sigmoid), "log_sigmoid": _unary(F.log_sigmoid), "gelu": _unary(F.gelu),
    "softmax": _unary(lambda x: F.softmax(x, axis=-1)),
    "log_softmax": _unary(lambda x: F.log_softmax(x, axis=-1)),
    "logsumexp": _unary(lambda x: F.logsumexp(x, axis=-1)),
    "l2_normalize": _unary(F.l2_normalize),
    "reductions": _reductions, "reshape_transpose": _reshape_transpose,
    "getitem_slice": _getitem_slice, "getitem_fancy": _getitem_fancy,
    "concat": _concat, "stack": _stack, "matmul": _matmul, "masked_fill": _masked_fill,
    "rms_norm": _rms_norm, "layer_norm": _layer_norm,
    "embedding_dense": _embedding(False), "embedding_sparse": _embedding(True),
    "dropout": _dropout, "causal_attention": _attention,
    "linear": _module(lambda r: Linear(4, 3, r), (2, 4)),
    "rmsnorm_module": _module(lambda r: RMSNorm(4), (2, 4)),
    "layernorm_module": _module(lambda r: LayerNorm(4), (2, 4)),
    "mha": _module(lambda r: CausalSelfAttention(4, 2, r), (2, 3, 4)),
    "transformer_block": _module(lambda r: TransformerBlock(4, 2, r), (1, 3, 4)),
    "mlp3": _mlp3,
    "muve_lookup": _muve, "text_bag": _text_bag, "ple_embedding": _ple_embedding,
    "loss_netp": _netp, "loss_netp_logits": _netp_logits, "loss_tdp": _tdp, "loss_nup": _nup,
    "loss_nip": _nip, "loss_seq_total": _seq_total, "twhin_bce": _twhin_bce,
    "twhin_logits_bce": _twhin, "multitask": _multitask, "contrastive": _contrastive,
    "cross_layer": _cross_layer, "seq_projection": _seq_projection, "dcn_forward": _dcn_forward,
    "seq_encoder_forward": _seq_model,
}


def _probe_coords(g: np.ndarray, rng) -> np.ndarray:
    """Half the probes on coordinates with nonzero gradient, the rest anywhere.

    Embedding tables are mostly untouched rows; probing only at random
    would compare zeros with zeros.
    """
    flat = g.reshape(-1)
    n = min(N_PROBES, flat.size)
    live = np.flatnonzero(flat)
    hit = rng.choice(live, size=min(n // 2, live.size), replace=False) if live.size else live
    rest = np.setdiff1d(np.arange(flat.size), hit)
    return np.concatenate([hit, rng.choice(rest, size=n - hit.size, replace=False)])


def _check(loss_fn, numeric_fn, inputs, seed: int, h: float = 1e-5) -> float:
    for t in inputs:
        t.grad = None
    loss_fn().backward()
    analytic = [dense_grad(t).copy() for t in inputs]
    probe_rng = np.random.default_rng(seed)
    worst = 0.0
    for t, g in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        for j in _probe_coords(g, probe_rng):
            orig = flat[j]
            flat[j] = orig + h
            up = numeric_fn().item()
            flat[j] = orig - h
            down = numeric_fn().item()
            flat[j] = orig
            worst = max(worst, rel_error(float(g.reshape(-1)[j]), (up - down) / (2 * h)))
    for t in inputs:
        t.grad = None
    return worst


def worst_error(name: str, seed: int = 0) -> float:
    """Max relative error over ``N_PROBES`` random coordinates of every input."""
    built = CASES[name](np.random.default_rng(seed))
    loss_fn, inputs = built[0], built[1]
    for t in inputs:
        assert t.dtype == np.float64, f"{name}: gradcheck needs float64 inputs"
    numeric_fn = built[2]() if len(built) > 2 else loss_fn
    return _check(loss_fn, numeric_fn, inputs, seed + 1)
