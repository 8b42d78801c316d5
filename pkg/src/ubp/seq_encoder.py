"""Heterogeneous causal-transformer sequential encoder and its four objectives.

Each event embedding is the sum of a content embedding (price bin, text bag,
hashed SKU/category/URL lookups, projected) and a context embedding (event
type, position, day of week, hour, and two projected log time gaps). A
causal transformer runs over the chunk; the last hidden state is the user
embedding. Training combines next-event-type, time-delta, next-URL and
next-item prediction.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .encoders import HashedEmbeddingTable, TextBag, muve_lookup, text_bag
from .events import (EMB_LEN, ITEM_TYPES, N_EVENT_TYPES, N_PRICE_BUCKETS, SECONDS_PER_DAY,
                     EventType, UserHistory)
from .nn import (Adam, Embedding, F, LayerNorm, Linear, Module, Parameter, Tensor,
                 TransformerBlock, clip_global_norm, no_grad, warmup_constant_lr)

log = logging.getLogger(__name__)

N_POSITIONS = 256
_ITEM_CODES = np.array(sorted(int(t) for t in ITEM_TYPES))
_PAGE = int(EventType.PAGE_VISIT)


@dataclass
class SeqModelConfig:
    max_len: int = 32
    hidden_dim: int = 64
    num_layers: int = 2
    num_heads: int = 0  # 0 -> max(1, hidden_dim // 64)
    embedding_dim: int = 32
    dropout: float = 0.1
    attn_dropout: float = 0.1
    ffn_mult: int = 4
    muve_vocab: int = 524288
    hash_seeds: tuple = (17, 29)
    n_inbatch_neg: int = 128
    n_uniform_neg: int = 128
    init_tau: float = 0.1
    objectives: tuple = ("netp", "tdp", "nup", "nip")

    def __post_init__(self):
        if self.num_heads <= 0:
            self.num_heads = max(1, self.hidden_dim // 64)
        if min(self.max_len, self.hidden_dim, self.num_layers, self.embedding_dim) <= 0:
            raise ValueError("model dimensions must be positive")
        if self.hidden_dim % self.num_heads:
            raise ValueError("num_heads must divide hidden_dim")
        if self.max_len > N_POSITIONS:
            raise ValueError(f"max_len is capped by the {N_POSITIONS}-row position table")
        self.hash_seeds = tuple(self.hash_seeds)
        self.objectives = tuple(self.objectives)

    @classmethod
    def paper(cls) -> "SeqModelConfig":
        return cls(max_len=256, hidden_dim=1024, num_layers=20, embedding_dim=256,
                   n_inbatch_neg=8192, n_uniform_neg=8192)


@dataclass
class SeqTrainConfig:
    steps: int = 500
    batch_size: int = 64
    lr_start: float = 1e-5
    lr_peak: float = 1e-3
    warmup_steps: int = 50
    clip_norm: float = 1.0

    @classmethod
    def paper(cls) -> "SeqTrainConfig":
        return cls(steps=10000, batch_size=8192, lr_start=1e-5, lr_peak=1e-4, warmup_steps=3000)


# -- featurisation -----------------------------------------------------------------
FEATURE_KEYS = ("etype", "price", "sku", "category", "url", "emb", "has_emb", "dow", "hour",
                "log_gap_hours", "log_age_days", "ts")


def event_features(h: UserHistory, start: int = 0, stop: int | None = None) -> dict[str, np.ndarray]:
    """Per-event model inputs for ``h.events[start:stop]``.

    Time context is measured inside the slice: the first event has a zero
    gap and every age counts from the slice's first event.
    """
    a = h.arrays
    sl = slice(start, stop)
    ts = a.ts[sl]
    gap = np.diff(ts, prepend=ts[:1]) / 3600.0 if len(ts) else np.zeros(0)
    age = (ts - ts[:1]) / SECONDS_PER_DAY if len(ts) else np.zeros(0)
    day = ts // SECONDS_PER_DAY
    return {
        "etype": a.etype[sl], "price": a.price[sl], "sku": a.sku[sl], "category": a.category[sl],
        "url": a.url[sl], "emb": a.emb[sl], "has_emb": a.has_emb[sl],
        "dow": (day + 3) % 7,  # 1970-01-01 was a Thursday; Monday = 0
        "hour": (ts % SECONDS_PER_DAY) // 3600,
        "log_gap_hours": np.log1p(np.maximum(gap, 0.0)),
        "log_age_days": np.log1p(np.maximum(age, 0.0)),
        "ts": ts,
    }


def _pad_stack(feats: list[dict], n: int) -> tuple[dict, np.ndarray]:
    b = len(feats)
    out = {}
    for key in FEATURE_KEYS:
        sample = feats[0][key]
        shape = (b, n) + sample.shape[1:]
        fill = -1 if key in ("price", "sku", "category", "url") else 0
        arr = np.full(shape, fill, dtype=sample.dtype)
        for i, f in enumerate(feats):
            arr[i, :len(f[key])] = f[key]
        out[key] = arr
    valid = np.zeros((b, n), dtype=bool)
    for i, f in enumerate(feats):
        valid[i, :len(f["etype"])] = True
    return out, valid


@dataclass
class SeqBatch:
    feats: dict
    valid: np.ndarray          # [B, N]
    has_next: np.ndarray       # [B, N] position has a target inside the chunk
    next_type: np.ndarray      # [B, N]
    delta: np.ndarray          # [B, N] log(1 + hours) to the next event
    item_pos: tuple            # (batch idx, position idx) of queries whose next event is an item
    item_target: dict          # sku, category, price, emb of those next events
    url_pos: tuple
    url_target: np.ndarray

    @property
    def y_onehot(self) -> np.ndarray:
        return np.eye(N_EVENT_TYPES)[self.next_type[self.has_next]]


def make_batch(chunks: list[dict], max_len: int) -> SeqBatch:
    feats, valid = _pad_stack(chunks, max_len)
    has_next = np.zeros_like(valid)
    has_next[:, :-1] = valid[:, 1:]
    nxt = np.zeros_like(feats["etype"])
    nxt[:, :-1] = feats["etype"][:, 1:]
    ts = feats["ts"].astype(np.float64)
    delta = np.zeros(valid.shape)
    delta[:, :-1] = np.log1p(np.maximum(ts[:, 1:] - ts[:, :-1], 0) / 3600.0)
    delta = np.where(has_next, delta, 0.0)
    is_item = has_next & np.isin(nxt, _ITEM_CODES)
    is_url = has_next & (nxt == _PAGE)
    ib, ip = np.nonzero(is_item)
    ub, up = np.nonzero(is_url)
    item_target = {k: feats[k][ib, ip + 1] for k in ("sku", "category", "price", "emb", "has_emb")}
    return SeqBatch(feats, valid, has_next, nxt, delta, (ib, ip), item_target, (ub, up),
                    feats["url"][ub, up + 1])


def history_chunks(h: UserHistory, max_len: int) -> list[tuple[int, int]]:
    """Non-overlapping (start, stop) chunks of ``max_len`` events; singletons dropped."""
    n = len(h)
    return [(s, min(s + max_len, n)) for s in range(0, n, max_len) if min(s + max_len, n) - s >= 2]


# -- sampled softmax losses -----------------------------------------------------------
@dataclass
class SampledSoftmaxBatch:
    query: Tensor              # [M, E] g(u)
    positive: Tensor           # [M, E] h(p)
    negatives: Tensor          # [K, E] h(d_i), shared by all queries
    log_tau: Tensor            # scalar-shaped log temperature
    logq: np.ndarray | None = None        # [K] or [M, K]
    neg_mask: np.ndarray | None = None    # [M, K] True where a negative must be ignored


def _cosine_logits(b: SampledSoftmaxBatch) -> tuple[Tensor, Tensor]:
    g = F.l2_normalize(b.query)
    hp = F.l2_normalize(b.positive)
    hn = F.l2_normalize(b.negatives)
    inv_tau = F.exp(-b.log_tau)
    pos = (g * hp).sum(axis=-1) * inv_tau
    neg = F.matmul(g, F.transpose(hn)) * inv_tau
    return pos, neg


def sampled_softmax_nll(pos_logits: Tensor, neg_logits: Tensor, neg_mask=None) -> Tensor:
    """Mean of -log(e^pos / (e^pos + sum e^neg)) over rows."""
    if neg_mask is not None:
        neg_logits = F.masked_fill(neg_logits, neg_mask, -1e30)
    allp = F.concat([F.reshape(pos_logits, (-1, 1)), neg_logits], axis=-1)
    return (F.logsumexp(allp, axis=-1) - pos_logits).mean()


def logq_weighted_nll(pos_logits: Tensor, neg_logits: Tensor, logq, neg_mask=None) -> Tensor:
    """Mean of -w * log P(p|u) with logQ-corrected negatives.

    P(p|u) = e^pos / (e^pos + sum_n e^(neg_n - logQ_n)), the positive term is
    left uncorrected, and w = stop_gradient(1 - P(p|u)).
    """
    logq = np.asarray(logq, dtype=neg_logits.dtype)
    if not np.all(np.isfinite(logq)):
        raise ValueError("logQ must be finite")
    corrected = neg_logits - Tensor(logq)
    if neg_mask is not None:
        corrected = F.masked_fill(corrected, neg_mask, -1e30)
    allp = F.concat([F.reshape(pos_logits, (-1, 1)), corrected], axis=-1)
    log_p = pos_logits - F.logsumexp(allp, axis=-1)
    w = F.stop_gradient(1.0 - F.exp(log_p))
    return (-(w * log_p)).mean()


def loss_nup(b: SampledSoftmaxBatch) -> Tensor:
    pos, neg = _cosine_logits(b)
    return sampled_softmax_nll(pos, neg, b.neg_mask)


def loss_nip(b: SampledSoftmaxBatch) -> Tensor:
    pos, neg = _cosine_logits(b)
    logq = np.zeros(b.negatives.shape[0]) if b.logq is None else b.logq
    return logq_weighted_nll(pos, neg, logq, b.neg_mask)


def loss_netp(y, y_hat: Tensor, tol: float = 1e-5) -> Tensor:
    """Mean over positions of -sum_k y_k log y_hat_k; ``y_hat`` rows are probabilities."""
    y = np.asarray(y, dtype=y_hat.dtype)
    if np.any(np.abs(y_hat.data.sum(axis=-1) - 1.0) > tol) or np.any(y_hat.data < 0):
        raise ValueError("y_hat rows must be probability distributions")
    return (-(Tensor(y) * F.log(y_hat)).sum(axis=-1)).mean()


def loss_netp_logits(y, logits: Tensor) -> Tensor:
    y = np.asarray(y, dtype=logits.dtype)
    return (-(Tensor(y) * F.log_softmax(logits, axis=-1)).sum(axis=-1)).mean()


def loss_tdp(delta, delta_hat: Tensor) -> Tensor:
    delta = np.asarray(delta, dtype=delta_hat.dtype)
    if delta.shape != delta_hat.shape:
        raise ValueError(f"length mismatch: {delta.shape} vs {delta_hat.shape}")
    diff = delta_hat - Tensor(delta)
    return (diff * diff).mean()


def loss_seq_total(netp=None, tdp=None, nip=None, nup=None) -> Tensor:
    """Sum of the available objective terms; a missing (empty) term adds 0."""
    terms = [t for t in (netp, tdp, nip, nup) if t is not None]
    if not terms:
        raise ValueError("no loss terms")
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total


# -- model ------------------------------------------------------------------------------
class ItemCatalog:
    """SKU attributes (last seen) used to embed uniformly sampled negatives."""

    def __init__(self, histories):
        attrs: dict[int, tuple] = {}
        for h in histories:
            a = h.arrays
            m = np.isin(a.etype, _ITEM_CODES)
            for s, c, p, e, he in zip(a.sku[m], a.category[m], a.price[m], a.emb[m], a.has_emb[m]):
                attrs[int(s)] = (int(c), int(p), e, bool(he))
        self.sku = np.array(sorted(attrs), dtype=np.int64)
        self.category = np.array([attrs[s][0] for s in self.sku], dtype=np.int64)
        self.price = np.array([attrs[s][1] for s in self.sku], dtype=np.int64)
        self.emb = (np.stack([attrs[s][2] for s in self.sku]) if len(self.sku)
                    else np.zeros((0, EMB_LEN), dtype=np.int64))
        self.has_emb = np.array([attrs[s][3] for s in self.sku], dtype=bool)

    def __len__(self) -> int:
        return len(self.sku)

    def take(self, idx) -> dict:
        return {"sku": self.sku[idx], "category": self.category[idx], "price": self.price[idx],
                "emb": self.emb[idx], "has_emb": self.has_emb[idx]}


def _mask(arr: np.ndarray, dtype) -> Tensor:
    return Tensor(arr.astype(dtype)[..., None])


class SeqEncoder(Module):
    def __init__(self, cfg: SeqModelConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        self.rng = rng
        e, h = cfg.embedding_dim, cfg.hidden_dim
        self.price_emb = Embedding(N_PRICE_BUCKETS, e, rng, dtype=dtype)
        self.text = TextBag(e, rng, dtype=dtype)
        self.muve = HashedEmbeddingTable(e, rng, vocab=cfg.muve_vocab, seeds=cfg.hash_seeds,
                                         dtype=dtype)
        self.content_proj = Linear(3 * e, e, rng, dtype=dtype)
        self.type_emb = Embedding(N_EVENT_TYPES, e, rng, dtype=dtype)
        self.pos_emb = Embedding(N_POSITIONS, e, rng, dtype=dtype)
        self.dow_emb = Embedding(7, e, rng, dtype=dtype)
        self.hour_emb = Embedding(24, e, rng, dtype=dtype)
        self.gap_proj = Linear(1, e, rng, dtype=dtype)
        self.age_proj = Linear(1, e, rng, dtype=dtype)
        self.input_proj = Linear(e, h, rng, dtype=dtype)
        self.blocks = [TransformerBlock(h, cfg.num_heads, rng, cfg.dropout, cfg.attn_dropout,
                                        cfg.ffn_mult, dtype=dtype) for _ in range(cfg.num_layers)]
        self.final_norm = LayerNorm(h, dtype=dtype)
        self.netp_head = Linear(h, N_EVENT_TYPES, rng, dtype=dtype)
        self.tdp_head = Linear(h, 1, rng, dtype=dtype)
        self.item_query = Linear(h, e, rng, dtype=dtype)
        self.url_query = Linear(h, e, rng, dtype=dtype)
        self.item_out = Linear(e, e, rng, dtype=dtype)
        self.url_out = Linear(e, e, rng, dtype=dtype)
        self.log_tau_item = Parameter(np.full(1, math.log(cfg.init_tau), dtype=dtype))
        self.log_tau_url = Parameter(np.full(1, math.log(cfg.init_tau), dtype=dtype))

    # content pathway, shared by events and prediction targets
    def content(self, price, emb, has_emb, sku, category, url) -> Tensor:
        dt = self.dtype
        price = np.asarray(price)
        has_price = price >= 0
        price_e = F.embedding(self.price_emb.weight, np.where(has_price, price, 0))
        price_e = price_e * _mask(has_price, dt)
        text_e = text_bag(np.asarray(emb), self.text) * _mask(np.asarray(has_emb), dt)
        rows, present = [], []
        for ns, ids in (("sku", sku), ("category", category), ("url", url)):
            ids = np.asarray(ids)
            ok = ids >= 0
            h1, h2 = self.muve.rows(ns, np.where(ok, ids, 0))
            rows += [h1, h2]
            present += [ok, ok]
        gathered = F.embedding(self.muve.weight, np.stack(rows, axis=-1))
        muve_e = (gathered * _mask(np.stack(present, axis=-1), dt)).sum(axis=-2)
        return self.content_proj(F.concat([price_e, text_e, muve_e], axis=-1))

    def event_embedding(self, feats: dict) -> Tensor:
        """Content plus context embedding, ``[..., embedding_dim]``."""
        dt = self.dtype
        content = self.content(feats["price"], feats["emb"], feats["has_emb"], feats["sku"],
                               feats["category"], feats["url"])
        etype = np.asarray(feats["etype"])
        pos = np.broadcast_to(np.arange(etype.shape[-1]), etype.shape)
        ctx = (F.embedding(self.type_emb.weight, etype) + F.embedding(self.pos_emb.weight, pos)
               + F.embedding(self.dow_emb.weight, feats["dow"])
               + F.embedding(self.hour_emb.weight, feats["hour"])
               + self.gap_proj(Tensor(np.asarray(feats["log_gap_hours"], dtype=dt)[..., None]))
               + self.age_proj(Tensor(np.asarray(feats["log_age_days"], dtype=dt)[..., None])))
        return content + ctx

    def forward(self, feats: dict) -> Tensor:
        """Hidden states ``[B, N, hidden_dim]`` of a right-padded batch."""
        x = self.input_proj(self.event_embedding(feats))
        for blk in self.blocks:
            x = blk(x)
        return self.final_norm(x)

    def item_embedding(self, t: dict) -> Tensor:
        none = np.full(len(t["sku"]), -1)
        return self.item_out(self.content(t["price"], t["emb"], t["has_emb"], t["sku"],
                                          t["category"], none))

    def url_embedding(self, urls) -> Tensor:
        urls = np.asarray(urls)
        none = np.full(len(urls), -1)
        emb0 = np.zeros((len(urls), EMB_LEN), dtype=np.int64)
        return self.url_out(self.content(none, emb0, np.zeros(len(urls), bool), none, none, urls))

    # -- objectives --------------------------------------------------------------
    def loss_terms(self, batch: SeqBatch, catalog: ItemCatalog,
                   rng: np.random.Generator) -> dict[str, Tensor]:
        cfg = self.cfg
        hidden = self(batch.feats)
        hb, hp = np.nonzero(batch.has_next)
        terms: dict[str, Tensor] = {}
        if len(hb) == 0:
            return terms
        states = hidden[hb, hp]
        if "netp" in cfg.objectives:
            terms["netp"] = loss_netp_logits(batch.y_onehot, self.netp_head(states))
        if "tdp" in cfg.objectives:
            pred = F.reshape(self.tdp_head(states), (-1,))
            terms["tdp"] = loss_tdp(batch.delta[hb, hp], pred)
        ib, ip = batch.item_pos
        if "nip" in cfg.objectives and len(ib) and len(catalog):
            terms["nip"] = loss_nip(self._nip_batch(hidden[ib, ip], batch.item_target, catalog, rng))
        ub, up = batch.url_pos
        if "nup" in cfg.objectives and len(ub):
            q = self.url_query(hidden[ub, up])
            pos_urls = batch.url_target
            neg_idx = rng.integers(0, len(pos_urls), cfg.n_inbatch_neg)
            neg_urls = pos_urls[neg_idx]
            table = self.url_embedding(np.concatenate([pos_urls, neg_urls]))
            m = len(pos_urls)
            terms["nup"] = loss_nup(SampledSoftmaxBatch(
                q, table[:m], table[m:], self.log_tau_url,
                neg_mask=pos_urls[:, None] == neg_urls[None, :]))
        return terms

    def _nip_batch(self, states: Tensor, target: dict, catalog: ItemCatalog,
                   rng: np.random.Generator) -> SampledSoftmaxBatch:
        cfg = self.cfg
        m = len(target["sku"])
        n_in, n_uni = cfg.n_inbatch_neg, cfg.n_uniform_neg
        in_idx = rng.integers(0, m, n_in)
        uni_idx = rng.integers(0, len(catalog), n_uni)
        negs = {k: np.concatenate([target[k][in_idx], catalog.take(uni_idx)[k]])
                for k in ("sku", "category", "price", "emb", "has_emb")}
        # mixture proposal: in-batch unigram frequency and uniform catalogue
        skus, counts = np.unique(target["sku"], return_counts=True)
        freq = np.zeros(len(negs["sku"]))
        hit = np.searchsorted(skus, negs["sku"])
        hit = np.clip(hit, 0, len(skus) - 1)
        found = skus[hit] == negs["sku"]
        freq[found] = counts[hit[found]] / m
        share_in = n_in / (n_in + n_uni)
        q = share_in * freq + (1 - share_in) / len(catalog)
        both = {k: np.concatenate([target[k], negs[k]]) for k in negs}
        emb = self.item_embedding(both)
        return SampledSoftmaxBatch(self.item_query(states), emb[:m], emb[m:], self.log_tau_item,
                                   logq=np.log(q),
                                   neg_mask=target["sku"][:, None] == negs["sku"][None, :])

    # -- inference ----------------------------------------------------------------
    def encode_histories(self, histories: list[UserHistory], batch_size: int = 256):
        """User embeddings from the most recent ``max_len`` events of each history."""
        n = self.cfg.max_len
        was_training = self.training
        self.eval()
        out = np.zeros((len(histories), self.cfg.hidden_dim), dtype=self.dtype)
        with no_grad():
            for s in range(0, len(histories), batch_size):
                hs = histories[s:s + batch_size]
                if any(len(h) == 0 for h in hs):
                    raise ValueError("cannot encode an empty history")
                feats, valid = _pad_stack([event_features(h, max(0, len(h) - n)) for h in hs], n)
                hidden = self(feats).data
                last = valid.sum(axis=1) - 1
                out[s:s + len(hs)] = hidden[np.arange(len(hs)), last]
        self.train(was_training)
        return out


def encode_history(model: SeqEncoder, h: UserHistory) -> tuple[np.ndarray, np.ndarray]:
    """(hidden states of the last N events, user embedding = final hidden state)."""
    if len(h) == 0:
        raise ValueError("cannot encode an empty history")
    n = model.cfg.max_len
    was_training = model.training
    model.eval()
    with no_grad():
        feats, _ = _pad_stack([event_features(h, max(0, len(h) - n))], min(n, len(h)))
        hidden = model(feats).data[0]
    model.train(was_training)
    return hidden, hidden[-1]


# -- training --------------------------------------------------------------------------
@dataclass
class TrainLog:
    steps: list[int] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)
    terms: list[dict] = field(default_factory=list)


def train_seq_encoder(histories: dict[int, UserHistory] | list[UserHistory],
                      cfg: SeqModelConfig, tcfg: SeqTrainConfig, seed: int = 0,
                      model: SeqEncoder | None = None) -> tuple[SeqEncoder, TrainLog]:
    hs = list(histories.values()) if isinstance(histories, dict) else list(histories)
    chunks = [(h, s, e) for h in hs for s, e in history_chunks(h, cfg.max_len)]
    if not chunks:
        raise ValueError("no training chunks (every history has fewer than two events)")
    rng = np.random.default_rng(seed + 1)
    model = model or SeqEncoder(cfg, seed=seed)
    model.rng.bit_generator.state = np.random.default_rng(seed + 2).bit_generator.state
    model.train()
    catalog = ItemCatalog(hs)
    opt = Adam([{"params": model.parameters(), "lr": tcfg.lr_peak}])
    trace = TrainLog()
    order = rng.permutation(len(chunks))
    cursor = 0
    for step in range(tcfg.steps):
        if cursor + tcfg.batch_size > len(order):
            order = rng.permutation(len(chunks))
            cursor = 0
        pick = order[cursor:cursor + tcfg.batch_size]
        cursor += len(pick)
        batch = make_batch([event_features(*_chunk(chunks[i])) for i in pick], cfg.max_len)
        terms = model.loss_terms(batch, catalog, rng)
        if not terms:
            continue
        loss = loss_seq_total(**terms)
        opt.zero_grad()
        loss.backward()
        clip_global_norm(opt.params, tcfg.clip_norm)
        opt.step(lr=warmup_constant_lr(step, tcfg.lr_start, tcfg.lr_peak, tcfg.warmup_steps))
        trace.steps.append(step)
        trace.loss.append(loss.item())
        trace.terms.append({k: v.item() for k, v in terms.items()})
        if step % 50 == 0:
            log.info("seq step %d loss %.4f %s", step, loss.item(),
                     {k: round(v.item(), 4) for k, v in terms.items()})
    model.eval()
    return model, trace


def _chunk(c):
    h, s, e = c
    return h, s, e


def config_dict(cfg) -> dict:
    return asdict(cfg)
