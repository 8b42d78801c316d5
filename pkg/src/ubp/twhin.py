"""Bipartite user-item graph embeddings trained by in-batch link prediction."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .events import EventType, UserHistory
from .nn import Adam, Embedding, F, Linear, Module, Tensor, clip_global_norm, no_grad

log = logging.getLogger(__name__)


class EdgeType(IntEnum):
    PURCHASE = 0
    ADD_TO_CART = 1


_EDGE_OF_EVENT = {int(EventType.PURCHASE): EdgeType.PURCHASE,
                  int(EventType.ADD_TO_CART): EdgeType.ADD_TO_CART}
_EDGE_NAMES = {EdgeType.PURCHASE: "purchase", EdgeType.ADD_TO_CART: "add_to_cart"}


@dataclass(frozen=True)
class EdgeSet:
    user: np.ndarray
    item: np.ndarray
    etype: np.ndarray

    def __post_init__(self):
        if not (len(self.user) == len(self.item) == len(self.etype)):
            raise ValueError("edge arrays must have equal length")

    def __len__(self) -> int:
        return len(self.user)

    def take(self, idx) -> "EdgeSet":
        return EdgeSet(self.user[idx], self.item[idx], self.etype[idx])

    def of_types(self, types) -> "EdgeSet":
        return self.take(np.isin(self.etype, [int(t) for t in types]))

    def write_csv(self, stream) -> None:
        w = csv.writer(stream, lineterminator="\n")
        w.writerow(["user_id", "item_id", "edge_type"])
        for u, i, t in zip(self.user.tolist(), self.item.tolist(), self.etype.tolist()):
            w.writerow([u, i, _EDGE_NAMES[EdgeType(t)]])

    @classmethod
    def read_csv(cls, stream) -> "EdgeSet":
        by_name = {v: int(k) for k, v in _EDGE_NAMES.items()}
        rows = list(csv.DictReader(stream))
        return cls(np.array([int(r["user_id"]) for r in rows], dtype=np.int64),
                   np.array([int(r["item_id"]) for r in rows], dtype=np.int64),
                   np.array([by_name[r["edge_type"]] for r in rows], dtype=np.int64))

    def to_csv_string(self) -> str:
        buf = io.StringIO()
        self.write_csv(buf)
        return buf.getvalue()


def build_graph(histories: dict[int, UserHistory], types=(EdgeType.PURCHASE, EdgeType.ADD_TO_CART)
                ) -> EdgeSet:
    """One edge per add/purchase event, ordered by user id then event order."""
    keep = {int(t) for t in types}
    users, items, etypes = [], [], []
    for uid in sorted(histories):
        a = histories[uid].arrays
        is_edge = np.isin(a.etype, list(_EDGE_OF_EVENT)) & (a.sku >= 0)
        et = np.array([int(_EDGE_OF_EVENT[int(c)]) for c in a.etype[is_edge]], dtype=np.int64)
        sel = np.isin(et, list(keep))
        users.append(np.full(int(sel.sum()), uid, dtype=np.int64))
        items.append(a.sku[is_edge][sel].astype(np.int64))
        etypes.append(et[sel])
    cat = (lambda xs: np.concatenate(xs) if xs else np.zeros(0, dtype=np.int64))
    return EdgeSet(cat(users), cat(items), cat(etypes))


def select_users(edges: EdgeSet, required, max_users: int | None = None) -> np.ndarray:
    """Required users plus the most active remaining users by edge count (ties by id)."""
    required = np.unique(np.asarray(list(required), dtype=np.int64))
    uids, counts = np.unique(edges.user, return_counts=True)
    rest = ~np.isin(uids, required)
    order = np.lexsort((uids[rest], -counts[rest]))
    extra = uids[rest][order]
    if max_users is not None:
        extra = extra[:max(0, max_users - len(required))]
    return np.sort(np.concatenate([required, extra]))


def popular_items(edges: EdgeSet, k: int) -> np.ndarray:
    items, counts = np.unique(edges.item, return_counts=True)
    order = np.lexsort((items, -counts))
    return items[order][:k]


@dataclass
class TwhinConfig:
    dim: int = 32
    dropout: float = 0.3
    top_k_items: int = 1000
    steps: int = 500
    batch_size: int = 256
    lr: float = 1e-3
    clip_norm: float = 1.0
    init_std: float = 0.1
    item_source: str = "id"  # "id" | "pretrained"
    logit_scale: float = 1.0

    def __post_init__(self):
        if self.dim <= 0 or self.top_k_items <= 0 or self.batch_size < 2:
            raise ValueError("twhin dims/top_k must be positive and batch_size >= 2")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")
        if self.item_source not in ("id", "pretrained"):
            raise ValueError("item_source must be 'id' or 'pretrained'")

    @classmethod
    def paper(cls) -> "TwhinConfig":
        return cls(dim=256, top_k_items=1_000_000, batch_size=4096)


# -- scoring --------------------------------------------------------------------------
def twhin_score(u, item, edge) -> float:
    """<normalize(u), normalize(item + edge)> for plain vectors (no dropout)."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(item, dtype=np.float64) + np.asarray(edge, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ValueError("cannot normalize a zero-norm vector")
    return float(u @ v / (nu * nv))


def twhin_logits(users: Tensor, items: Tensor, edge_table: Tensor, etypes) -> Tensor:
    """``[B, B]`` logits; row i scores user i against every item j with row i's edge type."""
    etypes = np.asarray(etypes)
    u = F.l2_normalize(users)
    out = None
    for t in np.unique(etypes):
        v = F.l2_normalize(items + edge_table[int(t)])
        part = F.matmul(u, F.transpose(v)) * Tensor((etypes == t).astype(users.dtype)[:, None])
        out = part if out is None else out + part
    return out


def twhin_loss(logits: Tensor) -> Tensor:
    """-(1/B) sum_i [log s(l_ii) + sum_{j!=i} log(1 - s(l_ij))]."""
    b = logits.shape[0]
    if logits.ndim != 2 or logits.shape[1] != b:
        raise ValueError("logits must be square [B, B]")
    if b < 2:
        raise ValueError("a batch of 1 has no in-batch negatives")
    eye = np.eye(b, dtype=bool)
    pos = F.log_sigmoid(logits) * Tensor(eye.astype(logits.dtype))
    neg = F.log_sigmoid(-logits) * Tensor((~eye).astype(logits.dtype))
    return -(pos + neg).sum() / b


# -- model ------------------------------------------------------------------------------
class IdItemTable(Module):
    """ID embeddings for the top-K items plus one shared out-of-vocabulary row."""

    def __init__(self, vocab: np.ndarray, dim: int, rng: np.random.Generator, std: float):
        self.vocab = np.sort(np.asarray(vocab, dtype=np.int64))
        self.table = Embedding(len(self.vocab) + 1, dim, rng, std=std)

    @property
    def oov(self) -> int:
        return len(self.vocab)

    def index(self, items) -> np.ndarray:
        items = np.asarray(items, dtype=np.int64)
        pos = np.clip(np.searchsorted(self.vocab, items), 0, max(len(self.vocab) - 1, 0))
        hit = (self.vocab[pos] == items) if len(self.vocab) else np.zeros(len(items), bool)
        return np.where(hit, pos, self.oov)

    def forward(self, items) -> Tensor:
        return self.table(self.index(items))


class PretrainedItemEncoder(Module):
    """Item vectors from a sequential encoder's item pathway, fine-tuned here."""

    def __init__(self, seq_model, catalog, dim: int, rng: np.random.Generator):
        self.seq = seq_model
        self.catalog = catalog
        self.proj = (Linear(seq_model.cfg.embedding_dim, dim, rng)
                     if seq_model.cfg.embedding_dim != dim else None)

    def forward(self, items) -> Tensor:
        items = np.asarray(items, dtype=np.int64)
        pos = np.searchsorted(self.catalog.sku, items)
        if np.any(pos >= len(self.catalog)) or np.any(self.catalog.sku[np.minimum(
                pos, len(self.catalog) - 1)] != items):
            raise KeyError("item missing from the pretrained encoder's catalogue")
        v = self.seq.item_embedding(self.catalog.take(pos))
        return self.proj(v) if self.proj is not None else v


class TwhinModel(Module):
    def __init__(self, user_ids, item_encoder: Module, cfg: TwhinConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.user_ids = np.sort(np.asarray(user_ids, dtype=np.int64))
        self.users = Embedding(len(self.user_ids), cfg.dim, rng, std=cfg.init_std)
        self.items = item_encoder
        self.edges = Embedding(len(EdgeType), cfg.dim, rng, std=cfg.init_std)
        self.rng = rng

    def user_index(self, uids) -> np.ndarray:
        uids = np.asarray(uids, dtype=np.int64)
        pos = np.searchsorted(self.user_ids, uids)
        if np.any(pos >= len(self.user_ids)) or np.any(self.user_ids[np.minimum(
                pos, len(self.user_ids) - 1)] != uids):
            raise KeyError("edge references an unselected user")
        return pos

    def _drop(self, x: Tensor) -> Tensor:
        if not self.training or self.cfg.dropout == 0:
            return x
        p = self.cfg.dropout
        keep = self.rng.random(x.shape) >= p
        # a row that lost every coordinate cannot be normalised; redraw it
        dead = ~keep.any(axis=1)
        while dead.any():
            keep[dead] = self.rng.random((int(dead.sum()), x.shape[1])) >= p
            dead = ~keep.any(axis=1)
        return x * Tensor((keep / (1.0 - p)).astype(x.dtype))

    def logits(self, edges: EdgeSet) -> Tensor:
        u = self._drop(self.users(self.user_index(edges.user)))
        v = self._drop(self.items(edges.item))
        logits = twhin_logits(u, v, self.edges.weight, edges.etype)
        return logits * self.cfg.logit_scale if self.cfg.logit_scale != 1.0 else logits

    def score(self, users, items, etype: int) -> np.ndarray:
        """Eval-mode logits for aligned (user, item) pairs."""
        with no_grad():
            u = F.l2_normalize(self.users(self.user_index(users))).data
            v = F.l2_normalize(self.items(np.asarray(items)) + self.edges.weight[int(etype)]).data
        return (u * v).sum(axis=1)

    def user_embeddings(self) -> tuple[np.ndarray, np.ndarray]:
        return self.user_ids.copy(), self.users.weight.data.copy()


def make_twhin(edges: EdgeSet, user_ids, cfg: TwhinConfig, seed: int,
               seq_model=None, catalog=None) -> TwhinModel:
    rng = np.random.default_rng(seed)
    if cfg.item_source == "pretrained":
        if seq_model is None or catalog is None:
            raise ValueError("pretrained item mode needs a sequential encoder and catalogue")
        items = PretrainedItemEncoder(seq_model, catalog, cfg.dim, rng)
    else:
        items = IdItemTable(popular_items(edges, cfg.top_k_items), cfg.dim, rng, cfg.init_std)
    return TwhinModel(user_ids, items, cfg, rng)


def train_twhin(edges: EdgeSet, model: TwhinModel, seed: int = 0) -> list[float]:
    """Constant-lr Adam over shuffled in-batch edge batches; returns per-step losses."""
    cfg = model.cfg
    if len(edges) == 0:
        raise ValueError("empty edge set")
    if len(edges) < 2:
        raise ValueError("need at least two edges for in-batch negatives")
    rng = np.random.default_rng(seed + 1)
    opt = Adam([{"params": model.parameters(), "lr": cfg.lr}])
    model.train()
    losses = []
    order = rng.permutation(len(edges))
    cursor = 0
    bs = min(cfg.batch_size, len(edges))
    for step in range(cfg.steps):
        if cursor + bs > len(order):
            order = rng.permutation(len(edges))
            cursor = 0
        batch = edges.take(order[cursor:cursor + bs])
        cursor += bs
        loss = twhin_loss(model.logits(batch))
        opt.zero_grad()
        loss.backward()
        clip_global_norm(opt.params, cfg.clip_norm)
        opt.step()
        losses.append(loss.item())
        if step % 100 == 0:
            log.info("twhin step %d loss %.4f", step, losses[-1])
    model.eval()
    return losses


# -- planted graph --------------------------------------------------------------------
def planted_block_graph(seed: int, n_users: int = 400, n_items: int = 200,
                        buys_per_user: int = 6, adds_per_user: int = 10,
                        noise: float = 0.05) -> tuple[EdgeSet, np.ndarray, np.ndarray]:
    """Two user blocks and two item blocks; users interact within their own block.

    Half of each item block is "browse only": it receives cart additions but
    is never purchased, so only a graph with add edges can place it.
    """
    rng = np.random.default_rng(seed)
    user_block = np.arange(n_users) % 2
    item_block = np.arange(n_items) % 2
    buyable = (np.arange(n_items) // 2) % 2 == 0
    users, items, types = [], [], []
    for u in range(n_users):
        own = item_block == user_block[u]
        for etype, n, pool_mask in ((EdgeType.PURCHASE, buys_per_user, own & buyable),
                                    (EdgeType.ADD_TO_CART, adds_per_user, own)):
            for _ in range(n):
                if rng.random() < noise:
                    other = (~own) & (buyable if etype == EdgeType.PURCHASE else True)
                    pool = np.flatnonzero(other)
                else:
                    pool = np.flatnonzero(pool_mask)
                users.append(u)
                items.append(int(rng.choice(pool)))
                types.append(int(etype))
    edges = EdgeSet(np.array(users, dtype=np.int64), np.array(items, dtype=np.int64),
                    np.array(types, dtype=np.int64))
    return edges, user_block, item_block


def block_graph_experiment(seed: int, use_adds: bool = True, holdout: float = 0.2,
                           cfg: TwhinConfig | None = None) -> dict[str, float]:
    """Held-out edge AUC (all held-out edges and add edges only) vs cross-block negatives."""
    from .profile import auc_roc

    cfg = cfg or TwhinConfig(top_k_items=10_000)
    edges, ublock, iblock = planted_block_graph(seed)
    rng = np.random.default_rng(seed + 100)
    test = rng.random(len(edges)) < holdout
    train = edges.take(~test)
    held = edges.take(test)
    if not use_adds:
        train = train.of_types([EdgeType.PURCHASE])
    model = make_twhin(train, np.unique(edges.user), cfg, seed)
    train_twhin(train, model, seed)

    def scores(users, items, etypes) -> np.ndarray:
        out = np.zeros(len(users))
        for t in np.unique(etypes):
            m = etypes == t
            out[m] = model.score(users[m], items[m], t)
        return out

    def auc_for(pos: EdgeSet) -> float:
        neg_items = np.array([rng.choice(np.flatnonzero(iblock != ublock[u])) for u in pos.user])
        s_pos = scores(pos.user, pos.item, pos.etype)
        s_neg = scores(pos.user, neg_items, pos.etype)
        labels = np.r_[np.ones(len(s_pos)), np.zeros(len(s_neg))]
        return auc_roc(np.r_[s_pos, s_neg], labels)

    return {"auc_all": auc_for(held), "auc_add": auc_for(held.of_types([EdgeType.ADD_TO_CART]))}
