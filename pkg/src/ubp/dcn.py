"""Cross-network fusion of PLE-encoded features and sequential embeddings.

Input x0 = concat[per-feature PLE embeddings, projected sequential embedding].
Three low-rank cross layers each emit V^T x_l; their concatenation feeds a
densely connected MLP whose output is the fused user embedding. Training
uses churn and propensity heads plus an optional contrastive term between
two masked views of each user's history.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .encoders import PleBins, PleEmbedding, encode_ple_matrix
from .events import EventType, UserHistory
from .nn import (Adam, F, Linear, Module, Parameter, RMSNorm, Tensor, clip_global_norm,
                 no_grad)

log = logging.getLogger(__name__)
_PURCHASE = int(EventType.PURCHASE)


@dataclass
class DcnConfig:
    ple_dim: int = 2
    seq_hidden: int = 32
    seq_out: int = 16
    ranks: tuple = (16, 8, 8)
    dense_layers: int = 4
    dense_hidden: int = 64
    out_dim: int = 32
    top_k_skus: int = 100
    churn_rule: str = "no_purchase"  # "no_purchase" | "no_events"
    contrastive: bool = True
    contrastive_batch: int = 64
    mask_rate: float = 0.3
    init_tau: float = 0.1
    steps: int = 1000
    batch_size: int = 128
    lr_ple: float = 2e-4
    lr_cross: float = 5e-4
    lr_rest: float = 1e-3
    clip_norm: float = 1.0

    def __post_init__(self):
        self.ranks = tuple(int(r) for r in self.ranks)
        if len(self.ranks) != 3 or min(self.ranks) <= 0:
            raise ValueError("exactly three positive cross-layer ranks are required")
        if self.dense_layers < 1 or min(self.dense_hidden, self.out_dim, self.seq_out) <= 0:
            raise ValueError("dense dims must be positive")
        if self.churn_rule not in ("no_purchase", "no_events"):
            raise ValueError("churn_rule must be 'no_purchase' or 'no_events'")

    @classmethod
    def paper(cls) -> "DcnConfig":
        return cls(seq_hidden=128, seq_out=64, ranks=(64, 32, 32), out_dim=128, steps=25000,
                   batch_size=16384, contrastive_batch=8192)


# -- building blocks ------------------------------------------------------------------------
class SeqProjection(Module):
    """linear -> RMSNorm -> linear."""

    def __init__(self, n_in: int, hidden: int, n_out: int, rng: np.random.Generator, dtype=np.float32):
        self.n_in = n_in
        self.fc1 = Linear(n_in, hidden, rng, dtype=dtype)
        self.norm = RMSNorm(hidden, dtype=dtype)
        self.fc2 = Linear(hidden, n_out, rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.n_in:
            raise ValueError(f"expected {self.n_in}-dim sequential embeddings, got {x.shape[-1]}")
        return self.fc2(self.norm(self.fc1(x)))


def cross_layer(x0: Tensor, xl: Tensor, u: Tensor, v: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    """x_{l+1} = x0 * (U (V^T x_l) + b) + x_l on row vectors; also returns V^T x_l."""
    d = x0.shape[-1]
    if xl.shape != x0.shape or u.shape[0] != d or v.shape[0] != d or u.shape[1] != v.shape[1] \
            or b.shape != (d,):
        raise ValueError("cross layer shape mismatch")
    low = F.matmul(xl, v)
    return x0 * (F.matmul(low, F.transpose(u)) + b) + xl, low


class CrossLayer(Module):
    def __init__(self, d: int, rank: int, rng: np.random.Generator, dtype=np.float32):
        self.u = Parameter(rng.uniform(-1, 1, (d, rank)).astype(dtype) / np.sqrt(rank))
        self.v = Parameter(rng.uniform(-1, 1, (d, rank)).astype(dtype) / np.sqrt(d))
        self.b = Parameter(np.zeros(d, dtype=dtype))

    def forward(self, x0: Tensor, xl: Tensor) -> tuple[Tensor, Tensor]:
        return cross_layer(x0, xl, self.u, self.v, self.b)


class DenseNet(Module):
    """Each layer sees the concatenation of the input and all earlier layer outputs."""

    def __init__(self, n_in: int, hidden: int, n_out: int, n_layers: int, rng: np.random.Generator,
                 dtype=np.float32):
        self.layers = []
        width = n_in
        for i in range(n_layers):
            last = i == n_layers - 1
            self.layers.append(Linear(width, n_out if last else hidden, rng, dtype=dtype))
            width += hidden

    def forward(self, x: Tensor) -> Tensor:
        feats = [x]
        for i, layer in enumerate(self.layers):
            inp = feats[0] if len(feats) == 1 else F.concat(feats, axis=-1)
            out = layer(inp)
            if i == len(self.layers) - 1:
                return out
            feats.append(F.gelu(out))
        raise AssertionError("unreachable")


class DcnModel(Module):
    def __init__(self, n_features: int, seq_dim: int, n_skus: int, n_categories: int,
                 cfg: DcnConfig, seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.n_features = n_features
        self.ple = PleEmbedding(n_features, cfg.ple_dim, rng, dtype=dtype)
        self.seq_proj = SeqProjection(seq_dim, cfg.seq_hidden, cfg.seq_out, rng, dtype=dtype)
        d = n_features * cfg.ple_dim + cfg.seq_out
        self.cross = [CrossLayer(d, r, rng, dtype=dtype) for r in cfg.ranks]
        self.dense = DenseNet(sum(cfg.ranks), cfg.dense_hidden, cfg.out_dim, cfg.dense_layers, rng,
                              dtype=dtype)
        self.churn_head = Linear(cfg.out_dim, 1, rng, dtype=dtype)
        self.sku_head = Linear(cfg.out_dim, n_skus, rng, dtype=dtype)
        self.cat_head = Linear(cfg.out_dim, n_categories, rng, dtype=dtype)
        self.log_tau = Parameter(np.full(1, np.log(cfg.init_tau), dtype=dtype))

    @property
    def input_dim(self) -> int:
        return self.n_features * self.cfg.ple_dim + self.cfg.seq_out

    def forward(self, ple_ids: np.ndarray, seq_emb) -> Tensor:
        ple_ids = np.asarray(ple_ids)
        if ple_ids.ndim != 2 or ple_ids.shape[1] != self.n_features:
            raise ValueError(f"expected [B, {self.n_features}] PLE ids")
        seq = seq_emb if isinstance(seq_emb, Tensor) else Tensor(np.asarray(seq_emb, dtype=self.ple.table.dtype))
        x0 = F.concat([self.ple(ple_ids), self.seq_proj(seq)], axis=-1)
        xl, lows = x0, []
        for layer in self.cross:
            xl, low = layer(x0, xl)
            lows.append(low)
        return self.dense(F.concat(lows, axis=-1))

    def param_groups(self) -> list[dict]:
        cfg = self.cfg
        ple = self.ple.parameters()
        cross = [p for c in self.cross for p in c.parameters()]
        taken = {id(p) for p in ple + cross}
        rest = [p for p in self.parameters() if id(p) not in taken]
        return [{"params": ple, "lr": cfg.lr_ple}, {"params": cross, "lr": cfg.lr_cross},
                {"params": rest, "lr": cfg.lr_rest}]


# -- targets and augmentation -----------------------------------------------------------
@dataclass(frozen=True)
class DcnTargets:
    churn: int
    skus: frozenset = field(default_factory=frozenset)
    categories: frozenset = field(default_factory=frozenset)


def derive_targets(target: UserHistory | None, churn_rule: str = "no_purchase") -> DcnTargets:
    """Labels from one user's target-window events (``None`` means no events)."""
    if target is None or len(target) == 0:
        return DcnTargets(1)
    a = target.arrays
    buy = a.etype == _PURCHASE
    if churn_rule == "no_purchase":
        churn = int(not buy.any())
    elif churn_rule == "no_events":
        churn = 0
    else:
        raise ValueError(f"unknown churn rule {churn_rule!r}")
    skus = frozenset(int(s) for s in a.sku[buy] if s >= 0)
    cats = frozenset(int(c) for c in a.category[buy] if c >= 0)
    return DcnTargets(churn, skus, cats)


def label_matrices(targets: list[DcnTargets], sku_vocab, n_categories: int
                   ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """churn [n], sku multi-hot [n, K] over ``sku_vocab`` (others dropped), category [n, M]."""
    sku_vocab = np.asarray(sku_vocab, dtype=np.int64)
    col = {int(s): i for i, s in enumerate(sku_vocab)}
    churn = np.array([t.churn for t in targets], dtype=np.float32)
    sku = np.zeros((len(targets), len(sku_vocab)), dtype=np.float32)
    cat = np.zeros((len(targets), n_categories), dtype=np.float32)
    for i, t in enumerate(targets):
        for s in t.skus:
            if s in col:
                sku[i, col[s]] = 1
        for c in t.categories:
            if not 0 <= c < n_categories:
                raise IndexError(f"category label {c} outside [0, {n_categories})")
            cat[i, c] = 1
    return churn, sku, cat


def augment_mask(h: UserHistory, mask_rate: float = 0.3, seed: int = 0, draw: int = 0) -> UserHistory:
    """Drop each event independently with ``mask_rate``; never returns an empty history."""
    if len(h) == 0:
        raise ValueError("cannot augment an empty history")
    if mask_rate <= 0:
        return h
    rng = np.random.default_rng([seed, h.user_id, draw])
    while True:
        keep = rng.random(len(h)) >= mask_rate
        if keep.any():
            break
    return UserHistory(h.user_id, tuple(e for e, k in zip(h.events, keep) if k))


# -- losses ------------------------------------------------------------------------------------
def bce_with_logits(logits: Tensor, y) -> Tensor:
    y = Tensor(np.asarray(y, dtype=logits.dtype))
    return -(y * F.log_sigmoid(logits) + (1.0 - y) * F.log_sigmoid(-logits)).mean()


def multitask_loss(emb: Tensor, model: DcnModel, churn, sku, cat,
                   weights: dict | None = None) -> tuple[Tensor, dict[str, Tensor]]:
    """Weighted sum of churn BCE and label-averaged SKU/category BCE terms."""
    weights = {"churn": 1.0, "sku": 1.0, "cat": 1.0, **(weights or {})}
    sku = np.asarray(sku)
    cat = np.asarray(cat)
    if sku.shape[1] != model.sku_head.weight.shape[1] or cat.shape[1] != model.cat_head.weight.shape[1]:
        raise IndexError("label width does not match the head")
    terms = {
        "churn": bce_with_logits(F.reshape(model.churn_head(emb), (-1,)), churn),
        "sku": bce_with_logits(model.sku_head(emb), sku),
        "cat": bce_with_logits(model.cat_head(emb), cat),
    }
    total = None
    for k, t in terms.items():
        if weights[k] == 0:
            continue
        part = t * weights[k] if weights[k] != 1.0 else t
        total = part if total is None else total + part
    return total, terms


def contrastive_loss(p1: Tensor, p2: Tensor, log_tau: Tensor) -> Tensor:
    """In-batch softmax: row u's positive is p2[u], the other rows of p2 are negatives."""
    b = p1.shape[0]
    if b < 2:
        raise ValueError("contrastive loss needs at least two users")
    a = F.l2_normalize(p1)
    c = F.l2_normalize(p2)
    logits = F.matmul(a, F.transpose(c)) * F.exp(-log_tau)
    diag = (logits * Tensor(np.eye(b, dtype=logits.dtype))).sum(axis=-1)
    return (F.logsumexp(logits, axis=-1) - diag).mean()


# -- training ----------------------------------------------------------------------------------
@dataclass
class DcnData:
    """Aligned per-user inputs; ``aug`` holds two masked views or is ``None``."""
    user_ids: np.ndarray
    ple_ids: np.ndarray
    seq_emb: np.ndarray
    churn: np.ndarray
    sku: np.ndarray
    cat: np.ndarray
    aug: tuple | None = None  # ((ple_ids1, seq1), (ple_ids2, seq2))

    def __post_init__(self):
        n = len(self.user_ids)
        for name in ("ple_ids", "seq_emb", "churn", "sku", "cat"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} covers {len(getattr(self, name))} users, expected {n}")


def encode_features(values: np.ndarray, bins: PleBins) -> np.ndarray:
    if bins is None:
        raise ValueError("PLE bins have not been fitted")
    return encode_ple_matrix(values, bins)


def train_dcn(data: DcnData, cfg: DcnConfig, seed: int = 0, model: DcnModel | None = None
              ) -> tuple[DcnModel, list[dict]]:
    if len(data.user_ids) < 2:
        raise ValueError("need at least two users to train")
    model = model or DcnModel(data.ple_ids.shape[1], data.seq_emb.shape[1], data.sku.shape[1],
                              data.cat.shape[1], cfg, seed)
    opt = Adam(model.param_groups())
    rng = np.random.default_rng(seed + 1)
    n = len(data.user_ids)
    bs = min(cfg.batch_size, n)
    order, cursor = rng.permutation(n), 0
    use_con = cfg.contrastive and data.aug is not None
    metrics = []
    model.train()
    for step in range(cfg.steps):
        if cursor + bs > n:
            order, cursor = rng.permutation(n), 0
        idx = order[cursor:cursor + bs]
        cursor += bs
        emb = model(data.ple_ids[idx], data.seq_emb[idx])
        loss, terms = multitask_loss(emb, model, data.churn[idx], data.sku[idx], data.cat[idx])
        if use_con:
            cidx = idx[:min(cfg.contrastive_batch, len(idx))]
            (i1, s1), (i2, s2) = data.aug
            con = contrastive_loss(model(i1[cidx], s1[cidx]), model(i2[cidx], s2[cidx]),
                                   model.log_tau)
            terms["contrastive"] = con
            loss = loss + con
        opt.zero_grad()
        loss.backward()
        clip_global_norm(opt.params, cfg.clip_norm)
        opt.step()
        row = {"step": step, "loss": loss.item(), **{k: v.item() for k, v in terms.items()}}
        metrics.append(row)
        if step % 100 == 0:
            log.info("dcn step %d loss %.4f", step, row["loss"])
    model.eval()
    return model, metrics


def dcn_embeddings(model: DcnModel, ple_ids: np.ndarray, seq_emb: np.ndarray,
                   batch_size: int = 512) -> np.ndarray:
    model.eval()
    out = []
    with no_grad():
        for s in range(0, len(ple_ids), batch_size):
            out.append(model(ple_ids[s:s + batch_size], seq_emb[s:s + batch_size]).data)
    return np.concatenate(out) if out else np.zeros((0, model.cfg.out_dim), dtype=np.float32)
