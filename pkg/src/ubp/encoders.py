"""Input encoders shared by the neural models.

* piecewise-linear encoding (PLE) of numeric features into interval ids,
* multi-size unified embeddings (MUVE): two hashed lookups into one shared
  table, summed,
* the text embedding bag over 16 quantised positions.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .events import EMB_LEN, N_EMB_BINS
from .nn import F, Module, Parameter, Tensor

N_INTERVALS = 64
N_SUB = 32
N_PLE_IDS = N_INTERVALS * N_SUB
MUVE_VOCAB = 524288

NAMESPACES = {"sku": 1, "category": 2, "url": 3}
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


# -- piecewise-linear encoding ---------------------------------------------------
@dataclass
class PleBins:
    edges: np.ndarray  # [n_features, 63], each row non-decreasing

    def __post_init__(self):
        self.edges = np.atleast_2d(np.asarray(self.edges, dtype=np.float64))
        if self.edges.shape[1] != N_INTERVALS - 1:
            raise ValueError(f"expected {N_INTERVALS - 1} edges per feature")
        if np.any(np.diff(self.edges, axis=1) < 0):
            raise ValueError("PLE edges must be non-decreasing")

    @property
    def n_features(self) -> int:
        return len(self.edges)

    def to_json(self) -> list:
        return self.edges.tolist()

    @classmethod
    def from_json(cls, data) -> "PleBins":
        return cls(np.asarray(data, dtype=np.float64))


def fit_ple(train_values) -> PleBins:
    """Quantile edges k/64, k=1..63, at 0-based rank floor(k*n/64) per feature."""
    x = np.asarray(train_values, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n = len(x)
    if n == 0:
        raise ValueError("fit_ple needs at least one sample")
    ranks = np.minimum((np.arange(1, N_INTERVALS) * n) // N_INTERVALS, n - 1)
    return PleBins(np.sort(x, axis=0)[ranks].T)


def _encode_column(v: np.ndarray, edges: np.ndarray) -> np.ndarray:
    coarse = np.searchsorted(edges, v, side="left")
    inner = (coarse > 0) & (coarse < N_INTERVALS - 1)
    lo = edges[np.clip(coarse - 1, 0, len(edges) - 1)]
    hi = edges[np.clip(coarse, 0, len(edges) - 1)]
    width = np.where(hi > lo, hi - lo, 1.0)
    frac = np.where(inner, (v - lo) / width, 0.0)
    sub = np.minimum(np.floor(N_SUB * frac), N_SUB - 1).astype(np.int64)
    sub = np.where(coarse == N_INTERVALS - 1, N_SUB - 1, sub)
    return coarse.astype(np.int64) * N_SUB + sub


def encode_ple(value: float, edges) -> int:
    """Interval id in [0, 2048) of one value given that feature's 63 edges."""
    edges = np.asarray(edges, dtype=np.float64)
    return int(_encode_column(np.asarray([value], dtype=np.float64), edges)[0])


def encode_ple_matrix(values: np.ndarray, bins: PleBins) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if values.shape[1] != bins.n_features:
        raise ValueError(f"{values.shape[1]} features but bins fitted for {bins.n_features}")
    return np.stack([_encode_column(values[:, j], bins.edges[j])
                     for j in range(bins.n_features)], axis=1)


class PleEmbedding(Module):
    """Per-feature learnable vectors for each of the 2048 interval ids."""

    def __init__(self, n_features: int, dim: int, rng: np.random.Generator,
                 std: float = 0.02, dtype=np.float32):
        self.n_features = n_features
        self.dim = dim
        self.table = Parameter(rng.normal(0, std, (n_features * N_PLE_IDS, dim)).astype(dtype))

    def forward(self, ids: np.ndarray) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        flat = ids + np.arange(self.n_features, dtype=np.int64) * N_PLE_IDS
        out = F.embedding(self.table, flat)
        return out.reshape(ids.shape[0], self.n_features * self.dim)


# -- hashed multi-lookup embeddings -------------------------------------------------
def _mix64(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


def muve_hash(namespace: str, ids, seed: int, vocab: int = MUVE_VOCAB) -> np.ndarray:
    """Seeded 64-bit mix hash of (namespace, id) into [0, vocab)."""
    ns = np.uint64(NAMESPACES[namespace])
    ids = np.asarray(ids).astype(np.uint64)
    with np.errstate(over="ignore"):
        key = _mix64(ids + ns * _GOLDEN)
        h = _mix64(key ^ _mix64(np.asarray(seed, dtype=np.uint64) + _GOLDEN))
    return (h % np.uint64(vocab)).astype(np.int64)


class HashedEmbeddingTable(Module):
    def __init__(self, dim: int, rng: np.random.Generator, vocab: int = MUVE_VOCAB,
                 seeds: tuple[int, int] = (17, 29), std: float = 0.02, dtype=np.float32):
        self.vocab = vocab
        self.seeds = tuple(seeds)
        self.weight = Parameter(rng.normal(0, std, (vocab, dim)).astype(dtype), sparse=True)

    def rows(self, namespace: str, ids) -> tuple[np.ndarray, np.ndarray]:
        return (muve_hash(namespace, ids, self.seeds[0], self.vocab),
                muve_hash(namespace, ids, self.seeds[1], self.vocab))

    def forward(self, namespace: str, ids) -> Tensor:
        return muve_lookup(namespace, ids, self)


def muve_lookup(namespace: str, raw_id, table: HashedEmbeddingTable) -> Tensor:
    """Sum of the two hashed rows for each id; shape ``ids.shape + (dim,)``."""
    h1, h2 = table.rows(namespace, raw_id)
    both = F.embedding(table.weight, np.stack([h1, h2], axis=-1))
    return both.sum(axis=-2)


# -- text embedding bag -------------------------------------------------------------
class TextBag(Module):
    def __init__(self, dim: int, rng: np.random.Generator, std: float = 0.02, dtype=np.float32):
        self.weight = Parameter(rng.normal(0, std, (N_EMB_BINS, dim)).astype(dtype))

    def forward(self, emb16) -> Tensor:
        return text_bag(emb16, self)


def text_bag(emb16, table: TextBag) -> Tensor:
    """Mean of the rows selected by each of the 16 quantised positions."""
    emb16 = np.asarray(emb16, dtype=np.int64)
    if emb16.shape[-1] != EMB_LEN:
        raise ValueError(f"text embedding must have {EMB_LEN} positions")
    if emb16.min(initial=0) < 0 or emb16.max(initial=0) >= N_EMB_BINS:
        raise ValueError("text embedding bins must lie in [0, 255]")
    return F.embedding(table.weight, emb16).mean(axis=-2)
