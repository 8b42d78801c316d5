"""Handcrafted behavioural features: 205 windowed basic + 141 cluster/EW features.

Prices are quantised buckets in [0, 99]; every price aggregate uses the
bucket index as the price unit. Ratios with a zero denominator are 0.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .events import SECONDS_PER_DAY, EventArrays, EventType, UserHistory
from .kmeans import assign_clusters, fit_kmeans

ADD, BUY, REM = int(EventType.ADD_TO_CART), int(EventType.PURCHASE), int(EventType.REMOVE_FROM_CART)
PAGE, SEARCH = int(EventType.PAGE_VISIT), int(EventType.SEARCH_QUERY)


class WindowSpec(enum.Enum):
    ALL = ("all", None)
    DAYS60 = ("60d", 60)
    DAYS28 = ("28d", 28)
    DAYS14 = ("14d", 14)
    DAYS7 = ("7d", 7)

    @property
    def suffix(self) -> str:
        return self.value[0]

    @property
    def days(self) -> int | None:
        return self.value[1]


WINDOWS = (WindowSpec.ALL, WindowSpec.DAYS60, WindowSpec.DAYS28, WindowSpec.DAYS14,
           WindowSpec.DAYS7)


@dataclass(frozen=True)
class EwConfig:
    tau_days: float
    seconds_per_day: int = SECONDS_PER_DAY

    def __post_init__(self):
        if self.tau_days <= 0:
            raise ValueError("tau_days must be positive")

    @property
    def tag(self) -> str:
        return f"{int(self.tau_days)}d"


EW_CONFIGS = (EwConfig(28), EwConfig(50), EwConfig(100))


def ew_weight(delta_t, cfg: EwConfig):
    """exp(-dt / (tau * 86400)); accepts scalars or arrays of seconds."""
    dt = np.asarray(delta_t, dtype=np.float64)
    if np.any(dt < 0):
        raise ValueError("delta_t must be non-negative")
    w = np.exp(-dt / (cfg.tau_days * cfg.seconds_per_day))
    return float(w) if w.ndim == 0 else w


BASIC_NAMES = (
    "add_all", "rem_all", "buy_all", "total_event_cnt", "search_cnt", "uniq_buy_days",
    "avg_price_add", "avg_price_rem", "avg_price_bucket_buy", "max_price_buy", "min_price_buy",
    "price_spread_buy",
    "add_price_sum", "buy_price_sum", "buy_volume_hi", "buy_volume_lo", "rem_price_sum",
    "page_visit_cnt", "page_per_buy", "uniq_url_cnt",
    "duration_days", "buy_freq_per_day", "cart_action_freq_per_day",
    "cart_ctr", "remove_rate", "conv_rate", "net_cart_ratio", "cart_repeat_rate",
    "search_to_add", "search_to_buy",
    "hi_price_buy_cnt", "lo_price_buy_cnt", "hi_price_share", "lo_price_share",
    "buy_volume_hi_share", "buy_volume_lo_share", "lo_hi_buy_ratio",
    "uniq_sku_per_buy", "uniq_sku_per_day", "uniq_cat_per_buy", "uniq_cat_per_day",
)
# features that count events and so grow with the window
COUNT_FEATURES = ("add_all", "rem_all", "buy_all", "total_event_cnt", "search_cnt",
                  "uniq_buy_days", "page_visit_cnt", "uniq_url_cnt", "hi_price_buy_cnt",
                  "lo_price_buy_cnt", "add_price_sum", "buy_price_sum", "rem_price_sum",
                  "buy_volume_hi", "buy_volume_lo")

PRICE7 = ("super_lo_price", "lo_price", "mid_lo_price", "mid_price", "mid_hi_price", "hi_price",
          "super_hi_price")
# three-way grouping of the seven segments used by the EW price features
PRICE3 = ("mid_hi_price", "mid_price", "mid_lo_price")
_SEG_TO_3 = np.array([2, 2, 2, 1, 0, 0, 0])

TOTAL_NAMES = (
    "rows_total", "sum_price_total", "mean_price_total", "median_price_total", "q25_price_total",
    "q75_price_total", "max_price_total", "min_price_total", "std_price_total",
    "active_days_total", "price_range_total", "iqr_price_total", "cv_price_total",
    "mean_median_ratio_total", "mid_hi_share_total", "mid_lo_share_total",
    "mid_hi_lo_ratio_total", "avg_tx_per_active_day_total", "mid_hi_mean_ratio_total",
    "mid_hi_iqr_ratio_total",
)


def basic_feature_names() -> list[str]:
    return [f"{n}_{w.suffix}" for w in WINDOWS for n in BASIC_NAMES]


def cluster_feature_names(ew_cfgs=EW_CONFIGS) -> list[str]:
    names: list[str] = []
    tags = [c.tag for c in ew_cfgs]
    group1 = ["ew_rows"] + [f"ew_c5_{k}" for k in range(5)] + [f"ew_{p}" for p in PRICE3]
    group2 = ([f"share_c5_{k}" for k in range(5)] + [f"share_{p}" for p in PRICE3]
              + ["mid_hi_lo_ratio"])
    group3 = ["ew_mean_price", "ew_max_price", "ew_min_price", "price_range", "cv_price"]
    group4 = ["sku_cnt_sum", "sku_score_sum", "cat_cnt_sum", "cat_score_sum"]
    for group in (group1, group2, group3, group4):
        names += [f"{n}_{t}" for t in tags for n in group]
    names += list(TOTAL_NAMES)
    names += [f"{p}_total" for p in PRICE7]
    names += [f"c5_{k}_total" for k in range(5)]
    names += ["gap_ew_50d"]
    names += [f"c10_{k}_total" for k in range(10)]
    names += [f"share_c10_{k}_total" for k in range(10)]
    names += [f"share_{p}_total" for p in PRICE7]
    return names


N_BASIC = len(BASIC_NAMES) * len(WINDOWS)
N_CLUSTER = len(cluster_feature_names())
FEATURE_NAMES = tuple(basic_feature_names() + cluster_feature_names())


def _ratio(num: float, den: float) -> float:
    return float(num) / float(den) if den else 0.0


def nearest_rank(sorted_values: np.ndarray, num: int, den: int):
    """Element at 0-based rank floor(n * num / den) of an ascending array."""
    n = len(sorted_values)
    return sorted_values[min((num * n) // den, n - 1)]


# -- corpus statistics ------------------------------------------------------
@dataclass
class CorpusStats:
    p20_price: float
    p80_price: float
    price7_bounds: np.ndarray
    top100_skus: list[int]
    top100_sku_scores: list[float]
    top100_categories: list[int]
    top100_category_scores: list[float]
    kmeans_c5: np.ndarray
    kmeans_c10: np.ndarray
    feature_means: np.ndarray | None = None
    feature_stds: np.ndarray | None = None
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        self.price7_bounds = np.asarray(self.price7_bounds, dtype=np.float64)
        self.kmeans_c5 = np.asarray(self.kmeans_c5, dtype=np.float64)
        self.kmeans_c10 = np.asarray(self.kmeans_c10, dtype=np.float64)
        if len(self.price7_bounds) != 6 or np.any(np.diff(self.price7_bounds) < 0):
            raise ValueError("price7_bounds must be 6 non-decreasing thresholds")
        if len(self.top100_skus) > 100 or len(self.top100_categories) > 100:
            raise ValueError("top lists are capped at 100 entries")

    @property
    def top_sku_set(self) -> np.ndarray:
        return np.asarray(self.top100_skus, dtype=np.int64)

    @property
    def top_cat_set(self) -> np.ndarray:
        return np.asarray(self.top100_categories, dtype=np.int64)

    def price_segment(self, prices) -> np.ndarray:
        """PRICE7 segment index: number of bounds strictly below the price."""
        prices = np.asarray(prices, dtype=np.float64)
        return np.searchsorted(self.price7_bounds, prices, side="left")

    def to_json(self) -> dict:
        def arr(a):
            return None if a is None else np.asarray(a).tolist()
        return {
            "p20_price": self.p20_price, "p80_price": self.p80_price,
            "price7_bounds": arr(self.price7_bounds),
            "top100_skus": list(map(int, self.top100_skus)),
            "top100_sku_scores": list(map(float, self.top100_sku_scores)),
            "top100_categories": list(map(int, self.top100_categories)),
            "top100_category_scores": list(map(float, self.top100_category_scores)),
            "kmeans_c5": arr(self.kmeans_c5), "kmeans_c10": arr(self.kmeans_c10),
            "feature_means": arr(self.feature_means), "feature_stds": arr(self.feature_stds),
            "extras": self.extras,
        }

    @classmethod
    def from_json(cls, d: dict) -> "CorpusStats":
        d = dict(d)
        for key in ("feature_means", "feature_stds"):
            if d.get(key) is not None:
                d[key] = np.asarray(d[key], dtype=np.float64)
        return cls(**d)


def _top_k(ids: np.ndarray, k: int = 100) -> tuple[list[int], list[float]]:
    if len(ids) == 0:
        return [], []
    uniq, counts = np.unique(ids, return_counts=True)
    # count descending, id ascending on ties
    order = np.lexsort((uniq, -counts))[:k]
    return uniq[order].tolist(), counts[order].astype(float).tolist()


def fit_corpus_stats(histories: dict[int, UserHistory] | Iterable[UserHistory],
                     k_seed: int = 0) -> CorpusStats:
    hs = histories.values() if isinstance(histories, dict) else histories
    prices, skus, cats, embs = [], [], [], []
    for h in hs:
        a = h.arrays
        buy = a.etype == BUY
        prices.append(a.price[buy])
        skus.append(a.sku[buy])
        cats.append(a.category[buy])
        embs.append(a.emb[buy & a.has_emb])
    prices = np.sort(np.concatenate(prices)) if prices else np.zeros(0)
    if len(prices) == 0:
        raise ValueError("corpus has no purchases")
    points = np.concatenate(embs).astype(np.float64)
    top_skus, sku_scores = _top_k(np.concatenate(skus))
    top_cats, cat_scores = _top_k(np.concatenate(cats))
    return CorpusStats(
        p20_price=float(nearest_rank(prices, 1, 5)),
        p80_price=float(nearest_rank(prices, 4, 5)),
        price7_bounds=np.array([nearest_rank(prices, k, 7) for k in range(1, 7)], dtype=float),
        top100_skus=top_skus, top100_sku_scores=sku_scores,
        top100_categories=top_cats, top100_category_scores=cat_scores,
        kmeans_c5=fit_kmeans(points, 5, k_seed).centroids,
        kmeans_c10=fit_kmeans(points, 10, k_seed + 1).centroids,
    )


# -- basic features -----------------------------------------------------------
def _window(a: EventArrays, w: WindowSpec, anchor: int | None) -> EventArrays:
    if w.days is None or len(a) == 0:
        return a
    if anchor is None:
        anchor = int(a.ts[-1])
    return a.take(a.ts > anchor - w.days * SECONDS_PER_DAY)


def _basic_values(a: EventArrays, stats: CorpusStats) -> list[float]:
    et = a.etype
    add_m, buy_m, rem_m = et == ADD, et == BUY, et == REM
    add, buy, rem = int(add_m.sum()), int(buy_m.sum()), int(rem_m.sum())
    search = int((et == SEARCH).sum())
    pages = int((et == PAGE).sum())
    total = add + buy + rem
    bp = a.price[buy_m].astype(np.float64)
    ap = a.price[add_m].astype(np.float64)
    rp = a.price[rem_m].astype(np.float64)
    bts = a.ts[buy_m]
    uniq_days = len(np.unique(bts // SECONDS_PER_DAY))
    duration = float(bts.max() - bts.min()) / SECONDS_PER_DAY if buy else 0.0
    hi = bp >= stats.p80_price
    lo = bp <= stats.p20_price
    buy_sum = float(bp.sum())
    vol_hi, vol_lo = float(bp[hi].sum()), float(bp[lo].sum())
    n_hi, n_lo = int(hi.sum()), int(lo.sum())
    uniq_sku = len(np.unique(a.sku[buy_m]))
    uniq_cat = len(np.unique(a.category[buy_m]))
    return [
        add, rem, buy, total, search, uniq_days,
        float(ap.mean()) if add else 0.0, float(rp.mean()) if rem else 0.0,
        float(bp.mean()) if buy else 0.0, float(bp.max()) if buy else 0.0,
        float(bp.min()) if buy else 0.0, float(bp.max() - bp.min()) if buy else 0.0,
        float(ap.sum()), buy_sum, vol_hi, vol_lo, float(rp.sum()),
        pages, _ratio(pages, buy), len(np.unique(a.url[et == PAGE])),
        duration, buy / (duration + 1.0), (add + rem) / (duration + 1.0),
        _ratio(add, total), _ratio(rem, add), _ratio(buy, add), _ratio(add - rem, add),
        _ratio(rem, add), _ratio(add, search), _ratio(buy, search),
        n_hi, n_lo, _ratio(n_hi, buy), _ratio(n_lo, buy), _ratio(vol_hi, buy_sum),
        _ratio(vol_lo, buy_sum), _ratio(n_lo, n_hi),
        _ratio(uniq_sku, buy), _ratio(uniq_sku, uniq_days), _ratio(uniq_cat, buy),
        _ratio(uniq_cat, uniq_days),
    ]


def compute_basic_features(h: UserHistory, w: WindowSpec, stats: CorpusStats,
                           anchor: int | None = None) -> dict[str, float]:
    """The 41 basic features of one window, keyed by un-suffixed name.

    Day windows cover ``(anchor - days, anchor]``; ``anchor`` defaults to the
    user's last event.
    """
    vals = _basic_values(_window(h.arrays, w, anchor), stats)
    return dict(zip(BASIC_NAMES, map(float, vals)))


def assemble_basic_205(h: UserHistory, stats: CorpusStats, anchor: int | None = None) -> np.ndarray:
    a = h.arrays
    out = [_basic_values(_window(a, w, anchor), stats) for w in WINDOWS]
    return np.asarray(out, dtype=np.float64).reshape(-1)


# -- cluster / EW features ---------------------------------------------------------
def _wmean_std(p: np.ndarray, w: np.ndarray) -> tuple[float, float]:
    sw = w.sum()
    if sw <= 0:
        return 0.0, 0.0
    mu = float((w * p).sum() / sw)
    return mu, float(np.sqrt((w * (p - mu) ** 2).sum() / sw))


def compute_cluster_features_141(h: UserHistory, stats: CorpusStats,
                                 ew_cfgs=EW_CONFIGS, anchor: int | None = None) -> np.ndarray:
    a = h.arrays
    names_len = N_CLUSTER
    if len(a) == 0:
        return np.zeros(names_len)
    if anchor is None:
        anchor = int(a.ts[-1])
    buy = a.etype == BUY
    p = a.price[buy].astype(np.float64)
    ts = a.ts[buy]
    dt = (anchor - ts).astype(np.float64)
    emb_ok = a.has_emb[buy]
    c5 = np.full(len(p), -1)
    c10 = np.full(len(p), -1)
    if emb_ok.any():
        pts = a.emb[buy][emb_ok]
        c5[emb_ok] = assign_clusters(pts, stats.kmeans_c5)
        c10[emb_ok] = assign_clusters(pts, stats.kmeans_c10)
    seg7 = stats.price_segment(p)
    seg3 = _SEG_TO_3[seg7] if len(p) else np.zeros(0, dtype=int)
    in_top_sku = np.isin(a.sku[buy], stats.top_sku_set)
    in_top_cat = np.isin(a.category[buy], stats.top_cat_set)

    g1, g2, g3, g4 = [], [], [], []
    for cfg in ew_cfgs:
        inside = dt <= cfg.tau_days * SECONDS_PER_DAY
        w = np.where(inside, ew_weight(np.maximum(dt, 0), cfg), 0.0)
        rows = float(w.sum())
        ew_c5 = [float(w[c5 == k].sum()) for k in range(5)]
        ew_p3 = [float(w[seg3 == k].sum()) for k in range(3)]
        g1.append([rows, *ew_c5, *ew_p3])
        shares3 = [_ratio(v, rows) for v in ew_p3]
        g2.append([*(_ratio(v, rows) for v in ew_c5), *shares3, _ratio(shares3[0], shares3[2])])
        wp = (w * p)[inside]
        mu, sd = _wmean_std(p[inside], w[inside])
        g3.append([mu, float(wp.max()) if len(wp) else 0.0, float(wp.min()) if len(wp) else 0.0,
                   float(p[inside].max() - p[inside].min()) if inside.any() else 0.0,
                   _ratio(sd, mu)])
        g4.append([float((inside & in_top_sku).sum()), float(w[in_top_sku].sum()),
                   float((inside & in_top_cat).sum()), float(w[in_top_cat].sum())])
    out: list[float] = []
    for group in (g1, g2, g3, g4):
        for row in group:
            out += row

    n = len(p)
    if n:
        mean, med = float(p.mean()), float(np.median(p))
        q25, q75 = (float(v) for v in np.percentile(p, [25, 75]))
        std = float(p.std())
        days = len(np.unique(ts // SECONDS_PER_DAY))
        iqr = q75 - q25
        hi_share = _ratio((seg3 == 0).sum(), n)
        lo_share = _ratio((seg3 == 2).sum(), n)
        out += [n, float(p.sum()), mean, med, q25, q75, float(p.max()), float(p.min()), std,
                days, float(p.max() - p.min()), iqr, _ratio(std, mean), _ratio(mean, med),
                hi_share, lo_share, _ratio(hi_share, lo_share), _ratio(n, days),
                _ratio(hi_share, mean), _ratio(hi_share, iqr)]
    else:
        out += [0.0] * len(TOTAL_NAMES)
    seg_counts = [float((seg7 == k).sum()) for k in range(7)]
    out += seg_counts
    out += [float((c5 == k).sum()) for k in range(5)]

    gap_cfg = EwConfig(50)
    inside = dt <= gap_cfg.tau_days * SECONDS_PER_DAY
    t_in = ts[inside]
    if len(t_in) >= 2:
        gaps = np.diff(t_in) / SECONDS_PER_DAY
        w_gap = ew_weight(dt[inside][1:], gap_cfg)
        out.append(float((w_gap * gaps).sum() / w_gap.sum()))
    else:
        out.append(0.0)
    c10_counts = [float((c10 == k).sum()) for k in range(10)]
    out += c10_counts
    out += [_ratio(c, n) for c in c10_counts]
    out += [_ratio(c, n) for c in seg_counts]
    return np.asarray(out, dtype=np.float64)


def compute_user_features(h: UserHistory, stats: CorpusStats, anchor: int | None = None) -> np.ndarray:
    return np.concatenate([assemble_basic_205(h, stats, anchor),
                           compute_cluster_features_141(h, stats, anchor=anchor)])


# -- matrices, standardisation, io ------------------------------------------------------
class LeakageError(RuntimeError):
    pass


@dataclass
class FeatureMatrix:
    user_ids: np.ndarray
    values: np.ndarray
    names: tuple[str, ...] = FEATURE_NAMES
    period_end: int | None = None

    def rows_for(self, user_ids) -> np.ndarray:
        pos = {int(u): i for i, u in enumerate(self.user_ids)}
        try:
            return self.values[[pos[int(u)] for u in user_ids]]
        except KeyError as exc:
            raise KeyError(f"no features for user {exc.args[0]}") from None


def compute_feature_matrix(histories: dict[int, UserHistory], stats: CorpusStats,
                           period_end: int | None = None,
                           anchor_mode: str = "user_last") -> FeatureMatrix:
    """Features for every user; ``period_end`` tags (and enforces) the data cutoff."""
    if anchor_mode not in ("user_last", "period_end"):
        raise ValueError(f"unknown anchor_mode {anchor_mode!r}")
    if anchor_mode == "period_end" and period_end is None:
        raise ValueError("anchor_mode='period_end' needs period_end")
    uids = sorted(histories)
    rows = []
    for uid in uids:
        h = histories[uid]
        if period_end is not None and h.events and h.last_timestamp > period_end:
            raise LeakageError(f"user {uid} has events after the feature period end {period_end}")
        rows.append(compute_user_features(h, stats, period_end if anchor_mode == "period_end" else None))
    values = np.vstack(rows) if rows else np.zeros((0, len(FEATURE_NAMES)))
    return FeatureMatrix(np.asarray(uids, dtype=np.int64), values, FEATURE_NAMES, period_end)


def standardize(features: np.ndarray, fit_on=None):
    """Column z-scores with stats from ``fit_on`` rows (index array or mask).

    Zero-variance columns map to 0. Returns ``(z, means, stds)``.
    """
    features = np.asarray(features, dtype=np.float64)
    fit = features if fit_on is None else features[fit_on]
    if len(fit) == 0:
        raise ValueError("standardize needs at least one fitting row")
    means = fit.mean(axis=0)
    stds = fit.std(axis=0)
    safe = np.where(stds > 0, stds, 1.0)
    z = np.where(stds > 0, (features - means) / safe, 0.0)
    return z, means, stds


def write_feature_csv(path, fm: FeatureMatrix) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(("user_id",) + tuple(fm.names)) + "\n")
        for uid, row in zip(fm.user_ids, fm.values):
            fh.write(str(int(uid)) + "," + ",".join(repr(float(v)) for v in row) + "\n")


def read_feature_csv(path, period_end: int | None = None) -> FeatureMatrix:
    with open(path) as fh:
        header = fh.readline().rstrip("\n").split(",")
        data = np.loadtxt(fh, delimiter=",", ndmin=2, dtype=np.float64)
    if header[0] != "user_id":
        raise ValueError(f"{path}: first column must be user_id")
    if data.size == 0:
        data = np.zeros((0, len(header)))
    return FeatureMatrix(data[:, 0].astype(np.int64), data[:, 1:], tuple(header[1:]), period_end)


def save_stats(path, stats: CorpusStats, **extra) -> None:
    payload = stats.to_json()
    payload["extras"] = {**payload.get("extras", {}), **extra}
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)


def load_stats(path) -> CorpusStats:
    with open(path) as fh:
        return CorpusStats.from_json(json.load(fh))
