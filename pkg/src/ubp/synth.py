"""Seeded synthetic event logs with planted downstream signal.

Four user archetypes share one item catalogue:

* ``loyal``: steady activity spread over a few favourite categories.
* ``churner``: like loyal, but activity ramps down to zero before the final
  28 days of the horizon, so it never purchases in the target window.
* ``bargain``: favourite categories drawn from the cheapest third.
* ``premium``: favourite categories drawn from the most expensive third.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .events import EMB_LEN, SECONDS_PER_DAY, Event, EventType

ARCHETYPES = ("loyal", "churner", "bargain", "premium")
# page, search, add, purchase, remove
_TYPE_PROBS = np.array([0.34, 0.14, 0.24, 0.18, 0.10])
_TYPE_ORDER = (EventType.PAGE_VISIT, EventType.SEARCH_QUERY, EventType.ADD_TO_CART,
               EventType.PURCHASE, EventType.REMOVE_FROM_CART)


@dataclass(frozen=True)
class SynthConfig:
    n_users: int = 2000
    n_skus: int = 1000
    n_categories: int = 20
    n_urls: int = 400
    horizon_days: int = 100
    start_ts: int = 1_704_067_200
    mix: dict = field(default_factory=lambda: {"loyal": 0.3, "churner": 0.3,
                                               "bargain": 0.2, "premium": 0.2})
    base_rate: float = 1.0
    rate_spread: float = 0.6
    target_days: int = 28

    def archetype_counts(self) -> dict[str, int]:
        unknown = set(self.mix) - set(ARCHETYPES)
        if unknown:
            raise ValueError(f"unknown archetypes {sorted(unknown)}")
        total = sum(self.mix.values())
        if total <= 0:
            raise ValueError("archetype mix must have positive mass")
        counts = {a: int(round(self.n_users * self.mix.get(a, 0.0) / total)) for a in ARCHETYPES}
        # rounding residue goes to the largest share
        biggest = max(ARCHETYPES, key=lambda a: self.mix.get(a, 0.0))
        counts[biggest] += self.n_users - sum(counts.values())
        return counts

    @property
    def end_ts(self) -> int:
        return self.start_ts + self.horizon_days * SECONDS_PER_DAY


@dataclass
class Catalog:
    sku_category: np.ndarray
    sku_price: np.ndarray
    sku_emb: np.ndarray
    category_price: np.ndarray
    category_centroid: np.ndarray
    url_category: np.ndarray
    sku_weight: np.ndarray


def _build_catalog(cfg: SynthConfig, rng: np.random.Generator) -> Catalog:
    n_cat = cfg.n_categories
    category_price = np.sort(rng.uniform(5, 94, n_cat))
    centroid = rng.integers(20, 236, (n_cat, EMB_LEN))
    sku_category = rng.integers(0, n_cat, cfg.n_skus)
    sku_price = np.clip(np.rint(category_price[sku_category] + rng.normal(0, 6, cfg.n_skus)),
                        0, 99).astype(np.int64)
    sku_emb = np.clip(np.rint(centroid[sku_category] + rng.normal(0, 10, (cfg.n_skus, EMB_LEN))),
                      0, 255).astype(np.int64)
    sku_weight = 1.0 / (1.0 + rng.permutation(cfg.n_skus)) ** 0.8
    url_category = np.arange(cfg.n_urls) % n_cat
    return Catalog(sku_category, sku_price, sku_emb, category_price, centroid, url_category,
                   sku_weight)


def _favourites(archetype: str, n_cat: int, rng: np.random.Generator) -> np.ndarray:
    third = max(1, n_cat // 3)
    if archetype == "bargain":
        pool = np.arange(third)
    elif archetype == "premium":
        pool = np.arange(n_cat - third, n_cat)
    else:
        pool = np.arange(n_cat)
    return rng.choice(pool, size=min(3, len(pool)), replace=False)


def _activity_multiplier(archetype: str, days: np.ndarray, cfg: SynthConfig,
                         rng: np.random.Generator) -> tuple[np.ndarray, dict]:
    if archetype != "churner":
        return np.ones_like(days, dtype=float), {}
    last_active = cfg.horizon_days - cfg.target_days
    start = rng.uniform(0.25, 0.5) * cfg.horizon_days
    stop = min(start + rng.uniform(10, 20), last_active - 1)
    mult = np.clip((stop - days) / max(stop - start, 1e-9), 0.0, 1.0)
    return mult, {"decline_start_day": round(float(start), 3), "zero_from_day": round(float(stop), 3)}


def generate_corpus(cfg: SynthConfig, seed: int) -> tuple[list[Event], dict]:
    """Events (sorted by timestamp, then user) plus a manifest of planted signals."""
    if cfg.n_users < 0:
        raise ValueError("n_users must be >= 0")
    if min(cfg.n_skus, cfg.n_categories, cfg.n_urls) <= 0:
        raise ValueError("catalogue needs at least one sku, category and url")
    if cfg.horizon_days <= cfg.target_days:
        raise ValueError("horizon must exceed the target window")
    rng = np.random.default_rng(seed)
    cat = _build_catalog(cfg, rng)
    counts = cfg.archetype_counts()
    labels = np.array([a for a in ARCHETYPES for _ in range(counts[a])], dtype=object)
    labels = labels[rng.permutation(len(labels))]

    skus_by_cat = [np.flatnonzero(cat.sku_category == c) for c in range(cfg.n_categories)]
    urls_by_cat = [np.flatnonzero(cat.url_category == c) for c in range(cfg.n_categories)]
    # categories without skus/urls borrow the whole catalogue
    skus_by_cat = [p if len(p) else np.arange(cfg.n_skus) for p in skus_by_cat]
    urls_by_cat = [p if len(p) else np.arange(cfg.n_urls) for p in urls_by_cat]
    sku_cdf = [np.cumsum(cat.sku_weight[p]) / cat.sku_weight[p].sum() for p in skus_by_cat]
    sku_emb_t = [tuple(row) for row in cat.sku_emb.tolist()]

    events: list[Event] = []
    users_meta = {}
    days = np.arange(cfg.horizon_days)
    for uid, archetype in enumerate(labels):
        rate = cfg.base_rate + rng.exponential(cfg.rate_spread)
        favs = _favourites(archetype, cfg.n_categories, rng)
        mult, extra = _activity_multiplier(archetype, days + 0.5, cfg, rng)
        peak_hour = rng.integers(0, 24)
        n_per_day = rng.poisson(rate * mult)
        n = int(n_per_day.sum())
        users_meta[int(uid)] = {"archetype": str(archetype), "favourite_categories": favs.tolist(),
                                "daily_rate": round(float(rate), 4), **extra}
        if n == 0:
            continue
        day_of = np.repeat(days, n_per_day)
        hours = np.mod(np.rint(rng.normal(peak_hour, 3, n)), 24).astype(np.int64)
        ts = (cfg.start_ts + day_of * SECONDS_PER_DAY + hours * 3600
              + rng.integers(0, 3600, n))
        ts.sort()
        kinds = rng.choice(5, size=n, p=_TYPE_PROBS)
        in_fav = rng.random(n) < 0.85
        cats = np.where(in_fav, rng.choice(favs, size=n), rng.integers(0, cfg.n_categories, n))
        u_item = rng.random(n)
        u_url = rng.random(n)
        noise = rng.normal(0, 14, (n, EMB_LEN))
        for i, (t, k, c) in enumerate(zip(ts.tolist(), kinds.tolist(), cats.tolist())):
            etype = _TYPE_ORDER[k]
            if etype == EventType.PAGE_VISIT:
                pool = urls_by_cat[c]
                events.append(Event(uid, etype, t, url_id=int(pool[int(u_url[i] * len(pool))])))
            elif etype == EventType.SEARCH_QUERY:
                q = np.clip(np.rint(cat.category_centroid[c] + noise[i]), 0, 255)
                events.append(Event(uid, etype, t, text_embedding=tuple(q.astype(int).tolist())))
            else:
                j = min(int(np.searchsorted(sku_cdf[c], u_item[i], side="right")),
                        len(skus_by_cat[c]) - 1)
                sku = int(skus_by_cat[c][j])
                events.append(Event(uid, etype, t, sku=sku, category=int(cat.sku_category[sku]),
                                    price_bucket=int(cat.sku_price[sku]),
                                    text_embedding=sku_emb_t[sku]))
    events.sort(key=lambda e: (e.timestamp, e.user_id))
    manifest = {
        "seed": int(seed),
        "start_ts": cfg.start_ts,
        "end_ts": cfg.end_ts,
        "target_days": cfg.target_days,
        "archetype_counts": counts,
        "planted_signals": {
            "churn": "churner archetype has zero activity during the final target_days",
            "price": "bargain/premium archetypes buy from the cheapest/most expensive third of categories",
            "topic": "85% of item events fall in each user's three favourite categories",
        },
        "category_price_level": [round(float(p), 4) for p in cat.category_price],
        "users": users_meta,
    }
    return events, manifest


def generate_synthetic(cfg: SynthConfig, seed: int) -> list[Event]:
    return generate_corpus(cfg, seed)[0]
