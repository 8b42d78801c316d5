import numpy as np
import pytest

from ubp.events import SECONDS_PER_DAY, Event, EventType, UserHistory, build_user_histories
from ubp.synth import SynthConfig, generate_corpus

DAY = SECONDS_PER_DAY
T0 = 1_704_067_200
EMB = tuple(range(16))


def add(uid, t, sku, cat=0, price=10, emb=EMB):
    return Event(uid, EventType.ADD_TO_CART, t, sku=sku, category=cat, price_bucket=price,
                 text_embedding=emb)


def buy(uid, t, sku, cat=0, price=10, emb=EMB):
    return Event(uid, EventType.PURCHASE, t, sku=sku, category=cat, price_bucket=price,
                 text_embedding=emb)


def rem(uid, t, sku, cat=0, price=10, emb=EMB):
    return Event(uid, EventType.REMOVE_FROM_CART, t, sku=sku, category=cat, price_bucket=price,
                 text_embedding=emb)


def page(uid, t, url=1):
    return Event(uid, EventType.PAGE_VISIT, t, url_id=url)


def search(uid, t, emb=EMB):
    return Event(uid, EventType.SEARCH_QUERY, t, text_embedding=emb)


@pytest.fixture
def h1():
    """ADD(sku1,p10)@d0, BUY(sku1,cat3,p10)@d1, SEARCH@d2, PAGE@d3, BUY(sku2,cat3,p90)@d40."""
    evs = (add(1, T0, 1, 3, 10), buy(1, T0 + DAY, 1, 3, 10), search(1, T0 + 2 * DAY),
           page(1, T0 + 3 * DAY), buy(1, T0 + 40 * DAY, 2, 3, 90))
    return UserHistory(1, evs)


@pytest.fixture(scope="session")
def small_corpus():
    cfg = SynthConfig(n_users=120, n_skus=200, n_categories=8, n_urls=60)
    events, manifest = generate_corpus(cfg, seed=3)
    return cfg, events, manifest, build_user_histories(events)


def random_history(rng: np.random.Generator, uid: int = 0, n: int | None = None) -> UserHistory:
    n = int(rng.integers(0, 40)) if n is None else n
    ts = np.sort(rng.integers(T0, T0 + 90 * DAY, n))
    evs = []
    for t in ts.tolist():
        k = int(rng.integers(5))
        emb = tuple(rng.integers(0, 256, 16).tolist())
        sku, cat, price = int(rng.integers(50)), int(rng.integers(6)), int(rng.integers(100))
        if k == 0:
            evs.append(add(uid, t, sku, cat, price, emb))
        elif k == 1:
            evs.append(buy(uid, t, sku, cat, price, emb))
        elif k == 2:
            evs.append(rem(uid, t, sku, cat, price, emb))
        elif k == 3:
            evs.append(page(uid, t, int(rng.integers(30))))
        else:
            evs.append(search(uid, t, emb))
    return UserHistory(uid, tuple(evs))
