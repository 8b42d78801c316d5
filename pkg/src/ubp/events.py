"""Event records, log ingestion and timestamp splitting."""
from __future__ import annotations

import csv
import enum
import io
import json
from dataclasses import dataclass, field
from functools import cached_property
from typing import IO, Iterable, NamedTuple

import numpy as np

SECONDS_PER_DAY = 86400
EMB_LEN = 16
N_PRICE_BUCKETS = 100
N_EMB_BINS = 256


class EventType(enum.IntEnum):
    ADD_TO_CART = 0
    PURCHASE = 1
    REMOVE_FROM_CART = 2
    PAGE_VISIT = 3
    SEARCH_QUERY = 4

    @property
    def wire_name(self) -> str:
        return self.name.lower()

    @classmethod
    def from_wire(cls, name: str) -> "EventType":
        try:
            return cls[name.upper()]
        except KeyError:
            raise ValueError(f"unknown event_type {name!r}") from None


N_EVENT_TYPES = len(EventType)
ITEM_TYPES = frozenset({EventType.ADD_TO_CART, EventType.PURCHASE, EventType.REMOVE_FROM_CART})


class EventValidationError(ValueError):
    pass


@dataclass(frozen=True, slots=True)
class Event:
    user_id: int
    event_type: EventType
    timestamp: int
    sku: int | None = None
    category: int | None = None
    price_bucket: int | None = None
    url_id: int | None = None
    text_embedding: tuple[int, ...] | None = None

    def __post_init__(self):
        validate_event(self)


def validate_event(e: Event) -> None:
    et = e.event_type
    if et in ITEM_TYPES:
        if e.sku is None or e.category is None or e.price_bucket is None:
            raise EventValidationError(f"{et.wire_name} requires sku, category and price_bucket")
        if e.url_id is not None:
            raise EventValidationError(f"{et.wire_name} must not carry url_id")
    elif et == EventType.PAGE_VISIT:
        if e.url_id is None:
            raise EventValidationError("page_visit requires url_id")
        if e.sku is not None or e.category is not None or e.price_bucket is not None:
            raise EventValidationError("page_visit must not carry sku/category/price_bucket")
    elif et == EventType.SEARCH_QUERY and e.text_embedding is None:
        raise EventValidationError("search_query requires emb")
    if e.price_bucket is not None and not 0 <= e.price_bucket < N_PRICE_BUCKETS:
        raise EventValidationError(f"price_bucket {e.price_bucket} outside [0, 99]")
    if e.text_embedding is not None:
        if len(e.text_embedding) != EMB_LEN:
            raise EventValidationError(f"emb must have {EMB_LEN} entries")
        if any(not 0 <= b < N_EMB_BINS for b in e.text_embedding):
            raise EventValidationError("emb entries must lie in [0, 255]")


class EventArrays(NamedTuple):
    """Columnar view of a history; absent optionals are -1."""

    ts: np.ndarray
    etype: np.ndarray
    sku: np.ndarray
    category: np.ndarray
    price: np.ndarray
    url: np.ndarray
    emb: np.ndarray
    has_emb: np.ndarray

    def __len__(self) -> int:
        return len(self.ts)

    def take(self, mask_or_idx) -> "EventArrays":
        return EventArrays(*(a[mask_or_idx] for a in self))


def events_to_arrays(events: Iterable[Event]) -> EventArrays:
    events = list(events)
    n = len(events)
    emb = np.zeros((n, EMB_LEN), dtype=np.int64)
    has_emb = np.zeros(n, dtype=bool)
    for i, e in enumerate(events):
        if e.text_embedding is not None:
            emb[i] = e.text_embedding
            has_emb[i] = True

    def col(attr):
        return np.array([-1 if getattr(e, attr) is None else getattr(e, attr) for e in events],
                        dtype=np.int64)

    return EventArrays(
        ts=np.array([e.timestamp for e in events], dtype=np.int64),
        etype=np.array([int(e.event_type) for e in events], dtype=np.int64),
        sku=col("sku"), category=col("category"), price=col("price_bucket"),
        url=col("url_id"), emb=emb, has_emb=has_emb,
    )


@dataclass(frozen=True)
class UserHistory:
    user_id: int
    events: tuple[Event, ...] = field(default_factory=tuple)

    def __post_init__(self):
        prev = None
        for e in self.events:
            if e.user_id != self.user_id:
                raise ValueError(f"event of user {e.user_id} in history of {self.user_id}")
            if prev is not None and e.timestamp < prev:
                raise ValueError("history timestamps must be non-decreasing")
            prev = e.timestamp

    def __len__(self) -> int:
        return len(self.events)

    @cached_property
    def arrays(self) -> EventArrays:
        return events_to_arrays(self.events)

    @property
    def last_timestamp(self) -> int | None:
        return self.events[-1].timestamp if self.events else None

    def filter(self, keep) -> "UserHistory":
        return UserHistory(self.user_id, tuple(e for e in self.events if keep(e)))


@dataclass(frozen=True)
class DataSplit:
    """Input period is ``ts <= train_end``; target window is ``(train_end, target_end]``."""

    train_end: int
    target_end: int

    def __post_init__(self):
        if not self.train_end < self.target_end:
            raise ValueError("train_end must precede target_end")

    @classmethod
    def ending_at(cls, target_end: int, target_days: int = 28) -> "DataSplit":
        return cls(target_end - target_days * SECONDS_PER_DAY, target_end)


# -- parsing ---------------------------------------------------------------
class ParseDiagnostic(NamedTuple):
    line: int
    message: str


class ParseResult(NamedTuple):
    events: list[Event]
    diagnostics: list[ParseDiagnostic]


class EventParseError(ValueError):
    def __init__(self, diagnostics: list[ParseDiagnostic]):
        self.diagnostics = diagnostics
        lines = "; ".join(f"line {d.line}: {d.message}" for d in diagnostics[:5])
        super().__init__(f"{len(diagnostics)} malformed record(s): {lines}")


FIELDS = ("user_id", "event_type", "ts", "sku", "category", "price_bucket", "url_id", "emb")


def _as_int(value, name: str, optional: bool = True) -> int | None:
    if value is None or value == "":
        if optional:
            return None
        raise ValueError(f"missing {name}")
    if isinstance(value, bool):
        raise ValueError(f"{name} must be an integer")
    if isinstance(value, float):
        if not value.is_integer():
            raise ValueError(f"{name} must be an integer, got {value}")
        return int(value)
    if isinstance(value, int):
        return value
    try:
        return int(str(value).strip())
    except ValueError:
        raise ValueError(f"{name} must be an integer, got {value!r}") from None


def _record_to_event(rec: dict) -> Event:
    emb = rec.get("emb")
    if isinstance(emb, str):
        emb = None if emb == "" else [_as_int(x, "emb") for x in emb.split(":")]
    if emb is not None:
        emb = tuple(_as_int(x, "emb", optional=False) for x in emb)
    if rec.get("event_type") in (None, ""):
        raise ValueError("missing event_type")
    return Event(
        user_id=_as_int(rec.get("user_id"), "user_id", optional=False),
        event_type=EventType.from_wire(rec["event_type"]),
        timestamp=_as_int(rec.get("ts"), "ts", optional=False),
        sku=_as_int(rec.get("sku"), "sku"),
        category=_as_int(rec.get("category"), "category"),
        price_bucket=_as_int(rec.get("price_bucket"), "price_bucket"),
        url_id=_as_int(rec.get("url_id"), "url_id"),
        text_embedding=emb,
    )


def parse_events(stream: IO, fmt: str = "jsonl", strict: bool = False) -> ParseResult:
    """Parse newline-delimited JSON or CSV event records in file order.

    Malformed records are skipped and reported with their 1-based line
    number; with ``strict=True`` they raise :class:`EventParseError`.
    """
    if fmt not in ("jsonl", "csv"):
        raise ValueError(f"unknown format {fmt!r}")
    text = stream.read()
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    events: list[Event] = []
    diags: list[ParseDiagnostic] = []
    if fmt == "jsonl":
        rows = ((i, line) for i, line in enumerate(text.splitlines(), start=1) if line.strip())
        for lineno, line in rows:
            try:
                rec = json.loads(line)
                if not isinstance(rec, dict):
                    raise ValueError("record is not a JSON object")
                events.append(_record_to_event(rec))
            except (ValueError, TypeError) as exc:
                diags.append(ParseDiagnostic(lineno, str(exc)))
    else:
        reader = csv.DictReader(io.StringIO(text))
        missing = set(FIELDS) - set(reader.fieldnames or ())
        if missing:
            raise EventParseError([ParseDiagnostic(1, f"missing columns {sorted(missing)}")])
        for rec in reader:
            try:
                events.append(_record_to_event(rec))
            except (ValueError, TypeError) as exc:
                diags.append(ParseDiagnostic(reader.line_num, str(exc)))
    if strict and diags:
        raise EventParseError(diags)
    return ParseResult(events, diags)


def event_to_record(e: Event) -> dict:
    rec = {"user_id": e.user_id, "event_type": e.event_type.wire_name, "ts": e.timestamp}
    for key, val in (("sku", e.sku), ("category", e.category), ("price_bucket", e.price_bucket),
                     ("url_id", e.url_id)):
        if val is not None:
            rec[key] = val
    if e.text_embedding is not None:
        rec["emb"] = list(e.text_embedding)
    return rec


def write_events(events: Iterable[Event], stream: IO[str], fmt: str = "jsonl") -> None:
    if fmt == "jsonl":
        for e in events:
            stream.write(json.dumps(event_to_record(e), separators=(",", ":")))
            stream.write("\n")
    elif fmt == "csv":
        writer = csv.writer(stream, lineterminator="\n")
        writer.writerow(FIELDS)
        for e in events:
            rec = event_to_record(e)
            row = [rec.get(k, "") for k in FIELDS]
            if "emb" in rec:
                row[-1] = ":".join(str(b) for b in rec["emb"])
            writer.writerow(row)
    else:
        raise ValueError(f"unknown format {fmt!r}")


# -- grouping and splitting --------------------------------------------------
def build_user_histories(events: Iterable[Event]) -> dict[int, UserHistory]:
    """Group by user, stable-sorting each user's events by timestamp."""
    buckets: dict[int, list[Event]] = {}
    for e in events:
        buckets.setdefault(e.user_id, []).append(e)
    return {uid: UserHistory(uid, tuple(sorted(evs, key=lambda e: e.timestamp)))
            for uid, evs in sorted(buckets.items())}


def restrict(histories: dict[int, UserHistory], start: int | None = None,
             end: int | None = None) -> dict[int, UserHistory]:
    """Keep events with ``start < ts <= end``; users left empty are dropped."""
    out = {}
    for uid, h in histories.items():
        evs = tuple(e for e in h.events
                    if (start is None or e.timestamp > start) and (end is None or e.timestamp <= end))
        if evs:
            out[uid] = UserHistory(uid, evs)
    return out


def split_by_timestamp(histories: dict[int, UserHistory], split: DataSplit):
    """Return ``(input_histories, target_histories)``; events after ``target_end`` are dropped."""
    return (restrict(histories, end=split.train_end),
            restrict(histories, start=split.train_end, end=split.target_end))
