"""Scanner transaction CSV parsing, weekly aggregation and train/test splits."""

from __future__ import annotations

import csv
import io
import math
import re
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence

from .core import PriceSeries, RatioSeries, compute_ratios, tukey_filter
from .errors import (
    EmptySplit,
    InsufficientWeeks,
    MalformedRow,
    MissingColumn,
    OverlappingSplit,
    ScanguardError,
)

DEFAULT_COLUMNS = {
    "store_id": "store_id",
    "item_id": "item_id",
    "week": "week",
    "price": "price",
    "volume": "volume",
}


@dataclass(frozen=True)
class TransactionRecord:
    store_id: str
    item_id: str
    week: int
    unit_price: float
    volume: float


@dataclass
class ParseResult:
    records: List[TransactionRecord]
    errors: List[MalformedRow] = field(default_factory=list)

    def __iter__(self):
        return iter(self.records)

    def __len__(self) -> int:
        return len(self.records)


def _text_stream(stream):
    if isinstance(stream, (bytes, bytearray)):
        return io.StringIO(stream.decode("utf-8-sig"))
    if isinstance(stream, str):
        return io.StringIO(stream)
    if isinstance(stream, io.TextIOBase):
        return stream
    return io.TextIOWrapper(stream, encoding="utf-8-sig", newline="")


def _positive(raw: str, name: str, line: int) -> float:
    try:
        v = float(raw)
    except (TypeError, ValueError):
        raise MalformedRow(line, f"{name} {raw!r} is not a number") from None
    if not math.isfinite(v) or v <= 0:
        raise MalformedRow(line, f"{name} must be positive, got {raw!r}")
    return v


def parse_scanner_csv(stream, columns: Optional[Dict[str, str]] = None) -> ParseResult:
    """Read transaction rows from a UTF-8 comma-delimited file.

    ``columns`` maps the logical fields (``store_id``, ``item_id``, ``week``,
    ``price``, ``volume``) to header names in the file. Bad rows are collected
    in ``errors`` with their line numbers; parsing continues past them.
    """
    names = dict(DEFAULT_COLUMNS)
    names.update(columns or {})
    reader = csv.reader(_text_stream(stream))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise MissingColumn("empty input: no header row") from None
    missing = [v for v in names.values() if v not in header]
    if missing:
        raise MissingColumn(f"missing column(s): {', '.join(missing)}")
    pos = {k: header.index(v) for k, v in names.items()}

    records, errors = [], []
    for row in reader:
        line = reader.line_num
        if not row or all(not c.strip() for c in row):
            continue
        try:
            if len(row) < len(header):
                raise MalformedRow(line, f"expected {len(header)} fields, got {len(row)}")
            week_raw = row[pos["week"]].strip()
            try:
                week = int(week_raw)
            except ValueError:
                raise MalformedRow(line, f"week {week_raw!r} is not an integer") from None
            records.append(TransactionRecord(
                store_id=row[pos["store_id"]].strip(),
                item_id=row[pos["item_id"]].strip(),
                week=week,
                unit_price=_positive(row[pos["price"]].strip(), "price", line),
                volume=_positive(row[pos["volume"]].strip(), "volume", line),
            ))
        except MalformedRow as exc:
            errors.append(exc)
    return ParseResult(records, errors)


def weekly_series(records: Iterable[TransactionRecord], store_id: str, item_id: str,
                  weighted: bool = True) -> PriceSeries:
    """Aggregate one (store, item) into weekly average price and total volume.

    The weekly price is revenue over units sold, or the plain mean of the
    transaction prices when ``weighted`` is false. Missing weeks are kept as
    gaps; ratios later span them.
    """
    by_week = defaultdict(list)
    for r in records:
        if r.store_id == store_id and r.item_id == item_id:
            by_week[r.week].append(r)
    weeks = sorted(by_week)
    if len(weeks) < 2:
        raise InsufficientWeeks(
            f"store {store_id!r}, item {item_id!r}: need 2 distinct weeks, found {len(weeks)}"
        )
    prices, volumes = [], []
    for w in weeks:
        rows = by_week[w]
        # fsum is exactly rounded, so the result does not depend on row order
        units = math.fsum(r.volume for r in rows)
        if weighted:
            p = math.fsum(r.unit_price * r.volume for r in rows) / units
        else:
            p = math.fsum(r.unit_price for r in rows) / len(rows)
        # the exact mean lies in the price range; the division can round one ulp outside it
        lo, hi = min(r.unit_price for r in rows), max(r.unit_price for r in rows)
        prices.append(min(max(p, lo), hi))
        volumes.append(units)
    return PriceSeries(store_id, item_id, weeks, prices, volumes)


Predicate = Callable[[str, int], bool]


@dataclass(frozen=True)
class SplitSpec:
    """Row selectors on ``(store_id, week)`` for the training and test periods."""

    train_filter: Predicate
    test_filter: Predicate


@dataclass(frozen=True)
class WeekFilter:
    """Selector built from text such as ``"store=S01|S02;weeks=1-52"``.

    Either key may be omitted; a missing ``store`` (or ``store=*``) matches
    every store and a missing ``weeks`` matches every week.
    """

    stores: Optional[frozenset] = None
    week_lo: Optional[int] = None
    week_hi: Optional[int] = None

    def __call__(self, store_id: str, week: int) -> bool:
        if self.stores is not None and store_id not in self.stores:
            return False
        if self.week_lo is not None and week < self.week_lo:
            return False
        if self.week_hi is not None and week > self.week_hi:
            return False
        return True

    @classmethod
    def parse(cls, text: str) -> "WeekFilter":
        stores, lo, hi = None, None, None
        for part in filter(None, (p.strip() for p in text.split(";"))):
            key, sep, value = part.partition("=")
            key, value = key.strip(), value.strip()
            if not sep:
                raise ValueError(f"filter term {part!r} is not key=value")
            if key == "store":
                if value not in ("", "*"):
                    stores = frozenset(v.strip() for v in value.split("|") if v.strip())
            elif key == "weeks":
                m = re.fullmatch(r"(\d*)\s*-\s*(\d*)|(\d+)", value)
                if not m:
                    raise ValueError(f"bad week range {value!r}; use LO-HI, LO-, -HI or N")
                if m.group(3) is not None:
                    lo = hi = int(m.group(3))
                else:
                    lo = int(m.group(1)) if m.group(1) else None
                    hi = int(m.group(2)) if m.group(2) else None
            else:
                raise ValueError(f"unknown filter key {key!r}")
        return cls(stores, lo, hi)

    def with_store(self, store_id: str) -> "WeekFilter":
        return WeekFilter(frozenset([store_id]), self.week_lo, self.week_hi)


@dataclass(frozen=True)
class SplitResult:
    train: RatioSeries
    test: RatioSeries
    test_series: PriceSeries
    train_stores: tuple

    def __iter__(self):
        yield self.train
        yield self.test


def train_test_split(records: Sequence[TransactionRecord], spec: SplitSpec, item_id: Optional[str] = None,
                     drop_unchanged: bool = False, eps: float = 0.0, weighted: bool = True) -> SplitResult:
    """Training ratio pool over every selected store, and one store's test series.

    Ratios never bridge two stores. With ``drop_unchanged`` both outputs are
    reduced to their Tukey samples before any method sees them.
    """
    recs = [r for r in records if item_id is None or r.item_id == item_id]
    items = {r.item_id for r in recs}
    if item_id is None and len(items) > 1:
        raise ScanguardError(f"records hold {len(items)} items; choose one")
    train_recs = [r for r in recs if spec.train_filter(r.store_id, r.week)]
    test_recs = [r for r in recs if spec.test_filter(r.store_id, r.week)]
    if not train_recs or not test_recs:
        raise EmptySplit("training or test selection is empty")
    overlap = {(r.store_id, r.week) for r in train_recs} & {(r.store_id, r.week) for r in test_recs}
    if overlap:
        raise OverlappingSplit(f"{len(overlap)} (store, week) keys in both training and test, "
                               f"e.g. {sorted(overlap)[0]}")
    test_stores = sorted({r.store_id for r in test_recs})
    if len(test_stores) != 1:
        raise ScanguardError(f"test selection must hold one store, got {test_stores}")
    item = recs[0].item_id

    parts, used = [], []
    for store in sorted({r.store_id for r in train_recs}):
        try:
            ps = weekly_series(train_recs, store, item, weighted)
        except InsufficientWeeks:
            continue
        parts.append(compute_ratios(ps, tag_store=True))
        used.append(store)
    if not parts:
        raise EmptySplit("no training store has two or more weeks")
    train = RatioSeries.concat(parts)
    test_series = weekly_series(test_recs, test_stores[0], item, weighted)
    test = compute_ratios(test_series, tag_store=True)
    if drop_unchanged:
        train = tukey_filter(train, eps)
        test = tukey_filter(test, eps)
    return SplitResult(train, test, test_series, tuple(used))
