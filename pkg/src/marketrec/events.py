"""Behavioral event logs and the weighted interaction matrices built from them.

Events are (user, item, timestamp, kind) records with kind one of click or
conversion.  An EventLog is an immutable, timestamp-sorted view over events
with dense user/item index maps.  The interaction matrix weights conversions
above clicks because a conversion is a far stronger preference signal than a
click.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, Iterator, Mapping

import numpy as np
import scipy.sparse as sp

SECONDS_PER_DAY = 86_400

EVENT_HEADER = "user_id\titem_id\ttimestamp\tkind"


class EventKind(str, enum.Enum):
    """Kind of observed feedback."""

    CLICK = "click"
    CONVERSION = "conversion"


@dataclass(frozen=True, slots=True)
class Event:
    """One observed interaction.

    Timestamps are integer seconds since epoch and must be non-negative.
    """

    user_id: str
    item_id: str
    timestamp: int
    kind: EventKind

    def __post_init__(self) -> None:
        if not self.user_id:
            raise ValueError("event user_id must be non-empty")
        if not self.item_id:
            raise ValueError("event item_id must be non-empty")
        if self.timestamp < 0:
            raise ValueError(f"event timestamp must be >= 0, got {self.timestamp}")
        if not isinstance(self.kind, EventKind):
            object.__setattr__(self, "kind", EventKind(self.kind))


class EventLog:
    """Immutable, timestamp-ordered collection of events.

    User and item ids are opaque strings externally; the log exposes dense
    integer index maps (sorted id order) for matrix construction.
    """

    __slots__ = ("_events", "_users", "_items", "_user_index", "_item_index")

    def __init__(self, events: Iterable[Event]):
        ordered = sorted(events, key=lambda e: e.timestamp)
        self._events: tuple[Event, ...] = tuple(ordered)
        self._users = tuple(sorted({e.user_id for e in self._events}))
        self._items = tuple(sorted({e.item_id for e in self._events}))
        self._user_index = {u: i for i, u in enumerate(self._users)}
        self._item_index = {it: i for i, it in enumerate(self._items)}

    @property
    def events(self) -> tuple[Event, ...]:
        return self._events

    @property
    def users(self) -> tuple[str, ...]:
        return self._users

    @property
    def items(self) -> tuple[str, ...]:
        return self._items

    @property
    def user_index(self) -> Mapping[str, int]:
        return self._user_index

    @property
    def item_index(self) -> Mapping[str, int]:
        return self._item_index

    def __len__(self) -> int:
        return len(self._events)

    def __iter__(self) -> Iterator[Event]:
        return iter(self._events)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EventLog):
            return NotImplemented
        return self._events == other._events

    def __repr__(self) -> str:
        return f"EventLog({len(self._events)} events, {len(self._users)} users, {len(self._items)} items)"

    def by_user(self, kind: EventKind | None = None) -> dict[str, list[Event]]:
        """Group events per user in timestamp order, optionally filtered by kind."""
        grouped: dict[str, list[Event]] = {}
        for e in self._events:
            if kind is not None and e.kind is not kind:
                continue
            grouped.setdefault(e.user_id, []).append(e)
        return grouped


@dataclass(frozen=True)
class TemporalSplit:
    """Train/test partition of a log at a threshold timestamp.

    Train holds events with timestamp < t_threshold, test the rest.
    """

    train: EventLog
    test: EventLog
    t_threshold: int


@dataclass(frozen=True)
class InteractionMatrix:
    """Sparse user x item matrix of interaction weights.

    Cell (u, i) is w_click * clicks(u, i) + w_conv * conversions(u, i).
    Every stored weight is positive and w_conv > w_click > 0.
    """

    matrix: sp.csr_matrix
    user_ids: tuple[str, ...]
    item_ids: tuple[str, ...]
    w_click: float
    w_conv: float

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape

    @property
    def nnz(self) -> int:
        return self.matrix.nnz


def load_events(path: str) -> EventLog:
    """Read an event TSV (header user_id<TAB>item_id<TAB>timestamp<TAB>kind).

    Rows may be out of order in the file; the returned log is sorted by
    timestamp.  Malformed rows raise ValueError naming the line number.
    """
    with open(path, "r", encoding="utf-8", newline="") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise ValueError(f"{path}: empty file, expected header '{EVENT_HEADER}'")
    if lines[0] != EVENT_HEADER:
        raise ValueError(f"{path}: line 1: bad header {lines[0]!r}, expected {EVENT_HEADER!r}")
    events = []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split("\t")
        if len(parts) != 4:
            raise ValueError(f"{path}: line {lineno}: expected 4 tab-separated fields, got {len(parts)}")
        user_id, item_id, ts_raw, kind_raw = parts
        try:
            timestamp = int(ts_raw)
        except ValueError:
            raise ValueError(f"{path}: line {lineno}: timestamp {ts_raw!r} is not an integer") from None
        try:
            kind = EventKind(kind_raw)
        except ValueError:
            raise ValueError(
                f"{path}: line {lineno}: unknown event kind {kind_raw!r}, expected 'click' or 'conversion'"
            ) from None
        try:
            events.append(Event(user_id, item_id, timestamp, kind))
        except ValueError as exc:
            raise ValueError(f"{path}: line {lineno}: {exc}") from None
    return EventLog(events)


def save_events(path: str, log: EventLog) -> None:
    """Write a log in the event TSV format (LF endings, sorted by timestamp)."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(EVENT_HEADER + "\n")
        for e in log:
            fh.write(f"{e.user_id}\t{e.item_id}\t{e.timestamp}\t{e.kind.value}\n")


def temporal_split(log: EventLog, t_threshold: int) -> TemporalSplit:
    """Split a log into events before t_threshold and events at/after it."""
    train = [e for e in log if e.timestamp < t_threshold]
    test = [e for e in log if e.timestamp >= t_threshold]
    return TemporalSplit(EventLog(train), EventLog(test), t_threshold)


def lookback_filter(log: EventLog, now: int, days: int) -> EventLog:
    """Retain events with now - 86400*days <= timestamp <= now.

    Training pipelines window their input this way so that stale behavior
    does not dominate the models.
    """
    if days <= 0:
        raise ValueError(f"look-back days must be positive, got {days}")
    lo = now - SECONDS_PER_DAY * days
    return EventLog([e for e in log if lo <= e.timestamp <= now])


def build_interaction_matrix(
    log: EventLog,
    w_click: float = 1.0,
    w_conv: float = 5.0,
) -> InteractionMatrix:
    """Aggregate a log into a weighted sparse user x item matrix.

    Conversions must weigh strictly more than clicks, and both weights must
    be positive.
    """
    if w_click <= 0:
        raise ValueError(f"w_click must be positive, got {w_click}")
    if w_conv <= w_click:
        raise ValueError(f"w_conv ({w_conv}) must exceed w_click ({w_click})")
    rows, cols, vals = [], [], []
    for e in log:
        rows.append(log.user_index[e.user_id])
        cols.append(log.item_index[e.item_id])
        vals.append(w_click if e.kind is EventKind.CLICK else w_conv)
    shape = (len(log.users), len(log.items))
    mat = sp.csr_matrix(
        (np.asarray(vals, dtype=np.float64), (rows, cols)), shape=shape
    )
    mat.sum_duplicates()
    return InteractionMatrix(mat, log.users, log.items, float(w_click), float(w_conv))
