"""Append-only behavior event log with name/time-window retrieval.

Records are stored in a single segment file, one length-prefixed record per
event::

    u32  record length (bytes that follow, little-endian)
    u64  event_id
    i64  timestamp_ms
    u16  name length
    ...  name bytes (utf-8)
    ...  payload bytes (compact JSON object)

An in-memory index (event_name -> events ascending by (timestamp_ms, event_id))
is rebuilt on open by a full scan. A truncated trailing record is dropped and
the file is cut back to the last complete record.
"""

from __future__ import annotations

import bisect
import json
import math
import os
import struct
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Any, Iterable, Iterator

__all__ = [
    "BehaviorEvent",
    "TimeWindow",
    "EventLog",
    "LogSnapshot",
    "EventLogError",
    "OutOfOrderTimestamp",
    "MalformedPayload",
    "StorageFailure",
    "encode_payload",
    "decode_payload",
    "validate_attributes",
    "import_trace",
    "export_trace",
]

_HEADER = struct.Struct("<I")
_FIXED = struct.Struct("<QqH")

# Sentinels bounding every assignable event_id / representable timestamp.
MAX_EVENT_ID = 2**64
MIN_TIMESTAMP = -(2**63)


class EventLogError(Exception):
    pass


class OutOfOrderTimestamp(EventLogError):
    pass


class MalformedPayload(EventLogError, ValueError):
    pass


class StorageFailure(EventLogError, OSError):
    pass


@dataclass(frozen=True)
class BehaviorEvent:
    event_id: int
    event_name: str
    timestamp_ms: int
    payload: bytes

    @property
    def key(self) -> tuple[int, int]:
        return (self.timestamp_ms, self.event_id)


@dataclass(frozen=True)
class TimeWindow:
    """Half-open window ``(start_ms, end_ms]``."""

    start_ms: int
    end_ms: int

    def __post_init__(self):
        if not self.start_ms < self.end_ms:
            raise ValueError(f"invalid window ({self.start_ms}, {self.end_ms}]")

    @classmethod
    def ending_at(cls, end_ms: int, length_s: int) -> "TimeWindow":
        return cls(end_ms - length_s * 1000, end_ms)

    def __contains__(self, ts: int) -> bool:
        return self.start_ms < ts <= self.end_ms


def _check_value(value: Any) -> bool:
    if isinstance(value, bool) or isinstance(value, str):
        return True
    if isinstance(value, (int, float)):
        return math.isfinite(value)
    if isinstance(value, list):
        if not value:
            return True
        if all(isinstance(v, str) for v in value):
            return True
        return all(
            isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)
            for v in value
        )
    return False


def validate_attributes(attrs: Any) -> dict:
    """Raise MalformedPayload unless ``attrs`` is a flat attribute map."""
    if not isinstance(attrs, dict):
        raise MalformedPayload(f"payload is not an object: {type(attrs).__name__}")
    for key, value in attrs.items():
        if not isinstance(key, str):
            raise MalformedPayload(f"non-text key {key!r}")
        if not _check_value(value):
            raise MalformedPayload(f"unsupported value for {key!r}: {value!r}")
    return attrs


def encode_payload(attrs: dict) -> bytes:
    """Deterministic compact JSON encoding of an attribute map."""
    return json.dumps(
        attrs, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False
    ).encode("utf-8")


def decode_payload(payload: bytes) -> dict:
    try:
        attrs = json.loads(payload)
    except (ValueError, UnicodeDecodeError) as exc:
        raise MalformedPayload(str(exc)) from exc
    if not isinstance(attrs, dict):
        raise MalformedPayload("payload is not an object")
    return attrs


class _Index:
    """Per-name event list; ascending by (timestamp_ms, event_id) and by id."""

    __slots__ = ("events", "timestamps", "ids")

    def __init__(self):
        self.events: list[BehaviorEvent] = []
        self.timestamps: list[int] = []
        self.ids: list[int] = []

    def add(self, event: BehaviorEvent) -> None:
        # ids last: readers bound by snapshot head never see a half-added entry
        self.events.append(event)
        self.timestamps.append(event.timestamp_ms)
        self.ids.append(event.event_id)

    def _limit(self, head_id: int) -> int:
        return bisect.bisect_right(self.ids, head_id)

    def window(self, start_ms: int, end_ms: int, head_id: int) -> list[BehaviorEvent]:
        limit = self._limit(head_id)
        lo = bisect.bisect_right(self.timestamps, start_ms, 0, limit)
        hi = bisect.bisect_right(self.timestamps, end_ms, lo, limit)
        return self.events[lo:hi]

    def since(self, after_ts: int, after_id: int, end_ms: int, head_id: int) -> list[BehaviorEvent]:
        limit = self._limit(head_id)
        lo = bisect.bisect_left(self.timestamps, after_ts, 0, limit)
        # within equal timestamps ids ascend, so skip ids <= after_id
        lo = bisect.bisect_right(self.ids, after_id, lo, bisect.bisect_right(self.timestamps, after_ts, lo, limit))
        hi = bisect.bisect_right(self.timestamps, end_ms, lo, limit)
        return self.events[lo:hi]


class LogSnapshot:
    """Read view of the log bounded to events appended before it was taken."""

    def __init__(self, log: "EventLog", head_id: int, head_ts: int | None):
        self._log = log
        self.head_id = head_id
        self.head_ts = head_ts

    def query(self, event_name: str, window: TimeWindow) -> list[BehaviorEvent]:
        index = self._log._index.get(event_name)
        if index is None:
            return []
        return index.window(window.start_ms, window.end_ms, self.head_id)

    def query_since(
        self, event_name: str, after_ts_ms: int, after_event_id: int, end_ms: int
    ) -> list[BehaviorEvent]:
        index = self._log._index.get(event_name)
        if index is None:
            return []
        return index.since(after_ts_ms, after_event_id, end_ms, self.head_id)

    def position_after(self, request_time_ms: int) -> tuple[int, int]:
        """Resume position covering every event a query ending at
        ``request_time_ms`` could have returned from this snapshot.

        Later ``query_since`` calls from this position return exactly the
        events the snapshot did not cover, including ones appended later.
        """
        if self.head_ts is None:
            return (MIN_TIMESTAMP, 0)
        if self.head_ts <= request_time_ms:
            return (self.head_ts, self.head_id)
        return (request_time_ms, MAX_EVENT_ID)


class EventLog:
    """Append-only store of BehaviorEvents.

    ``path=None`` keeps everything in memory (same semantics, no durability).
    Single writer, any number of readers; each query reads a consistent
    snapshot taken when it starts.
    """

    def __init__(self, path: str | os.PathLike | None = None, *, validate: bool = True, sync: bool = False):
        self.path = Path(path) if path is not None else None
        self.validate = validate
        self.sync = sync
        self._index: dict[str, _Index] = {}
        self._count = 0
        self._last_id = 0
        self._last_ts: int | None = None
        self._lock = threading.Lock()
        self._fh: IO[bytes] | None = None
        if self.path is not None:
            self._open_file()

    # -- persistence -------------------------------------------------

    def _open_file(self) -> None:
        assert self.path is not None
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            if self.path.exists():
                good = self._scan()
                if good != self.path.stat().st_size:
                    with open(self.path, "r+b") as fh:
                        fh.truncate(good)
            self._fh = open(self.path, "ab")
        except OSError as exc:
            raise StorageFailure(str(exc)) from exc

    def _scan(self) -> int:
        """Load all complete records; return byte offset after the last one."""
        assert self.path is not None
        data = self.path.read_bytes()
        offset = 0
        while offset + _HEADER.size <= len(data):
            (length,) = _HEADER.unpack_from(data, offset)
            end = offset + _HEADER.size + length
            if length < _FIXED.size or end > len(data):
                break
            event_id, ts, name_len = _FIXED.unpack_from(data, offset + _HEADER.size)
            name_start = offset + _HEADER.size + _FIXED.size
            if name_start + name_len > end:
                break
            name = data[name_start : name_start + name_len].decode("utf-8")
            payload = data[name_start + name_len : end]
            self._insert(BehaviorEvent(event_id, name, ts, payload))
            offset = end
        return offset

    @staticmethod
    def _pack(event: BehaviorEvent) -> bytes:
        name = event.event_name.encode("utf-8")
        body = _FIXED.pack(event.event_id, event.timestamp_ms, len(name)) + name + event.payload
        return _HEADER.pack(len(body)) + body

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def __enter__(self) -> "EventLog":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # -- writes ------------------------------------------------------

    def _insert(self, event: BehaviorEvent) -> None:
        index = self._index.get(event.event_name)
        if index is None:
            index = self._index[event.event_name] = _Index()
        index.add(event)
        self._count += 1
        self._last_id = event.event_id
        self._last_ts = event.timestamp_ms

    def append(self, event_name: str, timestamp_ms: int, payload: bytes | dict) -> int:
        """Append one event and return its id (previous max + 1)."""
        if not event_name:
            raise ValueError("event_name must be non-empty")
        if isinstance(payload, dict):
            payload = encode_payload(validate_attributes(payload))
        elif self.validate:
            validate_attributes(decode_payload(payload))
        with self._lock:
            if self._last_ts is not None and timestamp_ms < self._last_ts:
                raise OutOfOrderTimestamp(
                    f"timestamp {timestamp_ms} precedes last appended {self._last_ts}"
                )
            event = BehaviorEvent(self._last_id + 1, event_name, int(timestamp_ms), bytes(payload))
            if self._fh is not None:
                try:
                    self._fh.write(self._pack(event))
                    self._fh.flush()
                    if self.sync:
                        os.fsync(self._fh.fileno())
                except OSError as exc:
                    raise StorageFailure(str(exc)) from exc
            self._insert(event)
            return event.event_id

    def extend(self, records: Iterable[tuple[str, int, bytes | dict]]) -> int:
        n = 0
        for name, ts, payload in records:
            self.append(name, ts, payload)
            n += 1
        return n

    # -- reads -------------------------------------------------------

    def snapshot(self) -> LogSnapshot:
        with self._lock:
            return LogSnapshot(self, self._last_id, self._last_ts)

    def query(self, event_name: str, window: TimeWindow) -> list[BehaviorEvent]:
        """Events named ``event_name`` with timestamp in ``(start, end]``."""
        return self.snapshot().query(event_name, window)

    def query_since(
        self, event_name: str, after_ts_ms: int, after_event_id: int, end_ms: int
    ) -> list[BehaviorEvent]:
        """Events strictly after position (after_ts_ms, after_event_id), ts <= end_ms."""
        return self.snapshot().query_since(event_name, after_ts_ms, after_event_id, end_ms)

    def event_names(self) -> list[str]:
        return sorted(self._index)

    def events(self, event_name: str | None = None) -> Iterator[BehaviorEvent]:
        """All events (of one name, or all names merged) in append order."""
        if event_name is not None:
            index = self._index.get(event_name)
            yield from (index.events if index else ())
            return
        merged: list[BehaviorEvent] = []
        for index in self._index.values():
            merged.extend(index.events)
        merged.sort(key=lambda e: e.event_id)
        yield from merged

    @property
    def last_event_id(self) -> int:
        return self._last_id

    @property
    def last_timestamp_ms(self) -> int | None:
        return self._last_ts

    def __len__(self) -> int:
        return self._count


def import_trace(source: str | os.PathLike | Iterable[str], log: EventLog) -> int:
    """Append newline-delimited JSON records ``{timestamp_ms, event_name, payload}``."""
    if isinstance(source, (str, os.PathLike)):
        with open(source, encoding="utf-8") as fh:
            return import_trace(list(fh), log)
    n = 0
    for lineno, line in enumerate(source, 1):
        line = line.strip()
        if not line:
            continue
        try:
            rec = json.loads(line)
            payload = rec["payload"]
            name, ts = rec["event_name"], int(rec["timestamp_ms"])
        except (ValueError, KeyError, TypeError) as exc:
            raise MalformedPayload(f"trace line {lineno}: {exc}") from exc
        if isinstance(payload, str):
            payload = payload.encode("utf-8")
        log.append(name, ts, payload)
        n += 1
    return n


def export_trace(log: EventLog, fh) -> int:
    n = 0
    for event in log.events():
        try:
            payload: Any = json.loads(event.payload)
        except ValueError:
            payload = event.payload.decode("utf-8", "replace")
        rec = {"timestamp_ms": event.timestamp_ms, "event_name": event.event_name, "payload": payload}
        fh.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")
        n += 1
    return n
