"""Durable measurement history per (sensor, attribute) series.

Storage layout: one append-only JSON-lines file per series under the data
directory (file names are digests of the series key; every line is
self-describing, so recovery just scans the directory). Appends buffer in
memory and a flusher thread fsyncs every ``flush_window_ms``, so a crash
loses at most that window. With ``data_dir=None`` the store is memory-only.

Aggregation uses half-open buckets ``[start, start + width)`` aligned to the
query start; the queried range must be a whole number of buckets.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import threading
import time
from bisect import bisect_left, insort
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

from .clock import Clock
from .errors import (
    InvalidRangeError,
    NonFiniteValueError,
    UnitMismatchError,
    UnknownSeriesError,
)

logger = logging.getLogger(__name__)

SeriesKey = tuple[str, str]  # (sensor_id, attribute)

AGG_FNS = ("Avg", "Min", "Max", "Sum", "Count")

DEFAULT_ROLLUP_WIDTHS_MS = (3_600_000, 86_400_000)  # 1 h, 1 d


@dataclass(frozen=True)
class Measurement:
    sensor_id: str
    attribute: str
    value: float
    unit: str = ""
    observed_at: int = 0
    quality: str = "Raw"  # Raw | Cleaned
    seq: Optional[int] = None  # global append sequence, assigned by the store

    @property
    def series_key(self) -> SeriesKey:
        return (self.sensor_id, self.attribute)

    def to_obj(self) -> dict:
        return {
            "sensor_id": self.sensor_id,
            "attribute": self.attribute,
            "value": self.value,
            "unit": self.unit,
            "observed_at": self.observed_at,
            "quality": self.quality,
            "seq": self.seq,
        }

    @classmethod
    def from_obj(cls, obj: dict) -> "Measurement":
        return cls(
            sensor_id=obj["sensor_id"],
            attribute=obj["attribute"],
            value=float(obj["value"]),
            unit=obj.get("unit", ""),
            observed_at=int(obj["observed_at"]),
            quality=obj.get("quality", "Raw"),
            seq=obj.get("seq"),
        )


@dataclass(frozen=True)
class AggregateBucket:
    sensor_id: str
    attribute: str
    bucket_start: int
    bucket_end: int
    fn: str
    value: Optional[float]
    sample_count: int

    def to_obj(self) -> dict:
        return {
            "sensor_id": self.sensor_id,
            "attribute": self.attribute,
            "bucket_start": self.bucket_start,
            "bucket_end": self.bucket_end,
            "fn": self.fn,
            "value": self.value,
            "sample_count": self.sample_count,
        }


@dataclass(frozen=True)
class SeriesQuery:
    sensor_id: str
    attribute: str
    t0: int
    t1: int
    bucket_ms: Optional[int] = None
    fn: Optional[str] = None
    quality: Optional[str] = None

    def check(self) -> None:
        if self.t0 >= self.t1:
            raise InvalidRangeError(f"t0 {self.t0} must be < t1 {self.t1}")
        if self.fn is not None:
            if self.fn not in AGG_FNS:
                raise InvalidRangeError(f"unknown aggregate fn {self.fn!r}")
            if not self.bucket_ms or self.bucket_ms <= 0:
                raise InvalidRangeError("bucket width must be > 0")
            if (self.t1 - self.t0) % self.bucket_ms != 0:
                raise InvalidRangeError(
                    "range must be a whole number of buckets "
                    f"({self.t1 - self.t0} ms vs width {self.bucket_ms} ms)"
                )


@dataclass
class _Series:
    key: SeriesKey
    unit: Optional[str] = None
    # rows kept sorted by (observed_at, seq) so reads are ordered scans
    rows: list[Measurement] = field(default_factory=list)
    dedup: set[tuple[int, float]] = field(default_factory=set)
    # rollups[width][start] -> (count, sum, min, max); deleted when dirtied
    rollups: dict[int, dict[int, tuple[int, float, float, float]]] = field(default_factory=dict)


class TimeseriesStore:
    """Append-only measurement history with bucket aggregation."""

    def __init__(
        self,
        data_dir: Optional[str | Path] = None,
        clock: Optional[Clock] = None,
        *,
        flush_window_ms: int = 1_000,
    ):
        self._clock = clock
        self._dir = Path(data_dir) if data_dir else None
        self._flush_window_s = flush_window_ms / 1000.0
        self._series: dict[SeriesKey, _Series] = {}
        self._seq = 0
        self._lock = threading.RLock()
        self._buffers: dict[SeriesKey, list[str]] = {}
        self._files: dict[SeriesKey, Path] = {}
        self._stop = threading.Event()
        self._flusher: Optional[threading.Thread] = None
        if self._dir:
            self._dir.mkdir(parents=True, exist_ok=True)
            self._recover()
            self._flusher = threading.Thread(target=self._flush_loop, daemon=True, name="ts-flusher")
            self._flusher.start()

    # -- writes ----------------------------------------------------------

    def append(self, m: Measurement) -> Optional[int]:
        """Store one measurement; returns its global sequence number.

        Duplicate (series, observed_at, value) triples collapse silently and
        return None. The first write to a series fixes its unit.
        """
        if not isinstance(m.value, (int, float)) or isinstance(m.value, bool) or not math.isfinite(m.value):
            raise NonFiniteValueError(f"refusing to store value {m.value!r}")
        with self._lock:
            series = self._series.get(m.series_key)
            if series is None:
                series = _Series(key=m.series_key, unit=m.unit)
                self._series[m.series_key] = series
            elif series.unit is not None and m.unit != series.unit:
                raise UnitMismatchError(
                    f"series {m.series_key} uses unit {series.unit!r}, got {m.unit!r}"
                )
            dedup_key = (m.observed_at, float(m.value))
            if dedup_key in series.dedup:
                return None
            self._seq += 1
            stored = Measurement(
                sensor_id=m.sensor_id,
                attribute=m.attribute,
                value=float(m.value),
                unit=m.unit,
                observed_at=m.observed_at,
                quality=m.quality,
                seq=self._seq,
            )
            series.dedup.add(dedup_key)
            if series.rows and stored.observed_at < series.rows[-1].observed_at:
                # late arrival: keep rows ordered and invalidate covering rollups
                insort(series.rows, stored, key=lambda r: (r.observed_at, r.seq))
                for width, buckets in series.rollups.items():
                    buckets.pop((stored.observed_at // width) * width, None)
            else:
                series.rows.append(stored)
                for width, buckets in series.rollups.items():
                    buckets.pop((stored.observed_at // width) * width, None)
            if self._dir:
                line = json.dumps(stored.to_obj(), sort_keys=True, separators=(",", ":"))
                self._buffers.setdefault(m.series_key, []).append(line)
            return stored.seq

    def flush(self) -> None:
        """Force buffered lines to disk (fsync)."""
        if not self._dir:
            return
        with self._lock:
            buffers = {k: v for k, v in self._buffers.items() if v}
            self._buffers = {}
        for key, lines in buffers.items():
            path = self._path_for(key)
            with open(path, "a", encoding="utf-8") as fh:
                fh.write("\n".join(lines) + "\n")
                fh.flush()
                os.fsync(fh.fileno())

    def close(self) -> None:
        self._stop.set()
        if self._flusher:
            self._flusher.join(timeout=2.0)
        self.flush()

    # -- reads -----------------------------------------------------------

    def query_raw(self, q: SeriesQuery) -> list[Measurement]:
        """Samples with t0 <= observed_at < t1, ascending, ties by insertion."""
        q.check()
        if q.fn is not None:
            raise InvalidRangeError("query_raw takes no aggregate fn")
        with self._lock:
            series = self._series.get((q.sensor_id, q.attribute))
            if series is None:
                return []
            rows = self._slice(series, q.t0, q.t1)
            if q.quality is not None:
                rows = [r for r in rows if r.quality == q.quality]
            return rows

    def query_aggregate(self, q: SeriesQuery) -> list[AggregateBucket]:
        """Aggregate buckets tiling [t0, t1), aligned to t0."""
        q.check()
        if q.fn is None:
            raise InvalidRangeError("query_aggregate needs an aggregate fn")
        width = int(q.bucket_ms)  # type: ignore[arg-type]
        with self._lock:
            series = self._series.get((q.sensor_id, q.attribute))
            out = []
            for start in range(q.t0, q.t1, width):
                end = start + width
                stats = None
                if series is not None:
                    if q.quality is None and start % width == 0:
                        stats = series.rollups.get(width, {}).get(start)
                    if stats is None:
                        rows = self._slice(series, start, end)
                        if q.quality is not None:
                            rows = [r for r in rows if r.quality == q.quality]
                        stats = self._fold(rows)
                else:
                    stats = (0, 0.0, math.inf, -math.inf)
                count, total, lo, hi = stats
                value: Optional[float]
                if count == 0:
                    value = None
                elif q.fn == "Avg":
                    value = total / count
                elif q.fn == "Sum":
                    value = total
                elif q.fn == "Min":
                    value = lo
                elif q.fn == "Max":
                    value = hi
                else:
                    value = float(count)
                out.append(AggregateBucket(
                    sensor_id=q.sensor_id,
                    attribute=q.attribute,
                    bucket_start=start,
                    bucket_end=end,
                    fn=q.fn,
                    value=value,
                    sample_count=count,
                ))
            return out

    def rollup_maintenance(self, key: SeriesKey, widths: Iterable[int] = DEFAULT_ROLLUP_WIDTHS_MS) -> None:
        """Materialize per-bucket stats on the epoch-aligned grid.

        Late appends delete the covering bucket, so a materialized entry is
        always equal to an on-the-fly recompute.
        """
        with self._lock:
            series = self._series.get(key)
            if series is None:
                raise UnknownSeriesError(f"no series {key}")
            if not series.rows:
                return
            lo = series.rows[0].observed_at
            hi = series.rows[-1].observed_at
            for width in widths:
                buckets = series.rollups.setdefault(int(width), {})
                first = (lo // width) * width
                for start in range(first, hi + 1, int(width)):
                    buckets[start] = self._fold(self._slice(series, start, start + int(width)))

    def list_series(self) -> list[SeriesKey]:
        with self._lock:
            return sorted(self._series.keys())

    def series_unit(self, key: SeriesKey) -> Optional[str]:
        with self._lock:
            series = self._series.get(key)
            return series.unit if series else None

    def count(self, key: Optional[SeriesKey] = None) -> int:
        with self._lock:
            if key is not None:
                series = self._series.get(key)
                return len(series.rows) if series else 0
            return sum(len(s.rows) for s in self._series.values())

    def iter_rows(self) -> list[Measurement]:
        """Snapshot of every stored row, ordered by series then time."""
        with self._lock:
            out: list[Measurement] = []
            for key in sorted(self._series):
                out.extend(self._series[key].rows)
            return out

    def max_seq(self) -> int:
        with self._lock:
            return self._seq

    # -- internals ---------------------------------------------------------

    @staticmethod
    def _slice(series: _Series, t0: int, t1: int) -> list[Measurement]:
        rows = series.rows
        lo = bisect_left(rows, t0, key=lambda r: r.observed_at)
        hi = bisect_left(rows, t1, key=lambda r: r.observed_at)
        return rows[lo:hi]

    @staticmethod
    def _fold(rows: list[Measurement]) -> tuple[int, float, float, float]:
        if not rows:
            return (0, 0.0, math.inf, -math.inf)
        values = [r.value for r in rows]
        return (len(values), math.fsum(values), min(values), max(values))

    def _path_for(self, key: SeriesKey) -> Path:
        path = self._files.get(key)
        if path is None:
            digest = hashlib.sha1(f"{key[0]}\x00{key[1]}".encode()).hexdigest()[:24]
            path = self._dir / f"{digest}.jsonl"  # type: ignore[operator]
            self._files[key] = path
        return path

    def _recover(self) -> None:
        assert self._dir is not None
        max_seq = 0
        recovered = 0
        for path in sorted(self._dir.glob("*.jsonl")):
            with open(path, encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if not line:
                        continue
                    try:
                        obj = json.loads(line)
                        m = Measurement.from_obj(obj)
                    except (json.JSONDecodeError, KeyError, ValueError):
                        # torn tail from a crash mid-write; everything before it is intact
                        logger.warning("skipping undecodable line in %s", path)
                        continue
                    series = self._series.get(m.series_key)
                    if series is None:
                        series = _Series(key=m.series_key, unit=m.unit)
                        self._series[m.series_key] = series
                    dedup_key = (m.observed_at, float(m.value))
                    if dedup_key in series.dedup:
                        continue
                    series.dedup.add(dedup_key)
                    series.rows.append(m)
                    self._files[m.series_key] = path
                    if m.seq:
                        max_seq = max(max_seq, m.seq)
                    recovered += 1
        for series in self._series.values():
            series.rows.sort(key=lambda r: (r.observed_at, r.seq or 0))
        self._seq = max_seq
        if recovered:
            logger.info("recovered %d measurements across %d series", recovered, len(self._series))

    def _flush_loop(self) -> None:
        while not self._stop.wait(self._flush_window_s):
            try:
                self.flush()
            except Exception:  # noqa: BLE001 - keep flushing on transient IO errors
                logger.exception("flush failed")
