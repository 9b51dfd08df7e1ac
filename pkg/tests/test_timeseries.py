from __future__ import annotations

import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wattwise.clock import HOUR_MS, SimulatedClock
from wattwise.errors import InvalidRangeError, NonFiniteValueError, UnitMismatchError
from wattwise.timeseries import Measurement, SeriesQuery, TimeseriesStore


def m(value: float, at: int, sensor="s1", attribute="co2", unit="ppm", quality="Raw") -> Measurement:
    return Measurement(
        sensor_id=sensor, attribute=attribute, value=value,
        unit=unit, observed_at=at, quality=quality,
    )


@pytest.fixture
def store() -> TimeseriesStore:
    return TimeseriesStore()  # memory-only


def brute_force_buckets(rows, t0, t1, width, fn):
    """Per-bucket recompute oracle from the raw sample list."""
    out = []
    for start in range(t0, t1, width):
        values = [r.value for r in rows if start <= r.observed_at < start + width]
        if not values:
            out.append((start, None, 0))
            continue
        if fn == "Avg":
            value = sum(values) / len(values)
        elif fn == "Sum":
            value = sum(values)
        elif fn == "Min":
            value = min(values)
        elif fn == "Max":
            value = max(values)
        else:
            value = float(len(values))
        out.append((start, value, len(values)))
    return out


def test_duplicate_append_collapses(store):
    assert store.append(m(400.0, 1000)) is not None
    assert store.append(m(400.0, 1000)) is None
    rows = store.query_raw(SeriesQuery("s1", "co2", 0, 10_000))
    assert len(rows) == 1


def test_unit_mismatch(store):
    store.append(Measurement("s1", "temp", 70.0, "degF", 0))
    with pytest.raises(UnitMismatchError):
        store.append(Measurement("s1", "temp", 21.0, "degC", 1))


def test_non_finite_rejected(store):
    with pytest.raises(NonFiniteValueError):
        store.append(m(float("nan"), 0))
    with pytest.raises(NonFiniteValueError):
        store.append(m(float("inf"), 0))


def test_count_oracle_10k(store):
    for i in range(10_000):
        store.append(m(400.0 + (i % 100), i * 1000))
    assert len(store.query_raw(SeriesQuery("s1", "co2", 0, 10_000 * 1000))) == 10_000


def test_empty_series_query(store):
    assert store.query_raw(SeriesQuery("nope", "co2", 0, 10)) == []


def test_half_open_interval_excludes_t1(store):
    store.append(m(1.0, 999))
    store.append(m(2.0, 1000))
    rows = store.query_raw(SeriesQuery("s1", "co2", 0, 1000))
    assert [r.value for r in rows] == [1.0]


def test_invalid_range(store):
    with pytest.raises(InvalidRangeError):
        store.query_raw(SeriesQuery("s1", "co2", 10, 10))


def test_random_range_matches_linear_scan(store):
    rnd = random.Random(7)
    rows = []
    for _ in range(500):
        at = rnd.randrange(0, 1_000_000)
        value = rnd.uniform(0, 100)
        if store.append(m(value, at)) is not None:
            rows.append((at, value))
    for _ in range(50):
        t0 = rnd.randrange(0, 900_000)
        t1 = t0 + rnd.randrange(1, 100_000)
        got = [(r.observed_at, r.value) for r in store.query_raw(SeriesQuery("s1", "co2", t0, t1))]
        expected = sorted((at, v) for at, v in rows if t0 <= at < t1)
        assert got == expected


def test_aggregate_trivial_values(store):
    for i, value in enumerate([1.0, 2.0, 3.0]):
        store.append(m(value, i))
    [bucket] = store.query_aggregate(SeriesQuery("s1", "co2", 0, 10, bucket_ms=10, fn="Avg"))
    assert bucket.value == pytest.approx(2.0)

    for i, value in enumerate([5.0, -1.0, 7.0]):
        store.append(m(value, 100 + i, sensor="s2", attribute="temp", unit="degC"))
    q = lambda fn: store.query_aggregate(  # noqa: E731
        SeriesQuery("s2", "temp", 100, 110, bucket_ms=10, fn=fn))[0].value
    assert q("Min") == -1.0
    assert q("Max") == 7.0
    assert q("Count") == 3
    assert q("Sum") == pytest.approx(11.0)


def test_empty_bucket_value_absent(store):
    store.append(m(5.0, 5))
    buckets = store.query_aggregate(SeriesQuery("s1", "co2", 0, 30, bucket_ms=10, fn="Avg"))
    assert buckets[0].value == 5.0 and buckets[0].sample_count == 1
    assert buckets[1].value is None and buckets[1].sample_count == 0
    assert buckets[2].value is None


def test_aggregate_random_fixture_vs_recompute(store):
    rnd = random.Random(11)
    for _ in range(1000):
        store.append(m(rnd.uniform(-50, 50), rnd.randrange(0, 48 * HOUR_MS)))
    rows = store.query_raw(SeriesQuery("s1", "co2", 0, 48 * HOUR_MS))
    for fn in ("Avg", "Min", "Max", "Sum", "Count"):
        buckets = store.query_aggregate(
            SeriesQuery("s1", "co2", 0, 48 * HOUR_MS, bucket_ms=HOUR_MS, fn=fn))
        expected = brute_force_buckets(rows, 0, 48 * HOUR_MS, HOUR_MS, fn)
        assert len(buckets) == 48
        for bucket, (start, value, count) in zip(buckets, expected):
            assert bucket.bucket_start == start
            assert bucket.bucket_end == start + HOUR_MS
            assert bucket.sample_count == count
            if value is None:
                assert bucket.value is None
            elif fn in ("Min", "Max", "Count"):
                assert bucket.value == value
            else:
                assert bucket.value == pytest.approx(value, rel=1e-9)


def test_non_divisible_range_rejected(store):
    with pytest.raises(InvalidRangeError):
        store.query_aggregate(SeriesQuery("s1", "co2", 0, 25, bucket_ms=10, fn="Avg"))


def test_rollup_matches_on_the_fly(store):
    rnd = random.Random(3)
    for _ in range(2000):
        store.append(m(rnd.uniform(0, 10), rnd.randrange(0, 24 * HOUR_MS)))
    store.rollup_maintenance(("s1", "co2"), [HOUR_MS])
    for _ in range(10):
        h0 = rnd.randrange(0, 12)
        h1 = h0 + rnd.randrange(1, 12)
        for fn in ("Avg", "Min", "Max", "Sum", "Count"):
            materialized = store.query_aggregate(SeriesQuery(
                "s1", "co2", h0 * HOUR_MS, h1 * HOUR_MS, bucket_ms=HOUR_MS, fn=fn))
            fresh = TimeseriesStore()
            for row in store.query_raw(SeriesQuery("s1", "co2", 0, 24 * HOUR_MS)):
                fresh.append(row)
            recomputed = fresh.query_aggregate(SeriesQuery(
                "s1", "co2", h0 * HOUR_MS, h1 * HOUR_MS, bucket_ms=HOUR_MS, fn=fn))
            for a, b in zip(materialized, recomputed):
                assert a.sample_count == b.sample_count
                if a.value is None:
                    assert b.value is None
                else:
                    assert a.value == pytest.approx(b.value, rel=1e-9)


def test_rollup_empty_series_no_error(store):
    store.append(m(1.0, 0))
    store.rollup_maintenance(("s1", "co2"), [HOUR_MS])  # materializes fine
    empty = TimeseriesStore()
    empty.append(m(1.0, 0, sensor="other"))
    with pytest.raises(Exception):
        empty.rollup_maintenance(("missing", "co2"), [HOUR_MS])


def test_late_append_invalidates_rollup(store):
    for i in range(10):
        store.append(m(float(i), i * 60_000))
    store.rollup_maintenance(("s1", "co2"), [HOUR_MS])
    store.append(m(100.0, 30_500))  # late arrival inside the first hour
    [bucket] = store.query_aggregate(SeriesQuery("s1", "co2", 0, HOUR_MS, bucket_ms=HOUR_MS, fn="Max"))
    assert bucket.value == 100.0
    assert bucket.sample_count == 11


def test_monotone_reads(store):
    rnd = random.Random(5)
    for _ in range(100):
        store.append(m(rnd.random(), rnd.randrange(0, 1000)))
    q = SeriesQuery("s1", "co2", 0, 1000)
    assert store.query_raw(q) == store.query_raw(q)


@settings(max_examples=40, deadline=None)
@given(st.lists(
    st.tuples(st.integers(min_value=0, max_value=999), st.floats(-1e6, 1e6)),
    min_size=0, max_size=60,
))
def test_bucket_counts_tile_raw_count(samples):
    store = TimeseriesStore()
    for at, value in samples:
        store.append(m(value, at))
    raw = store.query_raw(SeriesQuery("s1", "co2", 0, 1000))
    buckets = store.query_aggregate(SeriesQuery("s1", "co2", 0, 1000, bucket_ms=100, fn="Count"))
    assert sum(b.sample_count for b in buckets) == len(raw)


def test_durability_roundtrip(tmp_path):
    clock = SimulatedClock(0)
    store = TimeseriesStore(tmp_path, clock, flush_window_ms=50)
    for i in range(100):
        store.append(m(float(i), i * 1000))
    store.close()
    recovered = TimeseriesStore(tmp_path, clock)
    rows = recovered.query_raw(SeriesQuery("s1", "co2", 0, 100_000))
    assert [r.value for r in rows] == [float(i) for i in range(100)]
    assert recovered.max_seq() == store.max_seq()
    recovered.close()


def test_recovery_tolerates_torn_tail(tmp_path):
    store = TimeseriesStore(tmp_path, flush_window_ms=50)
    for i in range(10):
        store.append(m(float(i), i))
    store.close()
    # simulate a crash mid-write: chop the last line in half
    [path] = list(tmp_path.glob("*.jsonl"))
    raw = path.read_text()
    path.write_text(raw[: len(raw) - 25])
    recovered = TimeseriesStore(tmp_path)
    rows = recovered.query_raw(SeriesQuery("s1", "co2", 0, 100))
    assert 8 <= len(rows) <= 9
    recovered.close()


def test_sum_fsum_precision(store):
    values = [0.1] * 1000
    for i, v in enumerate(values):
        store.append(m(v + i * 1e-12, i))
    [bucket] = store.query_aggregate(SeriesQuery("s1", "co2", 0, 1000, bucket_ms=1000, fn="Sum"))
    assert bucket.value == pytest.approx(math.fsum(v + i * 1e-12 for i, v in enumerate(values)), rel=1e-12)
