"""Stream processor: near-real-time cleaning, stream ticks, and conditions.

A *sensor data stream* is the triple (sensor selector, evaluation frequency,
measurement type) plus a cleaning policy. Raw measurements pass a two-stage
outlier test (static plausible range, then a modified z-score over a
trailing window of accepted samples); accepted samples land in the
timeseries store as Cleaned, rejected ones as Raw. Active streams tick once
per frequency period on the simulated clock; conditions are evaluated on
ticks and fire ContextChange events that drive the recommender. Patterns
correlate condition firings across streams inside a sliding time span.

Every sample cleaned here is scored incrementally against a deque window;
the brute-force recompute lives in ``reference`` and is only ever used as
an oracle against this path.
"""

from __future__ import annotations

import itertools
import logging
import threading
from bisect import insort
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

from .broker import ContextBroker
from .clock import Clock
from .errors import InvalidStreamSpecError, UnknownSensorError, UnknownStreamError
from .timeseries import Measurement, TimeseriesStore

logger = logging.getLogger(__name__)

MODIFIED_ZSCORE_FACTOR = 0.6745

MEASUREMENT_TYPES = ("LastValue", "WindowAvg", "WindowMin", "WindowMax")

# Plausible value ranges per attribute kind; first stage of the outlier test.
DEFAULT_PLAUSIBLE_RANGES: dict[str, tuple[float, float]] = {
    "co2": (0.0, 10_000.0),
    "temperature": (-40.0, 60.0),
    "humidity": (0.0, 100.0),
    "energy": (0.0, 1e9),
    "power": (0.0, 1e9),
    "presence": (0.0, 1_000.0),
    "open": (0.0, 1.0),
}
FALLBACK_RANGE = (-1e12, 1e12)


@dataclass(frozen=True)
class OutlierPolicy:
    """Two-stage outlier policy: plausible range, then robust z-score."""

    lo: float
    hi: float
    window_size: int = 20
    zscore_threshold: float = 3.5
    resolution: float = 1.0
    mad_epsilon: Optional[float] = None  # defaults to 3x sensor resolution

    def __post_init__(self):
        if self.lo >= self.hi:
            raise InvalidStreamSpecError("plausible range needs lo < hi")
        if self.window_size < 5:
            raise InvalidStreamSpecError("window size must be >= 5")
        if self.zscore_threshold <= 0:
            raise InvalidStreamSpecError("z-score threshold must be > 0")

    @property
    def epsilon(self) -> float:
        return self.mad_epsilon if self.mad_epsilon is not None else 3.0 * self.resolution

    @classmethod
    def for_attribute(cls, attribute: str, **overrides) -> "OutlierPolicy":
        lo, hi = DEFAULT_PLAUSIBLE_RANGES.get(attribute, FALLBACK_RANGE)
        return cls(lo=lo, hi=hi, **overrides)


@dataclass
class SensorDataStream:
    id: str
    selector_id: str
    attribute: str
    frequency_ms: int
    measurement_type: str = "LastValue"
    active: bool = False
    activated_at: int = 0
    campaign_id: Optional[str] = None

    def to_obj(self) -> dict:
        return {
            "id": self.id,
            "selector_id": self.selector_id,
            "attribute": self.attribute,
            "frequency_ms": self.frequency_ms,
            "measurement_type": self.measurement_type,
            "active": self.active,
            "activated_at": self.activated_at,
            "campaign_id": self.campaign_id,
        }


@dataclass(frozen=True)
class ConditionSpec:
    id: str
    stream_id: str
    comparator: str  # > >= < <= =
    threshold: float
    trigger: str = "Level"  # Level | Edge
    cooldown_ms: int = 0

    def to_obj(self) -> dict:
        return {
            "id": self.id,
            "stream_id": self.stream_id,
            "comparator": self.comparator,
            "threshold": self.threshold,
            "trigger": self.trigger,
            "cooldown_ms": self.cooldown_ms,
        }


@dataclass
class ConditionState:
    last_fired_at: Optional[int] = None
    prev_truth: bool = False


@dataclass(frozen=True)
class TickSample:
    stream_id: str
    at: int
    value: Optional[float]


@dataclass(frozen=True)
class StreamEvent:
    seq: int
    stream_id: str
    kind: str  # CleanedMeasurement | OutlierDropped | TickSample | ContextChange
    at: int
    payload: dict

    def to_obj(self) -> dict:
        return {
            "seq": self.seq,
            "stream_id": self.stream_id,
            "kind": self.kind,
            "at": self.at,
            "payload": self.payload,
        }


_COMPARE = {
    ">": lambda v, t: v > t,
    ">=": lambda v, t: v >= t,
    "<": lambda v, t: v < t,
    "<=": lambda v, t: v <= t,
    "=": lambda v, t: v == t,
}


def evaluate_condition(
    cond: ConditionSpec, tick: TickSample, state: ConditionState
) -> tuple[bool, ConditionState]:
    """One condition step. Absent ticks never fire and keep edge state."""
    if tick.value is None:
        return False, state
    truth = _COMPARE[cond.comparator](tick.value, cond.threshold)
    cooled = state.last_fired_at is None or tick.at - state.last_fired_at >= cond.cooldown_ms
    if cond.trigger == "Edge":
        fired = truth and not state.prev_truth and cooled
    else:
        fired = truth and cooled
    new_state = ConditionState(
        last_fired_at=tick.at if fired else state.last_fired_at,
        prev_truth=truth,
    )
    return fired, new_state


@dataclass
class _CleaningContext:
    policy: OutlierPolicy
    owner_stream_id: str
    window: deque = field(default_factory=deque)
    accepted: int = 0

    def score(self, value: float) -> tuple[bool, str]:
        """(accept, reason). Reason is 'range' or 'zscore' on rejection."""
        if not (self.policy.lo <= value <= self.policy.hi):
            return False, "range"
        if self.accepted < self.policy.window_size:
            return True, ""
        window = sorted(self.window)
        n = len(window)
        med = (window[n // 2] if n % 2 else (window[n // 2 - 1] + window[n // 2]) / 2.0)
        devs = sorted(abs(v - med) for v in window)
        mad = (devs[n // 2] if n % 2 else (devs[n // 2 - 1] + devs[n // 2]) / 2.0)
        if mad == 0:
            if abs(value - med) > self.policy.epsilon:
                return False, "zscore"
            return True, ""
        score = MODIFIED_ZSCORE_FACTOR * (value - med) / mad
        if abs(score) > self.policy.zscore_threshold:
            return False, "zscore"
        return True, ""

    def admit(self, value: float) -> None:
        self.window.append(value)
        if len(self.window) > self.policy.window_size:
            self.window.popleft()
        self.accepted += 1


@dataclass
class _Pattern:
    id: str
    member_condition_ids: list[str]
    span_ms: int
    ordered: bool
    firings: dict[str, list[int]] = field(default_factory=dict)


class StreamProcessor:
    """Per-stream pipelines over an injected clock; deterministic event log."""

    def __init__(
        self,
        clock: Clock,
        broker: ContextBroker,
        store: TimeseriesStore,
        *,
        staleness_multiplier: float = 2.0,
    ):
        self._clock = clock
        self._broker = broker
        self._store = store
        self._staleness_multiplier = staleness_multiplier
        self._streams: dict[str, SensorDataStream] = {}
        self._order: list[str] = []  # registration order, for deterministic tick order
        self._samples: dict[str, list[tuple[int, float]]] = {}
        self._next_tick: dict[str, int] = {}
        self._ticks_evaluated: dict[str, int] = {}
        self._contexts: dict[tuple[str, str], _CleaningContext] = {}
        self._conditions: dict[str, ConditionSpec] = {}
        self._condition_states: dict[str, ConditionState] = {}
        self._stream_conditions: dict[str, list[str]] = {}
        self._patterns: dict[str, _Pattern] = {}
        self._events: list[StreamEvent] = []
        self._listeners: list[Callable[[StreamEvent], None]] = []
        self._stream_seq = itertools.count(1)
        self._cond_seq = itertools.count(1)
        self._event_seq = itertools.count(1)
        self._lock = threading.RLock()

    # -- stream registration ----------------------------------------------

    def register_stream(
        self,
        selector_id: str,
        attribute: str,
        frequency_ms: int,
        measurement_type: str = "LastValue",
        *,
        policy: Optional[OutlierPolicy] = None,
        campaign_id: Optional[str] = None,
    ) -> str:
        """Register a stream; identical specs dedup to the existing id."""
        if frequency_ms <= 0:
            raise InvalidStreamSpecError("frequency must be > 0")
        if measurement_type not in MEASUREMENT_TYPES:
            raise InvalidStreamSpecError(f"unknown measurement type {measurement_type!r}")
        if not self._broker.has_entity(selector_id):
            raise UnknownSensorError(f"selector {selector_id!r} not in broker")
        with self._lock:
            for s in self._streams.values():
                if (s.selector_id, s.attribute, s.frequency_ms, s.measurement_type) == (
                    selector_id, attribute, frequency_ms, measurement_type,
                ):
                    return s.id
            stream_id = f"stream-{next(self._stream_seq)}"
            self._streams[stream_id] = SensorDataStream(
                id=stream_id,
                selector_id=selector_id,
                attribute=attribute,
                frequency_ms=frequency_ms,
                measurement_type=measurement_type,
                campaign_id=campaign_id,
            )
            self._order.append(stream_id)
            self._samples[stream_id] = []
            self._ticks_evaluated[stream_id] = 0
            self._stream_conditions[stream_id] = []
            key = (selector_id, attribute)
            if key not in self._contexts:
                self._contexts[key] = _CleaningContext(
                    policy=policy or OutlierPolicy.for_attribute(attribute),
                    owner_stream_id=stream_id,
                )
            return stream_id

    def activate(self, stream_id: str) -> None:
        with self._lock:
            stream = self._require(stream_id)
            if stream.active:
                return
            stream.active = True
            stream.activated_at = self._clock.now_ms()
            self._next_tick[stream_id] = stream.activated_at + stream.frequency_ms

    def deactivate(self, stream_id: str) -> None:
        with self._lock:
            stream = self._require(stream_id)
            stream.active = False
            self._next_tick.pop(stream_id, None)

    def get_stream(self, stream_id: str) -> SensorDataStream:
        with self._lock:
            return replace(self._require(stream_id))

    def streams(self) -> list[SensorDataStream]:
        with self._lock:
            return [replace(self._streams[s]) for s in self._order]

    def covers(self, sensor_id: str, attribute: str) -> bool:
        with self._lock:
            return (sensor_id, attribute) in self._contexts

    def ticks_evaluated(self, stream_id: str) -> int:
        with self._lock:
            return self._ticks_evaluated.get(stream_id, 0)

    # -- ingestion ----------------------------------------------------------

    def ingest(self, m: Measurement) -> list[StreamEvent]:
        """Clean one raw measurement from a covered selector.

        Exactly one of CleanedMeasurement / OutlierDropped is emitted.
        Accepted samples are stored as Cleaned and feed every matching
        stream's tick window; rejected ones are stored as Raw only.
        """
        with self._lock:
            ctx = self._contexts.get((m.sensor_id, m.attribute))
            if ctx is None:
                raise UnknownStreamError(f"no stream covers {(m.sensor_id, m.attribute)}")
            accept, reason = ctx.score(float(m.value))
            if accept:
                ctx.admit(float(m.value))
                self._store.append(replace(m, quality="Cleaned", seq=None))
                self._offer(m.sensor_id, m.attribute, float(m.value), m.observed_at)
                event = self._emit(ctx.owner_stream_id, "CleanedMeasurement", m.observed_at, {
                    "sensor_id": m.sensor_id,
                    "attribute": m.attribute,
                    "value": m.value,
                    "unit": m.unit,
                })
            else:
                self._store.append(replace(m, quality="Raw", seq=None))
                event = self._emit(ctx.owner_stream_id, "OutlierDropped", m.observed_at, {
                    "sensor_id": m.sensor_id,
                    "attribute": m.attribute,
                    "value": m.value,
                    "unit": m.unit,
                    "reason": reason,
                })
            return [event]

    def offer_cleaned(self, sensor_id: str, attribute: str, value: float, at: int) -> None:
        """Feed an already-clean sample (e.g. a composite refresh) to tick windows."""
        with self._lock:
            self._offer(sensor_id, attribute, value, at)

    # -- time ---------------------------------------------------------------

    def advance_to(self, now_ms: int, *, inclusive: bool = True) -> list[StreamEvent]:
        """Fire every due tick up to ``now_ms`` in global time order.

        Ingestion paths call this with ``inclusive=False`` before handing
        over a sample, so a tick at time T only fires once every sample
        with observed_at <= T has been ingested.
        """
        fired: list[StreamEvent] = []
        with self._lock:
            while True:
                due = [
                    (self._next_tick[sid], i, sid)
                    for i, sid in enumerate(self._order)
                    if sid in self._next_tick
                    and (self._next_tick[sid] <= now_ms if inclusive else self._next_tick[sid] < now_ms)
                ]
                if not due:
                    break
                tick_at, _, stream_id = min(due)
                fired.extend(self._run_tick(stream_id, tick_at))
                self._next_tick[stream_id] = tick_at + self._streams[stream_id].frequency_ms
        return fired

    def evaluate_tick(self, stream_id: str, now_ms: int) -> TickSample:
        """Tick value for a stream at ``now_ms`` (value None when absent)."""
        with self._lock:
            stream = self._require(stream_id)
            samples = self._samples[stream_id]
            if stream.measurement_type == "LastValue":
                horizon = int(stream.frequency_ms * self._staleness_multiplier)
                value = None
                for t, v in reversed(samples):
                    if t <= now_ms:
                        value = v if now_ms - t <= horizon else None
                        break
                return TickSample(stream_id=stream_id, at=now_ms, value=value)
            window = [v for t, v in samples if now_ms - stream.frequency_ms < t <= now_ms]
            if not window:
                return TickSample(stream_id=stream_id, at=now_ms, value=None)
            if stream.measurement_type == "WindowAvg":
                value = sum(window) / len(window)
            elif stream.measurement_type == "WindowMin":
                value = min(window)
            else:
                value = max(window)
            return TickSample(stream_id=stream_id, at=now_ms, value=value)

    # -- conditions and patterns ---------------------------------------------

    def register_condition(
        self,
        stream_id: str,
        comparator: str,
        threshold: float,
        *,
        trigger: str = "Level",
        cooldown_ms: Optional[int] = None,
    ) -> str:
        """Attach a threshold condition to a stream's ticks.

        Default trigger is Level with cooldown equal to the stream frequency.
        """
        if comparator not in _COMPARE:
            raise InvalidStreamSpecError(f"unknown comparator {comparator!r}")
        if trigger not in ("Level", "Edge"):
            raise InvalidStreamSpecError(f"unknown trigger {trigger!r}")
        with self._lock:
            stream = self._require(stream_id)
            if cooldown_ms is None:
                cooldown_ms = stream.frequency_ms
            if cooldown_ms < 0:
                raise InvalidStreamSpecError("cooldown must be >= 0")
            cond_id = f"cond-{next(self._cond_seq)}"
            self._conditions[cond_id] = ConditionSpec(
                id=cond_id,
                stream_id=stream_id,
                comparator=comparator,
                threshold=float(threshold),
                trigger=trigger,
                cooldown_ms=int(cooldown_ms),
            )
            self._condition_states[cond_id] = ConditionState()
            self._stream_conditions[stream_id].append(cond_id)
            return cond_id

    def get_condition(self, cond_id: str) -> ConditionSpec:
        with self._lock:
            if cond_id not in self._conditions:
                raise UnknownStreamError(f"no condition {cond_id!r}")
            return self._conditions[cond_id]

    def register_pattern(
        self,
        member_condition_ids: list[str],
        span_ms: int,
        *,
        ordered: bool = True,
    ) -> str:
        """Correlate firings of several conditions within a sliding span."""
        with self._lock:
            for cid in member_condition_ids:
                if cid not in self._conditions:
                    raise UnknownStreamError(f"no condition {cid!r}")
            pattern_id = f"pattern-{len(self._patterns) + 1}"
            self._patterns[pattern_id] = _Pattern(
                id=pattern_id,
                member_condition_ids=list(member_condition_ids),
                span_ms=int(span_ms),
                ordered=ordered,
                firings={cid: [] for cid in member_condition_ids},
            )
            return pattern_id

    # -- event log -------------------------------------------------------------

    def on_event(self, listener: Callable[[StreamEvent], None]) -> None:
        with self._lock:
            self._listeners.append(listener)

    def events(self, stream_id: Optional[str] = None, since_seq: int = 0) -> list[StreamEvent]:
        with self._lock:
            return [
                e for e in self._events
                if e.seq > since_seq and (stream_id is None or e.stream_id == stream_id)
            ]

    def export_jsonl(self) -> str:
        import json
        with self._lock:
            return "\n".join(json.dumps(e.to_obj(), sort_keys=True) for e in self._events)

    # -- internals ---------------------------------------------------------------

    def _require(self, stream_id: str) -> SensorDataStream:
        stream = self._streams.get(stream_id)
        if stream is None:
            raise UnknownStreamError(f"no stream {stream_id!r}")
        return stream

    def _offer(self, sensor_id: str, attribute: str, value: float, at: int) -> None:
        for sid in self._order:
            stream = self._streams[sid]
            if stream.selector_id == sensor_id and stream.attribute == attribute:
                insort(self._samples[sid], (at, value))

    def _run_tick(self, stream_id: str, tick_at: int) -> list[StreamEvent]:
        events: list[StreamEvent] = []
        stream = self._streams[stream_id]
        tick = self.evaluate_tick(stream_id, tick_at)
        self._ticks_evaluated[stream_id] += 1
        if tick.value is not None:
            events.append(self._emit(stream_id, "TickSample", tick_at, {"value": tick.value}))
        for cond_id in self._stream_conditions[stream_id]:
            cond = self._conditions[cond_id]
            fired, new_state = evaluate_condition(cond, tick, self._condition_states[cond_id])
            self._condition_states[cond_id] = new_state
            if fired:
                events.append(self._emit(stream_id, "ContextChange", tick_at, {
                    "condition_id": cond_id,
                    "value": tick.value,
                    "comparator": cond.comparator,
                    "threshold": cond.threshold,
                }))
                events.extend(self._feed_patterns(cond_id, tick_at))
        # keep enough history for the next staleness horizon, drop the rest
        keep_after = tick_at - int(stream.frequency_ms * max(self._staleness_multiplier, 1.0))
        samples = self._samples[stream_id]
        if samples and samples[0][0] <= keep_after:
            self._samples[stream_id] = [s for s in samples if s[0] > keep_after]
        return events

    def _feed_patterns(self, cond_id: str, at: int) -> list[StreamEvent]:
        events = []
        for pattern in self._patterns.values():
            if cond_id not in pattern.firings:
                continue
            pattern.firings[cond_id].append(at)
            for times in pattern.firings.values():
                times[:] = [t for t in times if t >= at - pattern.span_ms]
            match = self._match_pattern(pattern)
            if match is not None:
                for cid, t in zip(pattern.member_condition_ids, match):
                    pattern.firings[cid].remove(t)
                stream_id = self._conditions[cond_id].stream_id
                events.append(self._emit(stream_id, "ContextChange", at, {
                    "pattern_id": pattern.id,
                    "member_firings": list(match),
                }))
        return events

    def _match_pattern(self, pattern: _Pattern) -> Optional[list[int]]:
        lists = [pattern.firings[cid] for cid in pattern.member_condition_ids]
        if any(not times for times in lists):
            return None
        if not pattern.ordered:
            pick = [times[-1] for times in lists]
            if max(pick) - min(pick) <= pattern.span_ms:
                return pick
            return None

        def search(i: int, prev: Optional[int], chosen: list[int]) -> Optional[list[int]]:
            if i == len(lists):
                if max(chosen) - min(chosen) <= pattern.span_ms:
                    return chosen
                return None
            for t in lists[i]:
                if prev is not None and t < prev:
                    continue
                result = search(i + 1, t, chosen + [t])
                if result is not None:
                    return result
            return None

        return search(0, None, [])

    def _emit(self, stream_id: str, kind: str, at: int, payload: dict) -> StreamEvent:
        event = StreamEvent(
            seq=next(self._event_seq),
            stream_id=stream_id,
            kind=kind,
            at=at,
            payload=payload,
        )
        self._events.append(event)
        for listener in list(self._listeners):
            try:
                listener(event)
            except Exception:  # noqa: BLE001 - listeners must not stall the pipeline
                logger.exception("stream event listener failed")
        return event
