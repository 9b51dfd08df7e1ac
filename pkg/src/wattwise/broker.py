"""Context broker: current state of all registered entities.

Holds the latest attribute map per entity (sensor nodes, rooms, buildings,
doors, ...), serves queries, and fans attribute changes out to named sinks
through subscriptions. It also owns node lifecycle bookkeeping (Registered →
Bootstrapping → Connected ↔ Disconnected) driven by measurement arrivals.

The broker keeps *current* state only: an update whose ``observed_at`` is
older than the stored attribute is rejected (history belongs to the
timeseries store, which accepts late data).
"""

from __future__ import annotations

import itertools
import logging
import threading
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Optional

from .clock import Clock
from .errors import (
    FutureTimestampError,
    MalformedIdError,
    MissingUnitError,
    StaleTimestampError,
    UnknownEntityError,
    UnknownSubscriptionError,
)

logger = logging.getLogger(__name__)

ENTITY_TYPES = ("SensorNode", "Room", "Building", "BuildingSpace", "Door", "Custom")

# Attribute names that are numeric yet legitimately unitless.
DEFAULT_UNITLESS = frozenset({
    "presence", "occupancy", "open", "count", "level", "reporting_period_ms",
})

LIFECYCLE_STATES = ("Registered", "Bootstrapping", "Connected", "Disconnected")

# Allowed lifecycle transitions (state machine edges).
_LIFECYCLE_EDGES = {
    ("Registered", "Bootstrapping"),
    ("Bootstrapping", "Connected"),
    ("Connected", "Disconnected"),
    ("Disconnected", "Connected"),
}

DEFAULT_REPORTING_PERIOD_MS = 60_000

Scalar = int | float | str | bool


@dataclass(frozen=True)
class AttributeValue:
    """One attribute observation: value + unit + when it was observed."""

    value: Scalar
    unit: str = ""
    observed_at: int = 0
    quality: str = "Raw"  # Raw | Cleaned | Derived

    def to_obj(self) -> dict:
        return {
            "value": self.value,
            "unit": self.unit,
            "observed_at": self.observed_at,
            "quality": self.quality,
        }

    @classmethod
    def from_obj(cls, obj: dict) -> "AttributeValue":
        return cls(
            value=obj["value"],
            unit=obj.get("unit", ""),
            observed_at=int(obj.get("observed_at", 0)),
            quality=obj.get("quality", "Raw"),
        )


@dataclass
class EntityRecord:
    id: str
    entity_type: str
    attributes: dict[str, AttributeValue] = field(default_factory=dict)
    created_at: int = 0
    updated_at: int = 0
    version: int = 0
    deleted: bool = False

    def to_obj(self) -> dict:
        return {
            "id": self.id,
            "entity_type": self.entity_type,
            "attributes": {k: v.to_obj() for k, v in sorted(self.attributes.items())},
            "created_at": self.created_at,
            "updated_at": self.updated_at,
            "version": self.version,
        }


@dataclass
class NodeLifecycle:
    node_id: str
    state: str = "Registered"
    config_commands: list[str] = field(default_factory=list)
    last_seen: int = 0
    reporting_period_ms: int = DEFAULT_REPORTING_PERIOD_MS

    def to_obj(self) -> dict:
        return {
            "node_id": self.node_id,
            "state": self.state,
            "config_commands": list(self.config_commands),
            "last_seen": self.last_seen,
            "reporting_period_ms": self.reporting_period_ms,
        }


@dataclass(frozen=True)
class Subscription:
    id: str
    sink: str
    entity_type: Optional[str] = None
    attribute: Optional[str] = None
    ids: Optional[frozenset[str]] = None
    active: bool = True

    def matches(self, entity: EntityRecord, attribute: str) -> bool:
        if not self.active:
            return False
        if self.entity_type is not None and entity.entity_type != self.entity_type:
            return False
        if self.attribute is not None and attribute != self.attribute:
            return False
        if self.ids is not None and entity.id not in self.ids:
            return False
        return True


@dataclass(frozen=True)
class Notification:
    """In-process change notification contract."""

    subscription_id: str
    entity_id: str
    attribute: str
    old: Optional[AttributeValue]
    new: AttributeValue
    version: int


Predicate = tuple[str, str, Scalar]  # (attribute name, comparator, literal)

_COMPARE = {
    ">": lambda a, b: a > b,
    ">=": lambda a, b: a >= b,
    "<": lambda a, b: a < b,
    "<=": lambda a, b: a <= b,
    "=": lambda a, b: a == b,
    "!=": lambda a, b: a != b,
}


class ContextBroker:
    """Thread-safe entity state store with change subscriptions.

    Writes to a single entity are serialized under the broker lock and bump a
    per-entity version; notifications are queued during the write and drained
    after state is committed, preserving per-entity order.
    """

    def __init__(
        self,
        clock: Clock,
        *,
        skew_ms: int = 60_000,
        unitless: frozenset[str] = DEFAULT_UNITLESS,
        liveness_multiplier: float = 3.0,
    ):
        self._clock = clock
        self._skew_ms = skew_ms
        self._unitless = unitless
        self._liveness_multiplier = liveness_multiplier
        self._entities: dict[str, EntityRecord] = {}
        self._lifecycles: dict[str, NodeLifecycle] = {}
        self._subs: dict[str, Subscription] = {}
        self._sinks: dict[str, Callable[[Notification], None]] = {}
        self._sub_seq = itertools.count(1)
        self._lock = threading.RLock()
        self._pending: deque[Notification] = deque()
        self._draining = False

    # -- sinks and subscriptions ----------------------------------------

    def register_sink(self, name: str, handler: Callable[[Notification], None]) -> None:
        with self._lock:
            self._sinks[name] = handler

    def subscribe(
        self,
        sink: str,
        *,
        entity_type: Optional[str] = None,
        attribute: Optional[str] = None,
        ids: Optional[Iterable[str]] = None,
    ) -> str:
        with self._lock:
            sub_id = f"sub-{next(self._sub_seq)}"
            self._subs[sub_id] = Subscription(
                id=sub_id,
                sink=sink,
                entity_type=entity_type,
                attribute=attribute,
                ids=frozenset(ids) if ids is not None else None,
            )
            return sub_id

    def unsubscribe(self, sub_id: str) -> None:
        with self._lock:
            if sub_id not in self._subs:
                raise UnknownSubscriptionError(f"no subscription {sub_id!r}")
            del self._subs[sub_id]

    def subscriptions(self) -> list[Subscription]:
        with self._lock:
            return list(self._subs.values())

    # -- entity writes ---------------------------------------------------

    def upsert_entity(
        self,
        entity_id: str,
        entity_type: str,
        attributes: Optional[dict[str, AttributeValue]] = None,
    ) -> int:
        """Create or fully replace an entity; returns the new version."""
        attributes = attributes or {}
        self._check_id(entity_id)
        self._check_attributes(attributes)
        with self._lock:
            now = self._clock.now_ms()
            existing = self._entities.get(entity_id)
            if existing is None or existing.deleted:
                created = existing.created_at if existing else now
                record = EntityRecord(
                    id=entity_id,
                    entity_type=entity_type,
                    attributes=dict(attributes),
                    created_at=created,
                    updated_at=now,
                    version=(existing.version + 1) if existing else 1,
                )
                self._entities[entity_id] = record
                for name, new in attributes.items():
                    self._queue_change(record, name, None, new)
            else:
                for name, new in attributes.items():
                    old = existing.attributes.get(name)
                    if old is not None and new.observed_at < old.observed_at:
                        raise StaleTimestampError(
                            f"{entity_id}.{name}: observed_at {new.observed_at} < {old.observed_at}"
                        )
                changed = [
                    (name, existing.attributes.get(name), new)
                    for name, new in attributes.items()
                    if existing.attributes.get(name) != new
                ]
                existing.attributes = dict(attributes)
                existing.entity_type = entity_type
                existing.updated_at = now
                existing.version += 1
                record = existing
                for name, old, new in changed:
                    self._queue_change(record, name, old, new)
            if entity_type == "SensorNode" and entity_id not in self._lifecycles:
                self._register_lifecycle(record)
            version = record.version
        self._drain()
        return version

    def update_attributes(self, entity_id: str, patch: dict[str, AttributeValue]) -> EntityRecord:
        """Replace only the named attributes; every patched attribute notifies."""
        self._check_attributes(patch)
        with self._lock:
            record = self._require(entity_id)
            for name, new in patch.items():
                old = record.attributes.get(name)
                if old is not None and new.observed_at < old.observed_at:
                    raise StaleTimestampError(
                        f"{entity_id}.{name}: observed_at {new.observed_at} < {old.observed_at}"
                    )
            record.version += 1
            record.updated_at = self._clock.now_ms()
            for name, new in patch.items():
                old = record.attributes.get(name)
                record.attributes[name] = new
                self._queue_change(record, name, old, new)
            out = self._copy(record)
        self._drain()
        return out

    def delete_entity(self, entity_id: str) -> None:
        """Soft delete: the id stays resolvable for history, queries skip it."""
        with self._lock:
            record = self._require(entity_id)
            record.deleted = True
            record.version += 1
            record.updated_at = self._clock.now_ms()

    # -- entity reads ----------------------------------------------------

    def get_entity(self, entity_id: str, include_deleted: bool = False) -> EntityRecord:
        with self._lock:
            record = self._entities.get(entity_id)
            if record is None or (record.deleted and not include_deleted):
                raise UnknownEntityError(f"no entity {entity_id!r}")
            return self._copy(record)

    def has_entity(self, entity_id: str) -> bool:
        with self._lock:
            record = self._entities.get(entity_id)
            return record is not None and not record.deleted

    def query_entities(
        self,
        entity_type: Optional[str] = None,
        predicate: Optional[Predicate] = None,
        ids: Optional[Iterable[str]] = None,
    ) -> list[EntityRecord]:
        """All and only matching records, ordered by id."""
        idset = frozenset(ids) if ids is not None else None
        with self._lock:
            out = []
            for entity_id in sorted(self._entities):
                record = self._entities[entity_id]
                if record.deleted:
                    continue
                if entity_type is not None and record.entity_type != entity_type:
                    continue
                if idset is not None and entity_id not in idset:
                    continue
                if predicate is not None and not self._holds(record, predicate):
                    continue
                out.append(self._copy(record))
            return out

    # -- node lifecycle ----------------------------------------------------

    def get_lifecycle(self, node_id: str) -> NodeLifecycle:
        with self._lock:
            lc = self._lifecycles.get(node_id)
            if lc is None:
                raise UnknownEntityError(f"no lifecycle for {node_id!r}")
            return replace(lc, config_commands=list(lc.config_commands))

    def begin_bootstrap(self, node_id: str) -> list[str]:
        """Hand the node its configuration command sequence."""
        with self._lock:
            lc = self._lifecycles.get(node_id)
            if lc is None:
                raise UnknownEntityError(f"no lifecycle for {node_id!r}")
            if lc.state == "Registered":
                self._transition(lc, "Bootstrapping")
            commands = list(lc.config_commands)
        self._drain()
        return commands

    def mark_liveness(self, node_id: str, seen_at: int) -> NodeLifecycle:
        """A measurement arrived; walk the node toward Connected."""
        with self._lock:
            lc = self._lifecycles.get(node_id)
            if lc is None:
                if node_id not in self._entities:
                    raise UnknownEntityError(f"no entity {node_id!r}")
                lc = self._register_lifecycle(self._entities[node_id])
            lc.last_seen = max(lc.last_seen, seen_at)
            if lc.state == "Registered":
                self._transition(lc, "Bootstrapping")
            if lc.state in ("Bootstrapping", "Disconnected"):
                self._transition(lc, "Connected")
            out = replace(lc, config_commands=list(lc.config_commands))
        self._drain()
        return out

    def sweep_liveness(self, now_ms: int) -> list[str]:
        """Disconnect every node silent for longer than its timeout."""
        transitioned = []
        with self._lock:
            for lc in self._lifecycles.values():
                if lc.state != "Connected":
                    continue
                timeout = int(lc.reporting_period_ms * self._liveness_multiplier)
                if now_ms - lc.last_seen > timeout:
                    self._transition(lc, "Disconnected")
                    transitioned.append(lc.node_id)
        self._drain()
        return sorted(transitioned)

    def node_state(self, node_id: str) -> str:
        with self._lock:
            lc = self._lifecycles.get(node_id)
            return lc.state if lc else "Registered"

    # -- internals ---------------------------------------------------------

    def _register_lifecycle(self, record: EntityRecord) -> NodeLifecycle:
        period = DEFAULT_REPORTING_PERIOD_MS
        att = record.attributes.get("reporting_period_ms")
        if att is not None and isinstance(att.value, (int, float)):
            period = int(att.value)
        lc = NodeLifecycle(
            node_id=record.id,
            config_commands=[f"set-reporting-period {period}", "enable-telemetry"],
            reporting_period_ms=period,
        )
        self._lifecycles[record.id] = lc
        return lc

    def _transition(self, lc: NodeLifecycle, state: str) -> None:
        if (lc.state, state) not in _LIFECYCLE_EDGES:
            raise ValueError(f"illegal lifecycle transition {lc.state} -> {state}")
        lc.state = state
        record = self._entities.get(lc.node_id)
        if record is not None:
            now = self._clock.now_ms()
            old = record.attributes.get("lifecycle_state")
            new = AttributeValue(value=state, observed_at=max(now, old.observed_at if old else 0), quality="Derived")
            record.attributes["lifecycle_state"] = new
            record.version += 1
            record.updated_at = now
            self._queue_change(record, "lifecycle_state", old, new)

    def _require(self, entity_id: str) -> EntityRecord:
        record = self._entities.get(entity_id)
        if record is None or record.deleted:
            raise UnknownEntityError(f"no entity {entity_id!r}")
        return record

    @staticmethod
    def _copy(record: EntityRecord) -> EntityRecord:
        return replace(record, attributes=dict(record.attributes))

    def _check_id(self, entity_id: str) -> None:
        if not entity_id or entity_id != entity_id.strip() or any(c.isspace() for c in entity_id):
            raise MalformedIdError(f"bad entity id {entity_id!r}")

    def _check_attributes(self, attributes: dict[str, AttributeValue]) -> None:
        now = self._clock.now_ms()
        for name, att in attributes.items():
            if isinstance(att.value, bool):
                continue
            if isinstance(att.value, (int, float)) and not att.unit and name not in self._unitless:
                raise MissingUnitError(f"numeric attribute {name!r} needs a unit")
            if att.observed_at > now + self._skew_ms:
                raise FutureTimestampError(
                    f"{name}: observed_at {att.observed_at} is beyond clock skew bound"
                )

    @staticmethod
    def _holds(record: EntityRecord, predicate: Predicate) -> bool:
        name, op, literal = predicate
        att = record.attributes.get(name)
        if att is None:
            return False
        try:
            return _COMPARE[op](att.value, literal)
        except TypeError:
            return False

    def _queue_change(
        self,
        record: EntityRecord,
        attribute: str,
        old: Optional[AttributeValue],
        new: AttributeValue,
    ) -> None:
        for sub in self._subs.values():
            if sub.matches(record, attribute):
                self._pending.append(Notification(
                    subscription_id=sub.id,
                    entity_id=record.id,
                    attribute=attribute,
                    old=old,
                    new=new,
                    version=record.version,
                ))

    def _drain(self) -> None:
        """Deliver queued notifications outside the write path.

        Re-entrant writes performed by a sink (e.g. a composite refresh)
        queue further notifications that this same loop picks up, so
        delivery order follows causal order. Only one thread drains at a
        time; the outer loop re-checks the queue after releasing the flag
        so nothing enqueued during the hand-off is stranded.
        """
        while True:
            with self._lock:
                if self._draining or not self._pending:
                    return
                self._draining = True
            try:
                while True:
                    with self._lock:
                        if not self._pending:
                            break
                        notification = self._pending.popleft()
                        sub = self._subs.get(notification.subscription_id)
                        handler = self._sinks.get(sub.sink) if sub else None
                    if handler is None:
                        continue
                    try:
                        handler(notification)
                    except Exception:  # noqa: BLE001 - sink errors must not poison the broker
                        logger.exception("notification sink failed for %s", notification.subscription_id)
            finally:
                with self._lock:
                    self._draining = False
