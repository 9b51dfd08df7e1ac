"""Composite entities: higher-level broker entities aggregated over members.

A composite (a room, a building) maps each attribute to a fold (Avg, Min,
Max, Sum, Any, All) over the current values of its member entities.
Refreshes are pushed from member updates through a broker subscription;
members whose lifecycle is Disconnected are excluded so a dead sensor never
freezes a room value.
"""

from __future__ import annotations

import logging
import math
import threading
from dataclasses import dataclass, field
from typing import Optional

from .broker import AttributeValue, ContextBroker, Notification
from .clock import Clock
from .errors import CycleError, InvalidStreamSpecError, UnknownCompositeError

logger = logging.getLogger(__name__)

AGGREGATIONS = ("Avg", "Min", "Max", "Sum", "Any", "All")

SINK_NAME = "composite-entities"


@dataclass
class CompositeSpec:
    composite_id: str
    entity_type: str = "Room"
    member_ids: list[str] = field(default_factory=list)
    # alternative member selector: entities whose attribute equals a literal
    member_predicate: Optional[tuple[str, str]] = None  # (attribute, value)
    attribute_fns: dict[str, str] = field(default_factory=dict)

    def to_obj(self) -> dict:
        return {
            "composite_id": self.composite_id,
            "entity_type": self.entity_type,
            "member_ids": list(self.member_ids),
            "member_predicate": list(self.member_predicate) if self.member_predicate else None,
            "attribute_fns": dict(self.attribute_fns),
        }


class CompositeManager:
    def __init__(self, broker: ContextBroker, clock: Clock):
        self._broker = broker
        self._clock = clock
        self._specs: dict[str, CompositeSpec] = {}
        self._lock = threading.RLock()
        self._refreshing: set[str] = set()
        broker.register_sink(SINK_NAME, self._on_notification)

    def define_composite(self, spec: CompositeSpec) -> str:
        """Create the composite entity and keep it refreshed from members."""
        for fn in spec.attribute_fns.values():
            if fn not in AGGREGATIONS:
                raise InvalidStreamSpecError(f"unknown aggregation {fn!r}")
        with self._lock:
            self._check_cycles(spec)
            if not spec.member_ids and spec.member_predicate is None:
                logger.warning("composite %s defined with empty member set", spec.composite_id)
            self._specs[spec.composite_id] = spec
            if not self._broker.has_entity(spec.composite_id):
                self._broker.upsert_entity(spec.composite_id, spec.entity_type, {})
            if spec.member_ids:
                self._broker.subscribe(SINK_NAME, ids=spec.member_ids)
            else:
                self._broker.subscribe(SINK_NAME)
        self.refresh(spec.composite_id)
        return spec.composite_id

    def get_spec(self, composite_id: str) -> CompositeSpec:
        with self._lock:
            spec = self._specs.get(composite_id)
            if spec is None:
                raise UnknownCompositeError(f"no composite {composite_id!r}")
            return spec

    def specs(self) -> list[CompositeSpec]:
        with self._lock:
            return list(self._specs.values())

    def refresh(self, composite_id: str):
        """Recompute all mapped attributes from current live member values."""
        with self._lock:
            spec = self._specs.get(composite_id)
            if spec is None:
                raise UnknownCompositeError(f"no composite {composite_id!r}")
            if composite_id in self._refreshing:
                return None
            self._refreshing.add(composite_id)
        try:
            members = self._resolve_members(spec)
            previous = self._broker.get_entity(composite_id)
            # non-mapped attributes (tags like location) survive refreshes
            attributes: dict[str, AttributeValue] = {
                name: att for name, att in previous.attributes.items()
                if name not in spec.attribute_fns
            }
            for attribute, fn in spec.attribute_fns.items():
                values, units, stamps = [], [], []
                for member_id in members:
                    if self._broker.node_state(member_id) == "Disconnected":
                        continue
                    try:
                        member = self._broker.get_entity(member_id)
                    except Exception:
                        continue
                    att = member.attributes.get(attribute)
                    if att is None:
                        continue
                    values.append(att.value)
                    units.append(att.unit)
                    stamps.append(att.observed_at)
                if not values:
                    continue  # all members stale/silent: attribute stays absent
                value = self._fold(fn, values)
                prev_att = previous.attributes.get(attribute)
                observed_at = max(stamps)
                if prev_att is not None:
                    observed_at = max(observed_at, prev_att.observed_at)
                attributes[attribute] = AttributeValue(
                    value=value,
                    unit=units[0] if units else "",
                    observed_at=observed_at,
                    quality="Derived",
                )
            self._broker.upsert_entity(composite_id, spec.entity_type, attributes)
            return self._broker.get_entity(composite_id)
        finally:
            with self._lock:
                self._refreshing.discard(composite_id)

    # -- internals -----------------------------------------------------------

    def _resolve_members(self, spec: CompositeSpec) -> list[str]:
        if spec.member_predicate is not None:
            attribute, literal = spec.member_predicate
            records = self._broker.query_entities(predicate=(attribute, "=", literal))
            return [r.id for r in records if r.id != spec.composite_id]
        return [m for m in spec.member_ids if self._broker.has_entity(m)]

    def _check_cycles(self, spec: CompositeSpec) -> None:
        """A composite may contain composites, but never itself transitively."""
        graph = {cid: set(s.member_ids) for cid, s in self._specs.items()}
        graph[spec.composite_id] = set(spec.member_ids)
        seen: set[str] = set()

        def reach(node: str) -> None:
            for member in graph.get(node, ()):  # noqa: B905
                if member == spec.composite_id:
                    raise CycleError(f"composite {spec.composite_id!r} would contain itself")
                if member not in seen:
                    seen.add(member)
                    reach(member)

        reach(spec.composite_id)

    @staticmethod
    def _fold(fn: str, values: list):
        if fn == "Avg":
            return math.fsum(values) / len(values)
        if fn == "Min":
            return min(values)
        if fn == "Max":
            return max(values)
        if fn == "Sum":
            return math.fsum(values)
        if fn == "Any":
            return any(bool(v) for v in values)
        return all(bool(v) for v in values)

    def _on_notification(self, notification: Notification) -> None:
        with self._lock:
            targets = [
                spec.composite_id
                for spec in self._specs.values()
                if self._is_member(spec, notification.entity_id)
                and notification.attribute in spec.attribute_fns
            ]
        for composite_id in targets:
            try:
                self.refresh(composite_id)
            except Exception:  # noqa: BLE001
                logger.exception("composite refresh failed for %s", composite_id)

    def _is_member(self, spec: CompositeSpec, entity_id: str) -> bool:
        if entity_id == spec.composite_id:
            return False
        if spec.member_predicate is not None:
            try:
                record = self._broker.get_entity(entity_id)
            except Exception:
                return False
            attribute, literal = spec.member_predicate
            att = record.attributes.get(attribute)
            return att is not None and att.value == literal
        return entity_id in spec.member_ids
