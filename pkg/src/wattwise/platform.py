"""Composition root: wires every subsystem and owns campaign orchestration.

Single-process deployment with module boundaries as internal interfaces.
The ingestion path drives the simulated clock: each measurement advances
time, firing any stream ticks that became due strictly before it, so a
scenario replay at full speed still produces the exact tick/firing sequence
wall-clock operation would.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from typing import Any, Optional

from .analytics import Analytics
from .broker import AttributeValue, ContextBroker
from .clock import SimulatedClock, WallClock
from .composites import CompositeManager
from .config import PlatformConfig
from .errors import (
    CampaignStateError,
    UnknownCampaignError,
    UnknownSpaceError,
)
from .fusion import FusionStore, default_vocabulary
from .recommender import Recommender
from .streams import StreamProcessor
from .timeseries import Measurement, SeriesQuery, TimeseriesStore

logger = logging.getLogger(__name__)


@dataclass
class Campaign:
    id: str
    name: str
    space_ids: list[str]
    user_ids: list[str]
    start_ms: int
    end_ms: int
    status: str = "Draft"  # Draft | Active | Ended
    energy_attribute: str = "energy"
    energy_unit: str = "kWh"
    period_ms: int = 604_800_000

    def to_obj(self) -> dict:
        return {
            "id": self.id,
            "name": self.name,
            "space_ids": list(self.space_ids),
            "user_ids": list(self.user_ids),
            "start_ms": self.start_ms,
            "end_ms": self.end_ms,
            "status": self.status,
            "energy_attribute": self.energy_attribute,
            "energy_unit": self.energy_unit,
            "period_ms": self.period_ms,
        }


@dataclass
class IngestReport:
    accepted: int = 0
    dropped: int = 0
    errors: int = 0
    items: list[dict] = field(default_factory=list)

    def to_obj(self) -> dict:
        return {
            "accepted": self.accepted,
            "dropped": self.dropped,
            "errors": self.errors,
            "items": self.items,
        }


class Platform:
    def __init__(self, config: Optional[PlatformConfig] = None):
        self.config = config or PlatformConfig()
        if self.config.clock == "wall":
            self.clock = WallClock()
        else:
            self.clock = SimulatedClock(self.config.sim_start_ms)
        self.broker = ContextBroker(
            self.clock,
            skew_ms=self.config.clock_skew_ms,
            liveness_multiplier=self.config.liveness_multiplier,
        )
        self.store = TimeseriesStore(
            self.config.data_dir,
            self.clock,
            flush_window_ms=self.config.flush_window_ms,
        )
        self.processor = StreamProcessor(
            self.clock, self.broker, self.store,
            staleness_multiplier=self.config.staleness_multiplier,
        )
        self.fusion = FusionStore(default_vocabulary(self.config.vocab_version))
        self.composites = CompositeManager(self.broker, self.clock)
        self.recommender = Recommender(
            self.clock, self.broker, self.processor, self.fusion,
            gamer_precedence=tuple(self.config.gamer_precedence),
            preference_evidence_k=self.config.preference_evidence_k,
            default_validation_window_ms=self.config.validation_window_ms,
            auto_deliver=self.config.auto_deliver,
        )
        self.analytics = Analytics(
            self.clock, self.store, self.recommender, self.fusion,
            consumption_fn=self._user_consumption,
        )
        self._campaigns: dict[str, Campaign] = {}
        self._frozen_dashboards: dict[str, dict] = {}
        self._idempotency: dict[str, dict] = {}
        self._campaign_seq = 0
        self._last_sweep = self.clock.now_ms()
        self._lock = threading.RLock()
        # cleaned measurements become stored Observation documents
        self.processor.on_event(self._enrich_cleaned)
        # composite refreshes feed streams that target the composite
        self.broker.register_sink("stream-bridge", self._bridge_derived)
        self.broker.subscribe("stream-bridge")

    # -- ingestion ------------------------------------------------------------

    def ingest(self, measurements: list[dict], idempotency_key: Optional[str] = None) -> dict:
        """Batch ingestion; item-level errors never abort the batch."""
        if idempotency_key:
            with self._lock:
                cached = self._idempotency.get(idempotency_key)
            if cached is not None:
                return cached
        report = IngestReport()
        for raw in measurements:
            item = self._ingest_one(raw)
            report.items.append(item)
            if item["status"] == "accepted":
                report.accepted += 1
            elif item["status"] == "dropped-outlier":
                report.dropped += 1
            else:
                report.errors += 1
        result = report.to_obj()
        if idempotency_key:
            with self._lock:
                self._idempotency[idempotency_key] = result
        return result

    def _ingest_one(self, raw: dict) -> dict:
        try:
            sensor_id = raw["sensor_id"]
            attribute = raw["attribute"]
            value = float(raw["value"])
            unit = raw.get("unit", "")
            observed_at = int(raw["observed_at"])
        except (KeyError, TypeError, ValueError) as exc:
            return {"status": "error", "code": "malformed-measurement", "detail": str(exc)}
        if not self.broker.has_entity(sensor_id):
            return {
                "status": "error", "code": "unknown-sensor",
                "sensor_id": sensor_id, "observed_at": observed_at,
            }
        arrival_ms = self._wall_ms()
        # fire ticks that became due strictly before this sample's timestamp
        if isinstance(self.clock, SimulatedClock):
            self.processor.advance_to(observed_at, inclusive=False)
            self.clock.advance_to(observed_at)
        self._maybe_sweep(self.clock.now_ms())
        self.broker.mark_liveness(sensor_id, observed_at)
        m = Measurement(
            sensor_id=sensor_id, attribute=attribute, value=value,
            unit=unit, observed_at=observed_at, quality="Raw",
        )
        dropped = False
        try:
            if self.processor.covers(sensor_id, attribute):
                events = self.processor.ingest(m)
                dropped = any(e.kind == "OutlierDropped" for e in events)
            else:
                self.store.append(m)
        except Exception as exc:  # noqa: BLE001
            return {
                "status": "error", "code": getattr(exc, "code", "ingest-failed"),
                "sensor_id": sensor_id, "observed_at": observed_at, "detail": str(exc),
            }
        if not dropped:
            try:
                self.broker.update_attributes(sensor_id, {
                    attribute: AttributeValue(
                        value=value, unit=unit, observed_at=observed_at, quality="Cleaned",
                    ),
                })
            except Exception:  # noqa: BLE001 - stale current-state update; history kept
                logger.debug("current-state update skipped for %s.%s", sensor_id, attribute)
        seq = self.store.max_seq()
        return {
            "status": "dropped-outlier" if dropped else "accepted",
            "sensor_id": sensor_id,
            "attribute": attribute,
            "observed_at": observed_at,
            "seq": seq,
            "arrival_ms": arrival_ms,
        }

    def advance_clock(self, to_ms: int) -> dict:
        """Advance simulated time, firing due ticks and sweeps."""
        if not isinstance(self.clock, SimulatedClock):
            return {"clock": "wall", "now_ms": self.clock.now_ms()}
        self.processor.advance_to(to_ms, inclusive=True)
        self.clock.advance_to(to_ms)
        self.broker.sweep_liveness(to_ms)
        self.recommender.sweep(to_ms)
        self._last_sweep = to_ms
        return {"clock": "simulated", "now_ms": self.clock.now_ms()}

    def tick_wall(self) -> None:
        """Wall-clock adapter: run due ticks and sweeps at the current time."""
        now = self.clock.now_ms()
        self.processor.advance_to(now, inclusive=True)
        self.broker.sweep_liveness(now)
        self.recommender.sweep(now)

    def _maybe_sweep(self, now_ms: int) -> None:
        if now_ms - self._last_sweep >= self.config.sweep_interval_ms:
            self._last_sweep = now_ms
            self.broker.sweep_liveness(now_ms)
            self.recommender.sweep(now_ms)

    def _wall_ms(self) -> int:
        import time

        return int(time.time() * 1000)

    # -- campaigns ---------------------------------------------------------------

    def create_campaign(self, payload: dict) -> Campaign:
        with self._lock:
            self._campaign_seq += 1
            campaign = Campaign(
                id=f"campaign-{self._campaign_seq}",
                name=payload.get("name", ""),
                space_ids=list(payload.get("space_ids", [])),
                user_ids=list(payload.get("user_ids", [])),
                start_ms=int(payload.get("start_ms", self.clock.now_ms())),
                end_ms=int(payload.get("end_ms", 0)),
                energy_attribute=payload.get("energy_attribute", "energy"),
                energy_unit=payload.get("energy_unit", "kWh"),
                period_ms=int(payload.get("period_ms", self.config.dashboard_period_ms)),
            )
            self._campaigns[campaign.id] = campaign
            return campaign

    def get_campaign(self, campaign_id: str) -> Campaign:
        with self._lock:
            campaign = self._campaigns.get(campaign_id)
            if campaign is None:
                raise UnknownCampaignError(f"no campaign {campaign_id!r}")
            return campaign

    def campaigns(self) -> list[Campaign]:
        with self._lock:
            return list(self._campaigns.values())

    def activate_campaign(self, campaign_id: str) -> Campaign:
        with self._lock:
            campaign = self.get_campaign(campaign_id)
            for space_id in campaign.space_ids:
                if not self.broker.has_entity(space_id):
                    raise UnknownSpaceError(f"space {space_id!r} is not registered")
            campaign.status = "Active"
            return campaign

    def end_campaign(self, campaign_id: str) -> Campaign:
        with self._lock:
            campaign = self.get_campaign(campaign_id)
            if campaign.status == "Ended":
                return campaign
            campaign.status = "Ended"
            self._frozen_dashboards[campaign.id] = self._compute_dashboard(
                campaign, self.clock.now_ms(),
            )
            return campaign

    def require_active_campaign(self, campaign_id: Optional[str]) -> None:
        if campaign_id is None:
            return
        campaign = self.get_campaign(campaign_id)
        if campaign.status != "Active":
            raise CampaignStateError(
                f"campaign {campaign_id} is {campaign.status}; streams and rules attach to Active campaigns only"
            )

    # -- dashboard ------------------------------------------------------------------

    def dashboard(self, campaign_id: str) -> dict:
        campaign = self.get_campaign(campaign_id)
        now = self.clock.now_ms()
        if campaign.status == "Active" and campaign.end_ms and now > campaign.end_ms:
            self.end_campaign(campaign_id)
            campaign = self.get_campaign(campaign_id)
        if campaign.status == "Ended":
            frozen = self._frozen_dashboards.get(campaign_id)
            if frozen is not None:
                return frozen
        return self._compute_dashboard(campaign, now)

    def _compute_dashboard(self, campaign: Campaign, now: int) -> dict:
        period = campaign.period_ms
        current = (now - period, now)
        previous = (now - 2 * period, now - period)
        per_space: dict[str, float] = {}
        current_total = 0.0
        previous_total = 0.0
        any_previous = False
        for space_id in campaign.space_ids:
            cur = self._space_consumption(space_id, campaign.energy_attribute, *current)
            prev = self._space_consumption(space_id, campaign.energy_attribute, *previous)
            per_space[space_id] = cur if cur is not None else 0.0
            current_total += cur or 0.0
            if prev is not None:
                previous_total += prev
                any_previous = True
        delta_pct = None
        if any_previous and previous_total > 0:
            delta_pct = (current_total - previous_total) / previous_total * 100.0
        counts = {"delivered": 0, "accepted": 0, "validated": 0}
        users = set(campaign.user_ids)
        for event in self.recommender.engine_events():
            if users and event.user_id not in users:
                continue
            if event.kind in counts:
                counts[event.kind] += 1
        active_streams = sum(1 for s in self.processor.streams() if s.active)
        return {
            "campaign_id": campaign.id,
            "status": campaign.status,
            "computed_at": now,
            "period_ms": period,
            "energy_attribute": campaign.energy_attribute,
            "energy_unit": campaign.energy_unit,
            "current_consumption": current_total,
            "previous_consumption": previous_total if any_previous else None,
            "delta_pct": delta_pct,
            "per_space": per_space,
            "active_stream_count": active_streams,
            "recommendations": counts,
        }

    def _space_consumption(
        self, space_id: str, attribute: str, t0: int, t1: int
    ) -> Optional[float]:
        """Sum of the energy attribute over all sensors located in the space."""
        total = 0.0
        seen = False
        for sensor in self.broker.query_entities(
            entity_type="SensorNode", predicate=("located_in", "=", space_id)
        ):
            key = (sensor.id, attribute)
            if self.store.count(key) == 0:
                continue
            buckets = self.store.query_aggregate(SeriesQuery(
                sensor_id=sensor.id, attribute=attribute,
                t0=t0, t1=t1, bucket_ms=t1 - t0, fn="Sum",
            ))
            for bucket in buckets:
                if bucket.value is not None:
                    total += bucket.value
                    seen = True
        return total if seen else None

    def _user_consumption(self, user_id: str, t0: int, t1: int) -> Optional[float]:
        if t0 >= t1:
            return None
        try:
            profile = self.recommender.get_profile(user_id)
        except Exception:  # noqa: BLE001
            return None
        total = 0.0
        seen = False
        for space_id in sorted(profile.activity_locations):
            value = self._space_consumption(space_id, "energy", t0, t1)
            if value is not None:
                total += value
                seen = True
        return total if seen else None

    # -- wiring callbacks --------------------------------------------------------------

    def _enrich_cleaned(self, event) -> None:
        if event.kind != "CleanedMeasurement":
            return
        try:
            doc = self.fusion.enrich("Measurement", {
                "sensor_id": event.payload["sensor_id"],
                "attribute": event.payload["attribute"],
                "value": event.payload["value"],
                "unit": event.payload.get("unit", ""),
                "observed_at": event.at,
                "quality": "Cleaned",
            })
            self.fusion.store_document(doc)
        except Exception:  # noqa: BLE001
            logger.exception("observation enrichment failed")

    def _bridge_derived(self, notification) -> None:
        """Composite attribute refreshes act as cleaned samples for streams."""
        if notification.new.quality != "Derived":
            return
        if notification.attribute == "lifecycle_state":
            return
        value = notification.new.value
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            return
        if self.processor.covers(notification.entity_id, notification.attribute):
            self.processor.offer_cleaned(
                notification.entity_id,
                notification.attribute,
                float(value),
                notification.new.observed_at,
            )

    def close(self) -> None:
        self.store.close()
