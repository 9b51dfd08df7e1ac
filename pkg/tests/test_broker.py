from __future__ import annotations

import threading

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wattwise.broker import AttributeValue, ContextBroker, Notification
from wattwise.clock import SimulatedClock
from wattwise.errors import (
    FutureTimestampError,
    MalformedIdError,
    MissingUnitError,
    StaleTimestampError,
    UnknownEntityError,
)

from conftest import att


class Collector:
    def __init__(self):
        self.notifications: list[Notification] = []

    def __call__(self, n: Notification) -> None:
        self.notifications.append(n)


def test_idempotent_content_upsert_bumps_version_only(broker, clock):
    v1 = broker.upsert_entity("co2-office-1", "SensorNode", {"co2": att(450.0, "ppm", 0)})
    before = broker.get_entity("co2-office-1")
    clock.advance(1000)
    v2 = broker.upsert_entity("co2-office-1", "SensorNode", {"co2": att(450.0, "ppm", 0)})
    after = broker.get_entity("co2-office-1")
    assert v2 > v1
    assert after.attributes == before.attributes
    assert after.updated_at > before.updated_at


def test_read_your_write(broker):
    broker.upsert_entity("office-12", "Room", {"name": att("Office 12")})
    record = broker.get_entity("office-12")
    assert record.id == "office-12"
    assert record.entity_type == "Room"
    assert record.attributes["name"].value == "Office 12"


def test_bulk_upsert_count_oracle(broker):
    n = 1000
    for i in range(n):
        broker.upsert_entity(f"node-{i:04d}", "SensorNode", {"co2": att(400.0 + i, "ppm")})
    broker.upsert_entity("room-1", "Room", {})
    assert len(broker.query_entities(entity_type="SensorNode")) == n


def test_patch_single_field_notifies_once(broker, clock):
    broker.upsert_entity("node-1", "SensorNode", {"co2": att(990.0, "ppm", at=0)})
    sink = Collector()
    broker.register_sink("t", sink)
    broker.subscribe("t", entity_type="SensorNode", attribute="co2")
    clock.advance_to(3_600_000)
    record = broker.update_attributes("node-1", {"co2": att(1010.0, "ppm", at=3_600_000)})
    assert record.attributes["co2"].value == 1010.0
    assert len(sink.notifications) == 1
    assert sink.notifications[0].old.value == 990.0
    assert sink.notifications[0].new.value == 1010.0


def test_stale_patch_rejected_state_unchanged(broker):
    broker.upsert_entity("node-1", "SensorNode", {"co2": att(990.0, "ppm", at=10_000)})
    with pytest.raises(StaleTimestampError):
        broker.update_attributes("node-1", {"co2": att(1010.0, "ppm", at=5_000)})
    assert broker.get_entity("node-1").attributes["co2"].value == 990.0


def test_three_attribute_patch_notification_count(broker):
    broker.upsert_entity("node-1", "SensorNode", {
        "co2": att(400.0, "ppm"), "temperature": att(21.0, "degC"), "humidity": att(40.0, "%RH"),
    })
    sink = Collector()
    broker.register_sink("t", sink)
    broker.subscribe("t", entity_type="SensorNode")
    broker.subscribe("t", ids=["node-1"])
    broker.update_attributes("node-1", {
        "co2": att(500.0, "ppm", 1), "temperature": att(22.0, "degC", 1), "humidity": att(45.0, "%RH", 1),
    })
    # 3 changed attributes x 2 matching subscriptions
    assert len(sink.notifications) == 6


def test_query_predicate_filter_oracle(broker):
    broker.upsert_entity("office-A", "Room", {"co2": att(1200.0, "ppm")})
    broker.upsert_entity("office-B", "Room", {"co2": att(800.0, "ppm")})
    hits = broker.query_entities(entity_type="Room", predicate=("co2", ">", 1000))
    assert [r.id for r in hits] == ["office-A"]


def test_query_empty_broker(broker):
    assert broker.query_entities() == []


def test_get_after_upsert_equality(broker):
    broker.upsert_entity("x", "Custom", {"a": att("v")})
    assert broker.get_entity("x").attributes["a"].value == "v"
    with pytest.raises(UnknownEntityError):
        broker.get_entity("missing")


def test_subscription_filter_miss(broker):
    broker.upsert_entity("node-1", "SensorNode", {"co2": att(400.0, "ppm")})
    sink = Collector()
    broker.register_sink("t", sink)
    broker.subscribe("t", entity_type="SensorNode", attribute="co2")
    broker.update_attributes("node-1", {"humidity": att(50.0, "%RH", 1)})
    assert sink.notifications == []


def test_unsubscribe_stops_notifications(broker):
    broker.upsert_entity("node-1", "SensorNode", {})
    sink = Collector()
    broker.register_sink("t", sink)
    sub = broker.subscribe("t")
    broker.unsubscribe(sub)
    broker.update_attributes("node-1", {"co2": att(400.0, "ppm", 1)})
    assert sink.notifications == []


def test_fanout_two_subscriptions(broker):
    broker.upsert_entity("node-1", "SensorNode", {})
    sink = Collector()
    broker.register_sink("t", sink)
    broker.subscribe("t", attribute="co2")
    broker.subscribe("t", ids=["node-1"])
    broker.update_attributes("node-1", {"co2": att(450.0, "ppm", 1)})
    assert len(sink.notifications) == 2


def test_numeric_attribute_requires_unit(broker):
    with pytest.raises(MissingUnitError):
        broker.upsert_entity("node-1", "SensorNode", {"co2": att(400.0)})
    # declared-unitless names pass
    broker.upsert_entity("node-1", "SensorNode", {"presence": att(2.0)})


def test_future_timestamp_rejected(broker, clock):
    with pytest.raises(FutureTimestampError):
        broker.upsert_entity("node-1", "SensorNode", {"co2": att(400.0, "ppm", at=120_000)})


def test_malformed_id(broker):
    for bad in ("", "  ", "has space"):
        with pytest.raises(MalformedIdError):
            broker.upsert_entity(bad, "Room", {})


def test_soft_delete_hides_from_queries(broker):
    broker.upsert_entity("x", "Room", {})
    broker.delete_entity("x")
    assert broker.query_entities() == []
    with pytest.raises(UnknownEntityError):
        broker.get_entity("x")
    assert broker.get_entity("x", include_deleted=True).deleted


# -- liveness ----------------------------------------------------------------


def test_liveness_timeline_disconnect(broker, clock):
    broker.upsert_entity("node-1", "SensorNode", {"reporting_period_ms": att(60_000)})
    broker.mark_liveness("node-1", 0)
    assert broker.get_lifecycle("node-1").state == "Connected"
    # silent for 200 s with a 180 s timeout
    assert broker.sweep_liveness(200_000) == ["node-1"]
    assert broker.get_lifecycle("node-1").state == "Disconnected"


def test_reconnection_on_fresh_measurement(broker):
    broker.upsert_entity("node-1", "SensorNode", {"reporting_period_ms": att(60_000)})
    broker.mark_liveness("node-1", 0)
    broker.sweep_liveness(400_000)
    assert broker.get_lifecycle("node-1").state == "Disconnected"
    broker.mark_liveness("node-1", 400_000)
    assert broker.get_lifecycle("node-1").state == "Connected"


def test_sweep_empty_broker(broker):
    assert broker.sweep_liveness(10_000) == []


def test_bootstrap_command_sequence(broker):
    broker.upsert_entity("node-1", "SensorNode", {"reporting_period_ms": att(30_000)})
    commands = broker.begin_bootstrap("node-1")
    assert commands == ["set-reporting-period 30000", "enable-telemetry"]
    assert broker.get_lifecycle("node-1").state == "Bootstrapping"


ALLOWED_EDGES = {
    ("Registered", "Bootstrapping"),
    ("Bootstrapping", "Connected"),
    ("Connected", "Disconnected"),
    ("Disconnected", "Connected"),
}


@settings(max_examples=60, deadline=None)
@given(st.lists(st.sampled_from(["seen", "silence", "sweep"]), min_size=1, max_size=40))
def test_lifecycle_never_skips_states(events):
    clock = SimulatedClock(0)
    broker = ContextBroker(clock)
    broker.upsert_entity("node-1", "SensorNode", {"reporting_period_ms": att(60_000)})
    observed: list[str] = [broker.get_lifecycle("node-1").state]
    now = 0
    for event in events:
        if event == "seen":
            broker.mark_liveness("node-1", now)
        elif event == "silence":
            now += 200_000
            clock.advance_to(now)
        else:
            broker.sweep_liveness(now)
        observed.append(broker.get_lifecycle("node-1").state)
    for a, b in zip(observed, observed[1:]):
        if a != b:
            # multi-hop walks pass through every intermediate state, which
            # mark_liveness reports via attribute notifications; here we only
            # see settled states, so allow the composed Registered->Connected hop
            assert (a, b) in ALLOWED_EDGES or (
                (a, b) == ("Registered", "Connected")
            ), f"illegal transition {a} -> {b}"


def test_lifecycle_attribute_transitions_are_notified(broker):
    sink = Collector()
    broker.register_sink("t", sink)
    broker.subscribe("t", attribute="lifecycle_state")
    broker.upsert_entity("node-1", "SensorNode", {"reporting_period_ms": att(60_000)})
    broker.mark_liveness("node-1", 0)
    states = [n.new.value for n in sink.notifications]
    assert states == ["Bootstrapping", "Connected"]


# -- concurrency and completeness ------------------------------------------------


def test_versions_strictly_increase_under_concurrency(broker):
    broker.upsert_entity("node-1", "SensorNode", {})
    versions: list[int] = []
    lock = threading.Lock()

    def writer(start: int) -> None:
        for i in range(50):
            v = broker.upsert_entity("node-1", "SensorNode", {"count": att(float(start + i))})
            with lock:
                versions.append(v)

    threads = [threading.Thread(target=writer, args=(t * 1000,)) for t in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(set(versions)) == len(versions) == 400
    assert broker.get_entity("node-1").version == max(versions)


def test_notification_completeness_and_dedup(broker):
    broker.upsert_entity("node-1", "SensorNode", {})
    sink = Collector()
    broker.register_sink("t", sink)
    broker.subscribe("t", ids=["node-1"], attribute="co2")
    changes = 0
    for i in range(20):
        broker.update_attributes("node-1", {"co2": att(400.0 + i, "ppm", at=i)})
        changes += 1
    assert len(sink.notifications) >= changes
    dedup = {(n.entity_id, n.attribute, n.version) for n in sink.notifications}
    assert len(dedup) == changes
