from __future__ import annotations

import json
from pathlib import Path

import httpx
import pytest

from wattwise.api import create_app
from wattwise.clock import HOUR_MS, MINUTE_MS
from wattwise.config import PlatformConfig
from wattwise.errors import InvalidScenarioError
from wattwise.platform import Platform
from wattwise.simulator import generate, replay

TOKEN = "test-token"


def office_scenario(seed=42, duration_h=8, outlier_rate=0.0):
    return {
        "seed": seed,
        "start_ms": 0,
        "duration_ms": duration_h * HOUR_MS,
        "spaces": [{
            "id": "office-12",
            "area_m2": 20,
            "sensors": {
                "co2": {"id": "co2-office-12", "period_ms": 3_000},
                "door": {"id": "door-office-12", "period_ms": 300_000},
                "presence": {"id": "pres-office-12", "period_ms": 300_000},
            },
        }],
        "outliers": {"rate": outlier_rate},
        "occupants": [
            {
                "user_id": f"user-{i}", "space_id": "office-12",
                "gamer_type": "Humanitarian",
                "presence": [[1 * HOUR_MS, 3 * HOUR_MS], [4 * HOUR_MS, 6 * HOUR_MS]],
                "door_actions": [{"at_ms": 3 * HOUR_MS, "open_for_ms": 30 * MINUTE_MS}] if i == 0 else [],
            }
            for i in range(4)
        ],
        "streams": [{
            "sensor": "co2", "space_id": "office-12",
            "frequency_ms": HOUR_MS, "measurement_type": "LastValue",
            "condition": {"comparator": ">", "threshold": 1000.0,
                          "trigger": "Level", "cooldown_ms": HOUR_MS},
        }],
    }


def read_bundle(path: Path) -> dict[str, bytes]:
    return {p.name: p.read_bytes() for p in sorted(path.iterdir())}


def test_seed_determinism_byte_identical(tmp_path):
    generate(office_scenario(), tmp_path / "a")
    generate(office_scenario(), tmp_path / "b")
    a, b = read_bundle(tmp_path / "a"), read_bundle(tmp_path / "b")
    assert a.keys() == b.keys()
    for name in a:
        assert a[name] == b[name], f"{name} differs between runs"


def test_different_seed_different_trace(tmp_path):
    generate(office_scenario(seed=1), tmp_path / "a")
    generate(office_scenario(seed=2), tmp_path / "b")
    assert (tmp_path / "a" / "trace.jsonl").read_bytes() != (tmp_path / "b" / "trace.jsonl").read_bytes()


def test_zero_rate_means_no_injected_outliers(tmp_path):
    ground = generate(office_scenario(outlier_rate=0.0), tmp_path / "bundle")
    assert ground["injected_outliers"] == []


def test_injection_rate_roughly_respected(tmp_path):
    ground = generate(office_scenario(outlier_rate=0.05), tmp_path / "bundle")
    counts = ground["per_sensor_counts"]
    co2_count = counts["co2-office-12"]
    injected = len(ground["injected_outliers"])
    assert 0.01 * co2_count < injected < 0.12 * co2_count
    # every injected outlier appears in the trace verbatim
    trace = {}
    with open(tmp_path / "bundle" / "trace.jsonl") as fh:
        for line in fh:
            row = json.loads(line)
            trace[(row["sensor_id"], row["observed_at"])] = row["value"]
    for outlier in ground["injected_outliers"]:
        assert trace[(outlier["sensor_id"], outlier["observed_at"])] == outlier["value"]


def test_co2_crosses_threshold_and_first_firing_time(tmp_path):
    ground = generate(office_scenario(), tmp_path / "bundle")
    values = []
    with open(tmp_path / "bundle" / "trace.jsonl") as fh:
        for line in fh:
            row = json.loads(line)
            if row["sensor_id"] == "co2-office-12":
                values.append(row["value"])
    assert max(values) > 1000.0  # 4 people in 20 m2 push CO2 over the threshold
    [key] = list(ground["expected_firings"])
    firings = ground["expected_firings"][key]
    # occupancy starts at 1h; the first-order model crosses 1000 ppm ~39 min
    # later, so the first hourly LastValue tick above threshold is at 2h
    assert firings[0] == 2 * HOUR_MS
    assert len(firings) >= 2  # door venting at 3h forces a second excursion


def test_invalid_scenarios_rejected(tmp_path):
    with pytest.raises(InvalidScenarioError):
        generate({"seed": "nope", "duration_ms": 100, "spaces": []}, tmp_path / "x")
    with pytest.raises(InvalidScenarioError):
        generate({"seed": 1, "duration_ms": 0, "spaces": [{"id": "a", "sensors": {"co2": {"id": "c"}}}]},
                 tmp_path / "y")
    bad = office_scenario()
    bad["outliers"]["rate"] = 1.5
    with pytest.raises(InvalidScenarioError):
        generate(bad, tmp_path / "z")


# -- replay -------------------------------------------------------------------------


@pytest.fixture
def live():
    from fastapi.testclient import TestClient

    platform = Platform(PlatformConfig(token=TOKEN))
    app = create_app(platform)
    client = TestClient(app)
    yield platform, client
    client.close()
    platform.close()


def register_bundle_streams(platform, bundle: Path, ground: dict) -> list[str]:
    """Entities + streams at scenario start, the grid the bundle assumes."""
    entities = json.loads((bundle / "entities.json").read_text())
    for e in entities:
        from wattwise.broker import AttributeValue
        platform.broker.upsert_entity(e["id"], e["entity_type"], {
            name: AttributeValue.from_obj(obj) for name, obj in e["attributes"].items()
        })
    stream_ids = []
    for stream in ground["streams"]:
        sid = platform.processor.register_stream(
            stream["sensor_id"], stream["attribute"], stream["frequency_ms"],
            stream["measurement_type"],
        )
        platform.processor.activate(sid)
        stream_ids.append(sid)
    return stream_ids


def test_replay_acks_everything_and_counts_reconcile(tmp_path, live):
    platform, client = live
    bundle = tmp_path / "bundle"
    ground = generate(office_scenario(duration_h=4), bundle)
    register_bundle_streams(platform, bundle, ground)
    report = replay(bundle, "http://testserver", "max", TOKEN, client=client)
    assert not report["partial"]
    total = sum(ground["per_sensor_counts"].values())
    assert report["sent"] == total
    assert report["acked"] == total
    assert report["errors"] == 0
    # stored rows (Raw + Cleaned) equal acked measurements, per sensor
    for sensor_id, expected in ground["per_sensor_counts"].items():
        attribute = {"co2-office-12": "co2", "door-office-12": "open",
                     "pres-office-12": "presence"}[sensor_id]
        rows = client.get("/v1/series/raw", params={
            "sensor": sensor_id, "attribute": attribute,
            "t0": 0, "t1": ground["end_ms"] + 1000,
        }).json()
        assert len(rows) == expected, sensor_id


def test_replay_firings_match_ground_truth(tmp_path, live):
    platform, client = live
    bundle = tmp_path / "bundle"
    ground = generate(office_scenario(duration_h=8, outlier_rate=0.02), bundle)
    [stream_spec] = ground["streams"]
    [sid] = register_bundle_streams(platform, bundle, ground)
    condition = stream_spec["condition"]
    platform.processor.register_condition(
        sid, condition["comparator"], condition["threshold"],
        trigger=condition["trigger"], cooldown_ms=condition["cooldown_ms"],
    )
    report = replay(bundle, "http://testserver", "max", TOKEN, client=client)
    assert not report["partial"]
    fired = [
        e.at for e in platform.processor.events(sid)
        if e.kind == "ContextChange" and "condition_id" in e.payload
    ]
    assert fired == ground["expected_firings"][stream_spec["key"]]


def test_replay_platform_down_reports_partial(tmp_path):
    bundle = tmp_path / "bundle"
    generate(office_scenario(duration_h=1), bundle)
    report = replay(bundle, "http://127.0.0.1:59999", "max", TOKEN, max_retries=2)
    assert report["partial"]


def test_cli_generate(tmp_path):
    from click.testing import CliRunner
    from wattwise.simulator import cli

    spec_path = tmp_path / "spec.json"
    spec_path.write_text(json.dumps(office_scenario(duration_h=1)))
    runner = CliRunner()
    result = runner.invoke(cli, ["generate", "--spec", str(spec_path), "--out", str(tmp_path / "out")])
    assert result.exit_code == 0, result.output
    assert (tmp_path / "out" / "trace.jsonl").exists()
    bad = tmp_path / "bad.json"
    bad.write_text("{\"seed\": \"x\"}")
    result = runner.invoke(cli, ["generate", "--spec", str(bad), "--out", str(tmp_path / "out2")])
    assert result.exit_code == 2
