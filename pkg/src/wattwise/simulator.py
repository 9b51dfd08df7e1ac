"""Scenario simulator: synthetic sensor fleets with ground-truth labels.

Generates deterministic measurement traces for office spaces (CO2,
temperature, humidity, energy, door, presence) driven by occupant scripts,
injects labeled outliers, and derives the expected stream firings with the
brute-force reference evaluators. The replay side posts a bundle to a live
platform over HTTP, preserving timestamp order.

CO2 follows a first-order response: occupied rooms rise toward an
occupancy-dependent asymptote; vacancy or an open door decays the level
back toward the outdoor baseline (faster while the door is open).
"""

from __future__ import annotations

import json
import math
import random
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import click
import httpx

from .clock import HOUR_MS, MINUTE_MS
from .errors import InvalidScenarioError
from .reference import reference_accept_flags, reference_firings, reference_ticks
from .streams import DEFAULT_PLAUSIBLE_RANGES

SENSOR_KIND_ORDER = ("co2", "temperature", "humidity", "energy", "door", "presence")

KIND_ATTRIBUTE = {
    "co2": "co2",
    "temperature": "temperature",
    "humidity": "humidity",
    "energy": "energy",
    "door": "open",
    "presence": "presence",
}

KIND_UNIT = {
    "co2": "ppm",
    "temperature": "degC",
    "humidity": "%RH",
    "energy": "kWh",
    "door": "",
    "presence": "",
}

# only continuous channels get injected outliers
INJECTABLE = ("co2", "temperature", "humidity", "energy")

DEFAULT_SIGNALS = {
    # noise_sigma reflects real short-term CO2 sensor variance; together with
    # a few-second reporting period it keeps the per-sample slope of honest
    # occupancy/venting transients inside the robust z-score band (the
    # trailing window only ever holds accepted samples, so a transient that
    # outruns the band would lock the detector out), while x5..x20 spikes
    # stay far outside it
    "co2": {
        "baseline": 420.0, "per_person_ppm": 250.0, "tau_rise_ms": 2_700_000,
        "tau_vent_ms": 1_200_000, "tau_decay_ms": 5_400_000, "noise_sigma": 25.0,
    },
    "temperature": {"baseline": 21.0, "diurnal_amplitude": 2.0, "noise_sigma": 0.2},
    "humidity": {"baseline": 45.0, "diurnal_amplitude": 8.0, "noise_sigma": 1.0},
    "energy": {"base_kw": 0.4, "per_person_kw": 0.15, "noise_sigma": 0.02},
}

DEFAULT_POLICY = {
    "window_size": 20,
    "zscore_threshold": 3.5,
    "resolution": 1.0,
}

SIM_STEP_MS = 60_000


@dataclass
class _SpaceState:
    co2: float
    occupants: int = 0
    door_open: bool = False
    occupancy_ms_accum: float = 0.0  # person-ms since last energy sample


def _check_scenario(spec: dict) -> None:
    if not isinstance(spec.get("seed"), int):
        raise InvalidScenarioError("scenario needs an integer seed")
    if not spec.get("spaces"):
        raise InvalidScenarioError("scenario needs at least one space")
    if int(spec.get("duration_ms", 0)) <= 0:
        raise InvalidScenarioError("duration_ms must be > 0")
    rate = float(spec.get("outliers", {}).get("rate", 0.0))
    if not (0.0 <= rate < 1.0):
        raise InvalidScenarioError("outlier rate must be in [0, 1)")
    for space in spec["spaces"]:
        if "id" not in space or not space.get("sensors"):
            raise InvalidScenarioError("every space needs an id and sensors")


def generate(spec: dict, out_dir: str | Path) -> dict:
    """Produce a scenario bundle; deterministic under the spec's seed.

    Bundle layout: scenario.json (the input), entities.json, trace.jsonl
    (timestamp-ordered measurements), ground_truth.json (injected outliers,
    expected firings per stream, per-sensor counts).
    """
    _check_scenario(spec)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rnd = random.Random(spec["seed"])
    start = int(spec.get("start_ms", 0))
    duration = int(spec["duration_ms"])
    end = start + duration
    signals = {k: {**DEFAULT_SIGNALS.get(k, {}), **spec.get("signals", {}).get(k, {})}
               for k in DEFAULT_SIGNALS}
    outlier_cfg = {
        "rate": 0.0, "spike_lo": 5.0, "spike_hi": 20.0, "range_violation_share": 0.3,
        **spec.get("outliers", {}),
    }

    entities: list[dict] = []
    rows: list[dict] = []
    injected: list[dict] = []

    occupants = spec.get("occupants", [])

    for space in spec["spaces"]:
        space_id = space["id"]
        entities.append({
            "id": space_id,
            "entity_type": space.get("entity_type", "Room"),
            "attributes": {},
        })
        sensors = space["sensors"]
        for kind in SENSOR_KIND_ORDER:
            if kind not in sensors:
                continue
            sensor = sensors[kind]
            # attribute timestamps at 0 so registration precedes any clock advance
            entities.append({
                "id": sensor["id"],
                "entity_type": "SensorNode",
                "attributes": {
                    "located_in": {"value": space_id, "unit": "", "observed_at": 0, "quality": "Raw"},
                    "reporting_period_ms": {
                        "value": int(sensor.get("period_ms", SIM_STEP_MS)),
                        "unit": "", "observed_at": 0, "quality": "Raw",
                    },
                },
            })

        space_rows, space_injected = _simulate_space(
            space, occupants, signals, outlier_cfg, rnd, start, end,
        )
        rows.extend(space_rows)
        injected.extend(space_injected)

    rows.sort(key=lambda r: (r["observed_at"], r["sensor_id"]))

    streams, firings = _expected_firings(spec, rows, start, end)

    per_sensor: dict[str, int] = {}
    for row in rows:
        per_sensor[row["sensor_id"]] = per_sensor.get(row["sensor_id"], 0) + 1

    ground_truth = {
        "seed": spec["seed"],
        "start_ms": start,
        "end_ms": end,
        "injected_outliers": injected,
        "expected_firings": firings,
        "per_sensor_counts": dict(sorted(per_sensor.items())),
        "streams": streams,
        "users": [
            {
                "user_id": o["user_id"],
                "space_id": o["space_id"],
                "gamer_type": o.get("gamer_type"),
                "feedback": o.get("feedback", {}),
            }
            for o in occupants
        ],
    }

    (out / "scenario.json").write_text(_dump(spec), encoding="utf-8")
    (out / "entities.json").write_text(_dump(entities), encoding="utf-8")
    (out / "ground_truth.json").write_text(_dump(ground_truth), encoding="utf-8")
    with open(out / "trace.jsonl", "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True, separators=(",", ":")) + "\n")
    return ground_truth


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1, separators=(",", ": ")) + "\n"


def _simulate_space(
    space: dict,
    occupants: list[dict],
    signals: dict,
    outlier_cfg: dict,
    rnd: random.Random,
    start: int,
    end: int,
) -> tuple[list[dict], list[dict]]:
    space_id = space["id"]
    sensors = space["sensors"]
    co2_cfg = signals["co2"]
    state = _SpaceState(co2=float(co2_cfg["baseline"]))

    local_occupants = [o for o in occupants if o.get("space_id") == space_id]
    door_intervals: list[tuple[int, int]] = []
    for occupant in local_occupants:
        for action in occupant.get("door_actions", []):
            at = int(action["at_ms"])
            door_intervals.append((at, at + int(action.get("open_for_ms", 2 * MINUTE_MS))))

    def occupancy_at(t: int) -> int:
        n = 0
        for occupant in local_occupants:
            for enter, leave in occupant.get("presence", []):
                if enter <= t < leave:
                    n += 1
                    break
        return n

    def door_open_at(t: int) -> bool:
        return any(a <= t < b for a, b in door_intervals)

    periods = {
        kind: int(sensors[kind].get("period_ms", SIM_STEP_MS))
        for kind in SENSOR_KIND_ORDER if kind in sensors
    }
    step_ms = min([SIM_STEP_MS, *periods.values()])
    rows: list[dict] = []
    injected: list[dict] = []
    last_door_value: Optional[float] = None

    def emit(kind: str, t: int, clean_value: float) -> None:
        sensor_id = sensors[kind]["id"]
        attribute = KIND_ATTRIBUTE[kind]
        value = clean_value
        if kind in INJECTABLE and outlier_cfg["rate"] > 0 and rnd.random() < outlier_cfg["rate"]:
            lo, hi = DEFAULT_PLAUSIBLE_RANGES.get(attribute, (-1e12, 1e12))
            if rnd.random() < outlier_cfg["range_violation_share"]:
                value = lo - abs(clean_value) - 1.0 if rnd.random() < 0.5 else hi + abs(clean_value) + 1.0
                kind_label = "range"
            else:
                value = clean_value * rnd.uniform(outlier_cfg["spike_lo"], outlier_cfg["spike_hi"])
                kind_label = "spike"
            injected.append({
                "sensor_id": sensor_id,
                "attribute": attribute,
                "observed_at": t,
                "value": round(value, 6),
                "clean_value": round(clean_value, 6),
                "kind": kind_label,
            })
        rows.append({
            "sensor_id": sensor_id,
            "attribute": attribute,
            "value": round(value, 6),
            "unit": KIND_UNIT[kind],
            "observed_at": t,
        })

    t = start
    while t < end:
        step_end = min(t + step_ms, end)
        dt = step_end - t
        occ = occupancy_at(t)
        door = door_open_at(t)
        state.occupants = occ
        state.door_open = door
        state.occupancy_ms_accum += occ * dt

        if door:
            target, tau = co2_cfg["baseline"], co2_cfg["tau_vent_ms"]
        elif occ > 0:
            target = co2_cfg["baseline"] + occ * co2_cfg["per_person_ppm"]
            tau = co2_cfg["tau_rise_ms"]
        else:
            target, tau = co2_cfg["baseline"], co2_cfg["tau_decay_ms"]
        state.co2 = target + (state.co2 - target) * math.exp(-dt / tau)

        sample_t = step_end
        for kind in SENSOR_KIND_ORDER:
            if kind not in periods:
                continue
            period = periods[kind]
            on_period = (sample_t - start) % period == 0
            if kind == "door":
                current = 1.0 if door_open_at(sample_t) else 0.0
                if on_period or current != last_door_value:
                    emit(kind, sample_t, current)
                    last_door_value = current
                continue
            if not on_period:
                continue
            if kind == "co2":
                emit(kind, sample_t, state.co2 + rnd.gauss(0.0, co2_cfg["noise_sigma"]))
            elif kind == "temperature":
                cfg = signals["temperature"]
                phase = 2 * math.pi * ((sample_t % 86_400_000) / 86_400_000)
                clean = cfg["baseline"] + cfg["diurnal_amplitude"] * math.sin(phase - math.pi / 2)
                emit(kind, sample_t, clean + rnd.gauss(0.0, cfg["noise_sigma"]))
            elif kind == "humidity":
                cfg = signals["humidity"]
                phase = 2 * math.pi * ((sample_t % 86_400_000) / 86_400_000)
                clean = cfg["baseline"] + cfg["diurnal_amplitude"] * math.sin(phase)
                emit(kind, sample_t, clean + rnd.gauss(0.0, cfg["noise_sigma"]))
            elif kind == "energy":
                cfg = signals["energy"]
                occ_avg = state.occupancy_ms_accum / period
                state.occupancy_ms_accum = 0.0
                hours = period / HOUR_MS
                clean = (cfg["base_kw"] + cfg["per_person_kw"] * occ_avg) * hours
                emit(kind, sample_t, max(0.0, clean + rnd.gauss(0.0, cfg["noise_sigma"])))
            elif kind == "presence":
                emit(kind, sample_t, float(occupancy_at(sample_t)))
        t = step_end
    return rows, injected


def _expected_firings(
    spec: dict, rows: list[dict], start: int, end: int
) -> tuple[list[dict], dict[str, list[int]]]:
    """Reference-evaluate every declared stream over the generated trace."""
    streams_out: list[dict] = []
    firings: dict[str, list[int]] = {}
    for stream in spec.get("streams", []):
        kind = stream["sensor"]
        space = next(s for s in spec["spaces"] if s["id"] == stream["space_id"])
        sensor_id = space["sensors"][kind]["id"]
        attribute = KIND_ATTRIBUTE[kind]
        lo, hi = DEFAULT_PLAUSIBLE_RANGES.get(attribute, (-1e12, 1e12))
        policy = {**DEFAULT_POLICY, "lo": lo, "hi": hi, **stream.get("policy", {})}
        trace = [
            (r["observed_at"], r["value"]) for r in rows
            if r["sensor_id"] == sensor_id and r["attribute"] == attribute
        ]
        flags = reference_accept_flags(
            [v for _, v in trace],
            lo=policy["lo"],
            hi=policy["hi"],
            window_size=policy["window_size"],
            zscore_threshold=policy["zscore_threshold"],
            mad_epsilon=policy.get("mad_epsilon", 3.0 * policy["resolution"]),
        )
        cleaned = [tv for tv, ok in zip(trace, flags) if ok]
        ticks = reference_ticks(
            cleaned,
            start_ms=start,
            end_ms=end,
            frequency_ms=int(stream["frequency_ms"]),
            measurement_type=stream.get("measurement_type", "LastValue"),
        )
        condition = stream.get("condition")
        key = f"{sensor_id}:{attribute}:{stream['frequency_ms']}"
        expected: list[int] = []
        if condition:
            expected = reference_firings(
                ticks,
                comparator=condition["comparator"],
                threshold=float(condition["threshold"]),
                trigger=condition.get("trigger", "Level"),
                cooldown_ms=int(condition.get("cooldown_ms", stream["frequency_ms"])),
            )
        firings[key] = expected
        streams_out.append({
            "key": key,
            "sensor_id": sensor_id,
            "attribute": attribute,
            "frequency_ms": int(stream["frequency_ms"]),
            "measurement_type": stream.get("measurement_type", "LastValue"),
            "policy": policy,
            "condition": condition,
            "space_id": stream["space_id"],
        })
    return streams_out, firings


# -- replay ---------------------------------------------------------------------


def replay(
    bundle_dir: str | Path,
    url: str,
    speed: float | str = "max",
    token: str = "change-me",
    *,
    client: Optional[httpx.Client] = None,
    batch_size: int = 200,
    advance_end: bool = True,
    feedback: bool = False,
    max_retries: int = 3,
) -> dict:
    """POST a bundle's entities and trace to a platform in timestamp order.

    Returns a run report; ``partial`` is set when the platform became
    unreachable after bounded retries.
    """
    bundle = Path(bundle_dir)
    entities = json.loads((bundle / "entities.json").read_text(encoding="utf-8"))
    ground = json.loads((bundle / "ground_truth.json").read_text(encoding="utf-8"))
    rows = []
    with open(bundle / "trace.jsonl", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(json.loads(line))

    own_client = client is None
    http = client or httpx.Client(timeout=10.0)
    headers = {"Authorization": f"Bearer {token}"}
    report: dict = {
        "sent": 0, "acked": 0, "accepted": 0, "dropped": 0, "errors": 0,
        "per_sensor": {}, "items": [], "partial": False, "detail": "",
    }
    started = time.monotonic()

    def post(path: str, payload: dict, extra_headers: Optional[dict] = None) -> Optional[httpx.Response]:
        delay = 0.2
        for attempt in range(max_retries):
            try:
                response = http.post(url.rstrip("/") + path, json=payload,
                                     headers={**headers, **(extra_headers or {})})
                if response.status_code < 500:
                    return response
            except httpx.HTTPError:
                pass
            if attempt < max_retries - 1:
                time.sleep(delay)
                delay *= 2
        return None

    try:
        for entity in entities:
            response = post("/v1/entities", entity)
            if response is None:
                report["partial"] = True
                report["detail"] = "platform unreachable during entity registration"
                return report

        speed_value = math.inf if speed in ("max", "inf") else float(speed)
        last_ts: Optional[int] = None
        for i in range(0, len(rows), batch_size):
            batch = rows[i:i + batch_size]
            if speed_value != math.inf and last_ts is not None:
                gap_ms = batch[0]["observed_at"] - last_ts
                if gap_ms > 0:
                    time.sleep(gap_ms / 1000.0 / speed_value)
            last_ts = batch[-1]["observed_at"]
            report["sent"] += len(batch)
            response = post("/v1/ingest", {"measurements": batch},
                            {"Idempotency-Key": f"replay-{bundle.name}-{i}"})
            if response is None or response.status_code >= 400:
                report["partial"] = True
                report["detail"] = f"ingest failed at batch offset {i}"
                return report
            payload = response.json()
            report["accepted"] += payload["accepted"]
            report["dropped"] += payload["dropped"]
            report["errors"] += payload["errors"]
            report["acked"] += payload["accepted"] + payload["dropped"]
            for item in payload["items"]:
                report["items"].append(item)
                sid = item.get("sensor_id")
                if sid and item["status"] in ("accepted", "dropped-outlier"):
                    report["per_sensor"][sid] = report["per_sensor"].get(sid, 0) + 1

        if advance_end:
            response = post("/v1/clock/advance", {"to_ms": ground["end_ms"]})
            if response is None:
                report["partial"] = True
                report["detail"] = "clock advance failed"
                return report

        if feedback:
            _scripted_feedback(http, url, headers, ground)
        return report
    finally:
        report["wall_seconds"] = round(time.monotonic() - started, 3)
        if own_client:
            http.close()


def _scripted_feedback(http: httpx.Client, url: str, headers: dict, ground: dict) -> None:
    rnd = random.Random(ground["seed"] + 1)
    for user in ground.get("users", []):
        accept_prob = float(user.get("feedback", {}).get("accept_prob", 0.0))
        if accept_prob <= 0:
            continue
        response = http.get(
            url.rstrip("/") + f"/v1/users/{user['user_id']}/recommendations",
            headers=headers,
        )
        if response.status_code != 200:
            continue
        for rec in response.json():
            if rec["state"] != "Delivered":
                continue
            body = {"response": "Accept" if rnd.random() < accept_prob else "Reject"}
            http.post(
                url.rstrip("/") + f"/v1/recommendations/{rec['id']}/feedback",
                json=body, headers=headers,
            )


# -- CLI --------------------------------------------------------------------------


@click.group()
def cli() -> None:
    """Synthetic sensor-fleet scenarios: generate bundles and replay them."""


@cli.command("generate")
@click.option("--spec", "spec_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
def cli_generate(spec_path: str, out_dir: str) -> None:
    try:
        spec = json.loads(Path(spec_path).read_text(encoding="utf-8"))
        ground = generate(spec, out_dir)
    except (InvalidScenarioError, json.JSONDecodeError, KeyError) as exc:
        click.echo(f"invalid scenario: {exc}", err=True)
        sys.exit(2)
    click.echo(json.dumps({
        "out": out_dir,
        "measurements": sum(ground["per_sensor_counts"].values()),
        "injected_outliers": len(ground["injected_outliers"]),
        "expected_firings": {k: len(v) for k, v in ground["expected_firings"].items()},
    }, indent=2))


@cli.command("replay")
@click.option("--bundle", "bundle_dir", required=True, type=click.Path(exists=True))
@click.option("--url", required=True)
@click.option("--speed", default="max", help="float multiplier or 'max'")
@click.option("--token", default="change-me")
@click.option("--feedback", is_flag=True, default=False)
def cli_replay(bundle_dir: str, url: str, speed: str, token: str, feedback: bool) -> None:
    try:
        speed_value: float | str = "max" if speed in ("max", "inf") else float(speed)
    except ValueError:
        click.echo(f"bad speed {speed!r}", err=True)
        sys.exit(2)
    report = replay(bundle_dir, url, speed_value, token, feedback=feedback)
    summary = {k: v for k, v in report.items() if k != "items"}
    click.echo(json.dumps(summary, indent=2, sort_keys=True))
    sys.exit(1 if report["partial"] or report["errors"] else 0)


if __name__ == "__main__":
    cli()
