"""Demo fixture: a small campaign with history, a CO2 rule, and live recs.

Seeds two offices, energy history giving a -20% week-over-week consumption
delta, an hourly CO2 stream whose threshold rule fires once, a validated
door-opening task, and a delivered message awaiting feedback. The admin
dashboard's contract tests (and anyone running the server with
``--seed-demo``) rely on this fixture.
"""

from __future__ import annotations

from .broker import AttributeValue
from .clock import DAY_MS, HOUR_MS, MINUTE_MS
from .platform import Platform
from .recommender import UserProfile

CO2_TEMPLATES = {
    "Humanitarian": (
        "The air quality can become better. Let's open the door for 2 minutes "
        "to freshen up and get closer to earning the Refresher Badge "
        "(after {N} times of action)"
    ),
    "Socialiser": (
        "The air quality is poor for all in the office. Open the door for 2 "
        "minutes to freshen the atmosphere and become the Fresh Air Challenge "
        "team leader for now"
    ),
    "FreeSpirit": (
        "The air quality is quite poor. Open the door for 2 minutes to freshen "
        "up and get closer to unlocking a new functionality "
        "({N} more actions remaining)"
    ),
    "Player": (
        "Air quality check: open the door for 2 minutes to bank points toward "
        "the Fresh Air leaderboard ({N} more actions remaining)"
    ),
}


def seed_demo(platform: Platform) -> dict:
    broker = platform.broker
    t0 = platform.clock.now_ms()

    def att(value, unit="", at=t0, quality="Raw"):
        return AttributeValue(value=value, unit=unit, observed_at=at, quality=quality)

    for space_id in ("office-12", "office-9"):
        broker.upsert_entity(space_id, "Room", {})
    broker.upsert_entity("co2-office-12", "SensorNode", {
        "located_in": att("office-12"),
        "reporting_period_ms": att(10 * MINUTE_MS),
    })
    broker.upsert_entity("door-office-12", "SensorNode", {
        "located_in": att("office-12"),
        "reporting_period_ms": att(DAY_MS),
    })
    for space_id in ("office-12", "office-9"):
        broker.upsert_entity(f"energy-{space_id}", "SensorNode", {
            "located_in": att(space_id),
            "reporting_period_ms": att(DAY_MS),
        })

    for profile in (
        UserProfile(
            user_id="u-amelia", gamer_type="Humanitarian",
            asserted_groups={"Humanitarian"}, activity_locations={"office-12"},
        ),
        UserProfile(
            user_id="u-bruno", gamer_type="Socialiser",
            asserted_groups={"Socialiser"}, activity_locations={"office-12"},
        ),
        UserProfile(
            user_id="u-carol", gamer_type="Humanitarian",
            asserted_groups={"Humanitarian"}, activity_locations={"office-9"},
        ),
    ):
        platform.recommender.upsert_profile(profile)

    campaign = platform.create_campaign({
        "name": "Fresh Air",
        "space_ids": ["office-12", "office-9"],
        "user_ids": ["u-amelia", "u-bruno", "u-carol"],
        "start_ms": t0,
        "end_ms": t0 + 28 * DAY_MS,
        "period_ms": 7 * DAY_MS,
    })
    platform.activate_campaign(campaign.id)

    # energy history: 125 kWh last week, 100 kWh this week -> -20% delta at t0+14d
    history = []
    for day, value in [(0, 25.0), (1, 25.0), (2, 25.0), (3, 25.0), (4, 25.0),
                       (7, 20.0), (8, 20.0), (9, 20.0), (10, 20.0), (11, 20.0)]:
        history.append({
            "sensor_id": "energy-office-12", "attribute": "energy",
            "value": value, "unit": "kWh",
            "observed_at": t0 + day * DAY_MS + 12 * HOUR_MS,
        })
    platform.ingest(history)

    platform.advance_clock(t0 + 13 * DAY_MS)
    stream = platform.processor.register_stream(
        "co2-office-12", "co2", HOUR_MS, "LastValue", campaign_id=campaign.id,
    )
    platform.processor.activate(stream)

    task_rule = platform.recommender.register_rule(
        stream_id=stream,
        comparator=">",
        threshold=1000.0,
        target_groups={"Humanitarian", "Socialiser"},
        kind="Task",
        templates=CO2_TEMPLATES,
        cooldown_ms=HOUR_MS,
        validation={
            "object_id": "door-office-12",
            "action_attribute": "open",
            "action_value": 1,
            "window_ms": 2 * HOUR_MS,
        },
        badge="refresher",
        preference_theme="Purpose",
        campaign_id=campaign.id,
    )
    message_rule = platform.recommender.register_rule(
        stream_id=stream,
        comparator=">",
        threshold=1000.0,
        target_groups={"Humanitarian", "Socialiser"},
        kind="Message",
        templates={
            "Humanitarian": "Indoor CO2 is high in office-12 right now. A short airing helps everyone focus.",
            "Socialiser": "Your office air needs a refresh. Rally the room for a two-minute break!",
            "default": "CO2 is above 1000 ppm in office-12; consider airing the room.",
        },
        cooldown_ms=HOUR_MS,
        campaign_id=campaign.id,
    )

    base = t0 + 13 * DAY_MS
    co2_trace = [
        (base + 10 * MINUTE_MS, 520.0),
        (base + 50 * MINUTE_MS, 840.0),
        (base + 70 * MINUTE_MS, 1080.0),
        (base + 110 * MINUTE_MS, 1120.0),  # hourly tick at +2h sees 1120 -> rule fires
        (base + 125 * MINUTE_MS, 1.0),     # door opens (separate sensor, see below)
        (base + 150 * MINUTE_MS, 930.0),
        (base + 170 * MINUTE_MS, 880.0),   # tick at +3h sees 880 -> effect evidence
    ]
    measurements = []
    for at, value in co2_trace:
        if value == 1.0:
            measurements.append({
                "sensor_id": "door-office-12", "attribute": "open",
                "value": 1.0, "unit": "", "observed_at": at,
            })
        else:
            measurements.append({
                "sensor_id": "co2-office-12", "attribute": "co2",
                "value": value, "unit": "ppm", "observed_at": at,
            })
    platform.ingest(measurements)
    platform.advance_clock(base + 6 * HOUR_MS)

    return {
        "campaign_id": campaign.id,
        "stream_id": stream,
        "task_rule_id": task_rule.id,
        "message_rule_id": message_rule.id,
    }
