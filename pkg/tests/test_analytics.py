from __future__ import annotations

import itertools
import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wattwise.analytics import (
    Analytics,
    AnalysisTemplate,
    QueryAst,
    kmeans,
    kmeans_best,
    parse_query,
)
from wattwise.broker import ContextBroker
from wattwise.clock import MINUTE_MS, SimulatedClock
from wattwise.errors import (
    InvalidConfigError,
    KTooLargeError,
    MalformedTreeError,
    UnknownFieldError,
)
from wattwise.fusion import FusionStore
from wattwise.recommender import Recommender, UserProfile
from wattwise.streams import StreamProcessor
from wattwise.timeseries import Measurement, TimeseriesStore

from conftest import att


def brute_force_min_inertia(points: list[list[float]]) -> float:
    """Exhaustive optimum over all 2-partitions (both sides non-empty)."""
    n = len(points)
    best = math.inf
    for mask in range(1, 2 ** (n - 1)):  # fix point 0 in side A to halve the space
        side_a = [points[i] for i in range(n) if not (mask >> i) & 1]
        side_b = [points[i] for i in range(n) if (mask >> i) & 1]
        if not side_a or not side_b:
            continue
        total = 0.0
        for side in (side_a, side_b):
            dim = len(side[0])
            centroid = [sum(p[d] for p in side) / len(side) for d in range(dim)]
            total += sum(sum((p[d] - centroid[d]) ** 2 for d in range(dim)) for p in side)
        best = min(best, total)
    return best


@pytest.fixture
def rig():
    clock = SimulatedClock(0)
    broker = ContextBroker(clock)
    store = TimeseriesStore()
    processor = StreamProcessor(clock, broker, store)
    fusion = FusionStore()
    recommender = Recommender(clock, broker, processor, fusion)
    analytics = Analytics(clock, store, recommender, fusion)
    return clock, broker, store, recommender, analytics


def seed_users(recommender):
    for user_id, gamer_type, space in [
        ("u1", "Humanitarian", "office-12"),
        ("u2", "Socialiser", "office-12"),
        ("u3", "Humanitarian", "office-9"),
    ]:
        recommender.upsert_profile(UserProfile(
            user_id=user_id, gamer_type=gamer_type,
            asserted_groups={gamer_type}, activity_locations={space},
        ))


# -- queries ----------------------------------------------------------------


def test_user_query_scan_oracle(rig):
    _, _, _, recommender, analytics = rig
    seed_users(recommender)
    ast = parse_query({
        "target": "Users",
        "predicate": {"op": "and", "items": [
            {"field": "gamer_type", "op": "=", "value": "Humanitarian"},
            {"field": "activity_location", "op": "=", "value": "office-12"},
        ]},
    })
    assert analytics.execute_query(ast) == ["u1"]


def test_empty_predicate_returns_all_users(rig):
    _, _, _, recommender, analytics = rig
    seed_users(recommender)
    assert analytics.execute_query(parse_query({"target": "Users"})) == ["u1", "u2", "u3"]


def test_series_query_passthrough_equals_raw(rig):
    _, _, store, _, analytics = rig
    for i in range(50):
        store.append(Measurement("co2-office-12", "co2", 400.0 + i, "ppm", i * MINUTE_MS))
    ast = parse_query({
        "target": "Series",
        "predicate": {"field": "sensor_id", "op": "=", "value": "co2-office-12"},
        "time_range": [0, 20 * MINUTE_MS],
        "projection": ["timestamp", "value"],
    })
    rows = analytics.execute_query(ast)
    from wattwise.timeseries import SeriesQuery
    raw = store.query_raw(SeriesQuery("co2-office-12", "co2", 0, 20 * MINUTE_MS))
    assert rows == [{"timestamp": m.observed_at, "value": m.value} for m in raw]


def test_canonical_roundtrip_identity():
    obj = {
        "target": "Users",
        "predicate": {"op": "or", "items": [
            {"field": "gamer_type", "op": "=", "value": "Player"},
            {"op": "and", "items": [
                {"field": "preference", "op": "=", "value": "Reward"},
                {"field": "activity_location", "op": "=", "value": "lab-1"},
            ]},
        ]},
        "time_range": None,
        "projection": [],
    }
    ast = parse_query(obj)
    assert parse_query(ast.serialize()).serialize() == ast.serialize()


def test_depth_limit_enforced():
    node = {"field": "gamer_type", "op": "=", "value": "Player"}
    for _ in range(20):
        node = {"op": "and", "items": [node]}
    with pytest.raises(MalformedTreeError):
        parse_query({"target": "Users", "predicate": node})


def test_unknown_field_rejected():
    with pytest.raises(UnknownFieldError):
        parse_query({"target": "Users", "predicate": {"field": "shoe_size", "op": "=", "value": 42}})


def test_random_user_queries_match_scan(rig):
    _, _, _, recommender, analytics = rig
    rnd = random.Random(4)
    groups = ["Humanitarian", "Socialiser", "FreeSpirit", "Player"]
    spaces = ["a", "b", "c"]
    profiles = []
    for i in range(30):
        p = UserProfile(
            user_id=f"user-{i:02d}",
            gamer_type=rnd.choice(groups),
            asserted_groups=set(rnd.sample(groups, rnd.randrange(0, 3))),
            activity_locations=set(rnd.sample(spaces, rnd.randrange(0, 3))),
        )
        profiles.append(p)
        recommender.upsert_profile(p)
    for _ in range(25):
        g = rnd.choice(groups)
        s = rnd.choice(spaces)
        ast = parse_query({
            "target": "Users",
            "predicate": {"op": "or", "items": [
                {"field": "gamer_type", "op": "=", "value": g},
                {"field": "activity_location", "op": "=", "value": s},
            ]},
        })
        got = analytics.execute_query(ast)
        expected = sorted(
            p.user_id for p in profiles
            if p.gamer_type == g or s in p.activity_locations
        )
        assert got == expected


# -- templates ------------------------------------------------------------------


def test_summary_stats_basics(rig):
    _, _, store, _, analytics = rig
    for i, value in enumerate([1.0, 2.0, 3.0, 4.0]):
        store.append(Measurement("m", "energy", value, "kWh", i))
    result = analytics.run_template("summary-stats")
    assert result.result["count"] == 4
    assert result.result["mean"] == pytest.approx(2.5)
    assert result.result["min"] == 1.0
    assert result.result["max"] == 4.0


def test_kmeans_template_k_exceeds_points(rig):
    _, _, store, recommender, analytics = rig
    seed_users(recommender)
    with pytest.raises(KTooLargeError):
        analytics.run_template("user-clusters", {"k": 10})


def test_template_determinism_under_seed(rig):
    _, _, store, recommender, analytics = rig
    seed_users(recommender)
    a = analytics.run_template("user-clusters", {"k": 2}, seed=7)
    b = analytics.run_template("user-clusters", {"k": 2}, seed=7)
    assert a.result == b.result


def test_invalid_config_rejected(rig):
    _, _, _, _, analytics = rig
    with pytest.raises(InvalidConfigError):
        analytics.run_template("user-clusters", {"bogus_option": 1})
    with pytest.raises(InvalidConfigError):
        analytics.run_template("user-clusters", {"k": "two"})


def test_effect_comparison_classification(rig):
    _, _, store, _, analytics = rig
    for i in range(10):
        store.append(Measurement("m", "energy", 25.0, "kWh", i))
    for i in range(10, 20):
        store.append(Measurement("m", "energy", 20.0, "kWh", i))
    result = analytics.run_template("summary-stats", {"compare_split_at": 10})
    comparison = result.result["comparison"]
    assert comparison["delta_pct"] == pytest.approx(-20.0)
    assert comparison["effect"] == "positive"


def test_analysis_persisted_as_document(rig):
    _, _, store, _, analytics = rig
    store.append(Measurement("m", "energy", 1.0, "kWh", 0))
    result = analytics.run_template("summary-stats")
    docs = analytics._fusion.find_documents(class_term="entropy:AnalysisResult")
    assert any(result.id in d.id for d in docs)


# -- kmeans ------------------------------------------------------------------------


def test_kmeans_well_separated_pairs():
    points = [(0.0, 0.0), (0.0, 1.0), (10.0, 10.0), (10.0, 11.0)]
    result = kmeans(points, 2, seed=0)
    assert result.assignments[0] == result.assignments[1]
    assert result.assignments[2] == result.assignments[3]
    assert result.assignments[0] != result.assignments[2]
    centroids = sorted(tuple(c) for c in result.centroids)
    assert centroids[0] == pytest.approx((0.0, 0.5))
    assert centroids[1] == pytest.approx((10.0, 10.5))


def test_kmeans_k1_is_mean_and_total_variance():
    points = [(1.0,), (3.0,), (5.0,), (7.0,)]
    result = kmeans(points, 1, seed=3)
    assert result.centroids[0][0] == pytest.approx(4.0)
    expected_inertia = sum((p[0] - 4.0) ** 2 for p in points)
    assert result.inertia == pytest.approx(expected_inertia)


def test_kmeans_inertia_non_increasing():
    rnd = random.Random(17)
    points = [(rnd.uniform(0, 10), rnd.uniform(0, 10)) for _ in range(40)]
    result = kmeans(points, 3, seed=5)
    history = result.inertia_history
    for a, b in zip(history, history[1:]):
        assert b <= a + 1e-9


def test_kmeans_matches_brute_force_on_8_points():
    rnd = random.Random(24)
    points = [[rnd.uniform(0, 10), rnd.uniform(0, 10)] for _ in range(8)]
    best = kmeans_best(points, 2, seed=0, restarts=10)
    assert best.inertia == pytest.approx(brute_force_min_inertia(points), rel=1e-9)


def test_kmeans_nearest_centroid_invariant():
    rnd = random.Random(2)
    points = [[rnd.uniform(0, 5), rnd.uniform(0, 5)] for _ in range(25)]
    result = kmeans(points, 4, seed=1)
    for i, p in enumerate(points):
        distances = [
            sum((a - b) ** 2 for a, b in zip(p, c)) for c in result.centroids
        ]
        best = min(range(len(distances)), key=lambda j: (distances[j], j))
        assert distances[result.assignments[i]] == pytest.approx(distances[best])


@settings(max_examples=25, deadline=None)
@given(
    shift=st.tuples(st.floats(-50, 50), st.floats(-50, 50)),
    seed=st.integers(min_value=0, max_value=10),
)
def test_kmeans_translation_invariance(shift, seed):
    rnd = random.Random(31)
    points = [(rnd.uniform(0, 10), rnd.uniform(0, 10)) for _ in range(12)]
    moved = [(x + shift[0], y + shift[1]) for x, y in points]
    a = kmeans(points, 2, seed=seed)
    b = kmeans(moved, 2, seed=seed)
    assert a.assignments == b.assignments
    for ca, cb in zip(a.centroids, b.centroids):
        assert cb[0] == pytest.approx(ca[0] + shift[0], abs=1e-6)
        assert cb[1] == pytest.approx(ca[1] + shift[1], abs=1e-6)


def test_kmeans_errors():
    with pytest.raises(KTooLargeError):
        kmeans([(0.0, 0.0)], 2)
    from wattwise.errors import DimensionMismatchError
    with pytest.raises(DimensionMismatchError):
        kmeans([(0.0, 0.0), (1.0,)], 1)


# -- behavioural features ------------------------------------------------------------


def test_behavioural_feature_rates():
    from wattwise.clock import HOUR_MS
    from test_recommender import Rig, TEMPLATES  # reuse the firing rig

    rig = Rig()
    rig.recommender.upsert_profile(UserProfile(
        user_id="u1", gamer_type="Humanitarian",
        asserted_groups={"Humanitarian"}, activity_locations={"office-12"},
    ))
    # four deliveries over four firings
    rig.co2_rule(kind="Message", validation=None, per_user_cooldown_ms=0, cooldown_ms=0,
                 target_groups={"Humanitarian"})
    for i in range(4):
        at = (i + 1) * 10 * MINUTE_MS
        rig.ingest(1100.0 + i, at - MINUTE_MS)
        rig.advance(at)
    recs = [r for r in rig.recommender.recommendations()]
    assert len(recs) == 4
    for rec in recs[:2]:
        rig.recommender.record_feedback(rec.id, "Accept")
    analytics = Analytics(rig.clock, rig.store, rig.recommender, rig.fusion)
    received, acceptance, validation, latency, delta = analytics.behavioural_features(
        "u1", (0, 2 * HOUR_MS))
    assert received == 4.0
    assert acceptance == pytest.approx(0.5)
    assert validation == 0.0  # no tasks in this run
    assert delta == 0.0


def test_behavioural_feature_validation_rate_from_event_log():
    from wattwise.clock import HOUR_MS
    from test_recommender import Rig

    rig = Rig()
    rig.recommender.upsert_profile(UserProfile(
        user_id="u1", gamer_type="Humanitarian",
        asserted_groups={"Humanitarian"}, activity_locations={"office-12"},
    ))
    rig.co2_rule(per_user_cooldown_ms=0, cooldown_ms=0, target_groups={"Humanitarian"})
    rig.co2_rule(kind="Message", validation=None, per_user_cooldown_ms=0, cooldown_ms=0,
                 target_groups={"Humanitarian"})
    # firing 1 at 10 min (task1 + msg1), effect tick at 20 min, firing 2 at 30 min
    rig.ingest(1050.0, 9 * MINUTE_MS)
    rig.advance(10 * MINUTE_MS)
    rig.door_open(12 * MINUTE_MS)
    rig.ingest(900.0, 18 * MINUTE_MS)
    rig.advance(20 * MINUTE_MS)
    rig.ingest(1100.0, 28 * MINUTE_MS)
    rig.advance(30 * MINUTE_MS)
    rig.ingest(800.0, 38 * MINUTE_MS)  # below threshold before the 40 min tick
    recs = rig.recommender.recommendations()
    tasks = [r for r in recs if r.kind == "Task"]
    messages = [r for r in recs if r.kind == "Message"]
    assert len(tasks) == 2 and len(messages) == 2
    task1 = min(tasks, key=lambda r: r.created_at)
    assert rig.recommender.validate_task(task1.id, 25 * MINUTE_MS) == "Validated"
    rig.recommender.record_feedback(messages[0].id, "Accept")
    rig.advance(2 * HOUR_MS)
    rig.recommender.sweep(2 * HOUR_MS)  # task2 fails at window expiry
    analytics = Analytics(rig.clock, rig.store, rig.recommender, rig.fusion)
    received, acceptance, validation, _, _ = analytics.behavioural_features(
        "u1", (0, 3 * HOUR_MS))
    # 4 delivered / 2 accepted (1 message + 1 validated task) / 1 validated of 2 tasks
    assert received == 4.0
    assert acceptance == pytest.approx(0.5)
    assert validation == pytest.approx(0.5)


def test_behavioural_features_neutral_defaults(rig):
    _, _, _, recommender, analytics = rig
    seed_users(recommender)
    received, acceptance, validation, latency, delta = analytics.behavioural_features(
        "u1", (0, 1000))
    assert (received, acceptance, validation) == (0.0, 0.0, 0.0)
    assert latency == 1000.0
    assert delta == 0.0


def test_identical_logs_identical_vectors(rig):
    _, _, _, recommender, analytics = rig
    seed_users(recommender)
    a = analytics.behavioural_features("u1", (0, 1000))
    b = analytics.behavioural_features("u3", (0, 1000))
    assert a == b
