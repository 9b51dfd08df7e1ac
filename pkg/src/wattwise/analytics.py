"""Analytics: query builder, analysis templates, and clustering.

The query AST is a small AND/OR predicate tree over declared fields, with a
canonical JSON form (sorted keys, explicit nodes) so ``serialize . parse``
is the identity. Analysis templates pair an algorithm (KMeans or
SummaryStats) with a config schema and an input query; runs are
deterministic under a fixed seed and persist their result as a semantic
document.

k-means uses k-means++ seeding from an explicitly seeded RNG and plain
Lloyd iterations; no library clustering is involved so the brute-force
partition oracle in the tests genuinely checks an independent path.
"""

from __future__ import annotations

import itertools
import json
import math
import random
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Sequence

import numpy as np

from .clock import Clock
from .errors import (
    DimensionMismatchError,
    InvalidConfigError,
    InvalidRangeError,
    KTooLargeError,
    MalformedTreeError,
    UnknownAnalysisError,
    UnknownFieldError,
    UnknownTemplateError,
    UnknownUserError,
)
from .fusion import FusionStore
from .recommender import Recommender
from .timeseries import TimeseriesStore

MAX_TREE_DEPTH = 16

USER_FIELDS = frozenset({
    "user_id", "gamer_type", "preference", "group", "activity_location",
    "age_band", "role",
})
SERIES_FIELDS = frozenset({"sensor_id", "attribute", "value", "quality"})

_OPS: dict[str, Callable[[Any, Any], bool]] = {
    "=": lambda a, b: a == b,
    "!=": lambda a, b: a != b,
    ">": lambda a, b: a > b,
    ">=": lambda a, b: a >= b,
    "<": lambda a, b: a < b,
    "<=": lambda a, b: a <= b,
}


@dataclass(frozen=True)
class Leaf:
    field: str
    op: str
    value: Any

    def to_obj(self) -> dict:
        return {"field": self.field, "op": self.op, "value": self.value}


@dataclass(frozen=True)
class Node:
    op: str  # "and" | "or"
    items: tuple["Leaf | Node", ...]

    def to_obj(self) -> dict:
        return {"op": self.op, "items": [i.to_obj() for i in self.items]}


Predicate = Leaf | Node


@dataclass(frozen=True)
class QueryAst:
    target: str  # "Users" | "Series"
    predicate: Optional[Predicate] = None
    time_range: Optional[tuple[int, int]] = None
    projection: tuple[str, ...] = ()

    def to_obj(self) -> dict:
        return {
            "target": self.target,
            "predicate": self.predicate.to_obj() if self.predicate else None,
            "time_range": list(self.time_range) if self.time_range else None,
            "projection": list(self.projection),
        }

    def serialize(self) -> str:
        return json.dumps(self.to_obj(), sort_keys=True, separators=(",", ":"))


def parse_query(obj: dict | str) -> QueryAst:
    """Parse and validate the canonical query JSON."""
    if isinstance(obj, str):
        try:
            obj = json.loads(obj)
        except json.JSONDecodeError as exc:
            raise MalformedTreeError(f"not JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise MalformedTreeError("query must be an object")
    target = obj.get("target")
    if target not in ("Users", "Series"):
        raise MalformedTreeError(f"unknown target {target!r}")
    fields = USER_FIELDS if target == "Users" else SERIES_FIELDS
    predicate = None
    if obj.get("predicate") is not None:
        predicate = _parse_predicate(obj["predicate"], fields, depth=1)
    time_range = None
    if obj.get("time_range") is not None:
        raw = obj["time_range"]
        if not (isinstance(raw, (list, tuple)) and len(raw) == 2):
            raise MalformedTreeError("time_range must be [t0, t1]")
        time_range = (int(raw[0]), int(raw[1]))
        if time_range[0] >= time_range[1]:
            raise InvalidRangeError("time_range needs t0 < t1")
    projection = tuple(obj.get("projection") or ())
    return QueryAst(target=target, predicate=predicate, time_range=time_range, projection=projection)


def _parse_predicate(obj: dict, fields: frozenset[str], depth: int) -> Predicate:
    if depth > MAX_TREE_DEPTH:
        raise MalformedTreeError(f"predicate tree deeper than {MAX_TREE_DEPTH}")
    if not isinstance(obj, dict):
        raise MalformedTreeError("predicate nodes must be objects")
    if "field" in obj:
        op = obj.get("op")
        if op not in _OPS:
            raise MalformedTreeError(f"unknown comparator {op!r}")
        if obj["field"] not in fields:
            raise UnknownFieldError(f"field {obj['field']!r} is not declared")
        return Leaf(field=obj["field"], op=op, value=obj.get("value"))
    if obj.get("op") in ("and", "or"):
        items = obj.get("items")
        if not isinstance(items, list) or not items:
            raise MalformedTreeError("and/or nodes need a non-empty items list")
        return Node(
            op=obj["op"],
            items=tuple(_parse_predicate(i, fields, depth + 1) for i in items),
        )
    raise MalformedTreeError(f"cannot parse predicate node {obj!r}")


def _eval_predicate(predicate: Optional[Predicate], getter: Callable[[str], Any]) -> bool:
    if predicate is None:
        return True
    if isinstance(predicate, Leaf):
        actual = getter(predicate.field)
        compare = _OPS[predicate.op]
        try:
            if isinstance(actual, (set, frozenset, list, tuple)):
                # set-valued fields: "=" means contains
                if predicate.op == "=":
                    return predicate.value in actual
                if predicate.op == "!=":
                    return predicate.value not in actual
                return False
            if actual is None:
                return False
            return compare(actual, predicate.value)
        except TypeError:
            return False
    results = (_eval_predicate(i, getter) for i in predicate.items)
    return all(results) if predicate.op == "and" else any(results)


@dataclass(frozen=True)
class ClusterResult:
    k: int
    assignments: dict[int, int]
    centroids: list[list[float]]
    inertia: float
    iterations: int
    seed: int
    inertia_history: tuple[float, ...] = ()

    def to_obj(self) -> dict:
        return {
            "k": self.k,
            "assignments": {str(i): c for i, c in sorted(self.assignments.items())},
            "centroids": [list(c) for c in self.centroids],
            "inertia": self.inertia,
            "iterations": self.iterations,
            "seed": self.seed,
        }


def kmeans(
    points: Sequence[Sequence[float]],
    k: int,
    seed: int = 0,
    max_iter: int = 100,
    tol: float = 1e-6,
) -> ClusterResult:
    """Lloyd iterations from deterministic k-means++ seeding."""
    if k < 1:
        raise KTooLargeError("k must be >= 1")
    n = len(points)
    if n == 0 or k > n:
        raise KTooLargeError(f"k={k} with only {n} points")
    dims = {len(p) for p in points}
    if len(dims) != 1:
        raise DimensionMismatchError(f"mixed point dimensions {sorted(dims)}")
    data = np.asarray(points, dtype=float)
    rng = random.Random(seed)

    centroids = _seed_plus_plus(data, k, rng)
    assignments = np.zeros(n, dtype=int)
    inertia_history: list[float] = []
    iterations = 0
    for iterations in range(1, max_iter + 1):
        dist2 = ((data[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_assign = dist2.argmin(axis=1)  # argmin takes the lowest index on ties
        inertia_history.append(float(dist2[np.arange(n), new_assign].sum()))
        assignments = new_assign
        new_centroids = centroids.copy()
        for c in range(k):
            members = data[assignments == c]
            if len(members):
                new_centroids[c] = members.mean(axis=0)
            else:
                # re-seed an empty cluster with the point farthest from its centroid
                far = int(dist2[np.arange(n), assignments].argmax())
                new_centroids[c] = data[far]
        shift = float(np.sqrt(((new_centroids - centroids) ** 2).sum(axis=1)).max())
        centroids = new_centroids
        if shift < tol:
            break
    dist2 = ((data[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    assignments = dist2.argmin(axis=1)
    inertia = float(dist2[np.arange(n), assignments].sum())
    inertia_history.append(inertia)
    return ClusterResult(
        k=k,
        assignments={i: int(c) for i, c in enumerate(assignments)},
        centroids=[list(map(float, c)) for c in centroids],
        inertia=inertia,
        iterations=iterations,
        seed=seed,
        inertia_history=tuple(inertia_history),
    )


def _seed_plus_plus(data: np.ndarray, k: int, rng: random.Random) -> np.ndarray:
    """Greedy k-means++: D^2-sample a few candidates per step, keep the one
    that minimizes the resulting potential."""
    n = len(data)
    candidates_per_step = 2 + int(math.log(k + 1)) + 1
    chosen = [rng.randrange(n)]
    d2 = ((data - data[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = float(d2.sum())
        if total <= 0:
            remaining = [i for i in range(n) if i not in chosen]
            pick = remaining[0] if remaining else chosen[0]
            chosen.append(pick)
            continue
        best_pick, best_potential, best_d2 = None, math.inf, None
        for _ in range(candidates_per_step):
            r = rng.random() * total
            acc = 0.0
            pick = n - 1
            for i, w in enumerate(d2):
                acc += float(w)
                if acc >= r:
                    pick = i
                    break
            cand_d2 = np.minimum(d2, ((data - data[pick]) ** 2).sum(axis=1))
            potential = float(cand_d2.sum())
            if potential < best_potential:
                best_pick, best_potential, best_d2 = pick, potential, cand_d2
        chosen.append(int(best_pick))
        d2 = best_d2
    return data[chosen].astype(float).copy()


def kmeans_best(
    points: Sequence[Sequence[float]],
    k: int,
    seed: int = 0,
    restarts: int = 10,
    max_iter: int = 100,
    tol: float = 1e-6,
) -> ClusterResult:
    """Best of ``restarts`` seeded runs (seeds seed..seed+restarts-1)."""
    best: Optional[ClusterResult] = None
    for i in range(restarts):
        result = kmeans(points, k, seed=seed + i, max_iter=max_iter, tol=tol)
        if best is None or result.inertia < best.inertia - 1e-12:
            best = result
    assert best is not None
    return best


def standardize(points: Sequence[Sequence[float]]) -> list[list[float]]:
    """Per-feature z-score over the input set; zero-variance features map to 0."""
    data = np.asarray(points, dtype=float)
    mean = data.mean(axis=0)
    std = data.std(axis=0)
    std[std == 0] = 1.0
    return [list(map(float, row)) for row in (data - mean) / std]


@dataclass(frozen=True)
class AnalysisTemplate:
    id: str
    algorithm: str  # "KMeans" | "SummaryStats"
    config_schema: dict[str, tuple[type, Any]]  # name -> (type, default)
    query: QueryAst

    def resolve_config(self, overrides: dict) -> dict:
        config = {name: default for name, (_, default) in self.config_schema.items()}
        for key, value in (overrides or {}).items():
            if key not in self.config_schema:
                raise InvalidConfigError(f"unknown config option {key!r}")
            expected, _ = self.config_schema[key]
            if expected is float and isinstance(value, int) and not isinstance(value, bool):
                value = float(value)
            if not isinstance(value, expected) or isinstance(value, bool) and expected is not bool:
                raise InvalidConfigError(
                    f"option {key!r} expects {expected.__name__}, got {type(value).__name__}"
                )
            config[key] = value
        return config


@dataclass
class AnalysisResult:
    id: str
    template_id: str
    algorithm: str
    config: dict
    result: dict
    created_at: int
    seed: int

    def to_obj(self) -> dict:
        return {
            "id": self.id,
            "template_id": self.template_id,
            "algorithm": self.algorithm,
            "config": self.config,
            "result": self.result,
            "created_at": self.created_at,
            "seed": self.seed,
        }


class Analytics:
    """Query execution + template runs over platform data snapshots."""

    def __init__(
        self,
        clock: Clock,
        store: TimeseriesStore,
        recommender: Recommender,
        fusion: FusionStore,
        *,
        consumption_fn: Optional[Callable[[str, int, int], Optional[float]]] = None,
    ):
        self._clock = clock
        self._store = store
        self._recommender = recommender
        self._fusion = fusion
        self._consumption_fn = consumption_fn
        self._templates: dict[str, AnalysisTemplate] = {}
        self._results: dict[str, AnalysisResult] = {}
        self._seq = itertools.count(1)
        self._lock = threading.RLock()
        self._register_builtin_templates()

    # -- queries ---------------------------------------------------------

    def execute_query(self, ast: QueryAst) -> list:
        if ast.target == "Users":
            out = []
            for profile in self._recommender.profiles():
                getter = self._user_getter(profile)
                if _eval_predicate(ast.predicate, getter):
                    out.append(profile.user_id)
            return sorted(out)
        rows = []
        for m in self._store.iter_rows():
            if ast.time_range is not None and not (
                ast.time_range[0] <= m.observed_at < ast.time_range[1]
            ):
                continue
            getter = {
                "sensor_id": m.sensor_id, "attribute": m.attribute,
                "value": m.value, "quality": m.quality,
            }.get
            if _eval_predicate(ast.predicate, getter):
                rows.append(self._project(m, ast.projection))
        return rows

    @staticmethod
    def _project(m, projection: tuple[str, ...]):
        full = {
            "sensor_id": m.sensor_id, "attribute": m.attribute,
            "timestamp": m.observed_at, "value": m.value, "quality": m.quality,
        }
        if not projection:
            return full
        return {k: full[k] for k in projection if k in full}

    @staticmethod
    def _user_getter(profile) -> Callable[[str], Any]:
        def getter(field_name: str) -> Any:
            if field_name == "user_id":
                return profile.user_id
            if field_name == "gamer_type":
                return profile.gamer_type
            if field_name == "preference":
                return profile.preferences
            if field_name == "group":
                return profile.groups()
            if field_name == "activity_location":
                return profile.activity_locations
            return profile.demographics.get(field_name)
        return getter

    # -- behavioural features ------------------------------------------------

    FEATURE_ORDER = (
        "recommendations_received",
        "acceptance_rate",
        "task_validation_rate",
        "mean_response_latency_ms",
        "consumption_delta",
    )

    def behavioural_features(self, user_id: str, period: tuple[int, int]) -> list[float]:
        """Fixed-order behavioural vector for one user over a period."""
        self._recommender.get_profile(user_id)  # raises unknown-user
        t0, t1 = period
        if t0 >= t1:
            raise InvalidRangeError("period needs t0 < t1")
        events = [
            e for e in self._recommender.engine_events()
            if e.user_id == user_id and t0 <= e.at < t1
        ]
        delivered = {e.recommendation_id: e.at for e in events if e.kind == "delivered"}
        accepted = {e.recommendation_id: e.at for e in events if e.kind in ("accepted", "validated")}
        recs = {r.id: r for r in self._recommender.recommendations()}
        delivered_tasks = [rid for rid in delivered if rid in recs and recs[rid].kind == "Task"]
        validated = [e.recommendation_id for e in events if e.kind == "validated"]
        received = len(delivered)
        acceptance_rate = len(accepted) / received if received else 0.0
        validation_rate = len(validated) / len(delivered_tasks) if delivered_tasks else 0.0
        latencies = [
            recs[rid].feedback_at - delivered[rid]
            for rid in delivered
            if rid in recs and recs[rid].feedback_at is not None
        ]
        mean_latency = (sum(latencies) / len(latencies)) if latencies else float(t1 - t0)
        delta = 0.0
        if self._consumption_fn is not None:
            span = t1 - t0
            current = self._consumption_fn(user_id, t0, t1)
            previous = self._consumption_fn(user_id, t0 - span, t0)
            if current is not None and previous not in (None, 0):
                delta = (current - previous) / previous
        return [float(received), acceptance_rate, validation_rate, float(mean_latency), delta]

    # -- templates ---------------------------------------------------------------

    def register_template(self, template: AnalysisTemplate) -> None:
        with self._lock:
            self._templates[template.id] = template

    def get_template(self, template_id: str) -> AnalysisTemplate:
        with self._lock:
            template = self._templates.get(template_id)
            if template is None:
                raise UnknownTemplateError(f"no template {template_id!r}")
            return template

    def templates(self) -> list[AnalysisTemplate]:
        with self._lock:
            return list(self._templates.values())

    def run_template(
        self,
        template_id: str,
        overrides: Optional[dict] = None,
        seed: int = 0,
        query: Optional[QueryAst] = None,
    ) -> AnalysisResult:
        """Run a template; ``query`` selects the input data when given."""
        template = self.get_template(template_id)
        config = template.resolve_config(overrides or {})
        effective = query if query is not None else template.query
        if template.algorithm == "SummaryStats":
            payload = self._run_summary(effective, config)
        elif template.algorithm == "KMeans":
            payload = self._run_kmeans(effective, config, seed)
        else:
            raise InvalidConfigError(f"unknown algorithm {template.algorithm!r}")
        with self._lock:
            result = AnalysisResult(
                id=f"analysis-{next(self._seq)}",
                template_id=template.id,
                algorithm=template.algorithm,
                config=config,
                result=payload,
                created_at=self._clock.now_ms(),
                seed=seed,
            )
            self._results[result.id] = result
        self._persist(result)
        return result

    def get_result(self, result_id: str) -> AnalysisResult:
        with self._lock:
            result = self._results.get(result_id)
            if result is None:
                raise UnknownAnalysisError(f"no analysis {result_id!r}")
            return result

    def _run_summary(self, query: QueryAst, config: dict) -> dict:
        rows = self.execute_query(query)
        values = [r["value"] for r in rows] if query.target == "Series" else []
        if not values:
            return {"count": 0}
        summary = {
            "count": len(values),
            "mean": math.fsum(values) / len(values),
            "min": min(values),
            "max": max(values),
            "sum": math.fsum(values),
        }
        split_at = config.get("compare_split_at", 0)
        if split_at:
            before = [r["value"] for r in rows if r["timestamp"] < split_at]
            after = [r["value"] for r in rows if r["timestamp"] >= split_at]
            if before and after:
                mean_before = math.fsum(before) / len(before)
                mean_after = math.fsum(after) / len(after)
                delta_pct = (
                    (mean_after - mean_before) / mean_before * 100.0 if mean_before else 0.0
                )
                # a drop in consumption of 2%+ counts as a positive effect
                if delta_pct <= -2.0:
                    effect = "positive"
                elif delta_pct >= 2.0:
                    effect = "negative"
                else:
                    effect = "neutral"
                summary["comparison"] = {
                    "mean_before": mean_before,
                    "mean_after": mean_after,
                    "delta_pct": delta_pct,
                    "effect": effect,
                }
        return summary

    def _run_kmeans(self, query: QueryAst, config: dict, seed: int) -> dict:
        k = int(config.get("k", 2))
        if query.target == "Users":
            user_ids = self.execute_query(query)
            period = query.time_range or (0, self._clock.now_ms() or 1)
            points = [self.behavioural_features(u, period) for u in user_ids]
            labels = user_ids
        else:
            rows = self.execute_query(query)
            points = [[r["value"]] for r in rows]
            labels = [f"{r['sensor_id']}:{r['timestamp']}" for r in rows]
        if not points:
            raise KTooLargeError("no input points for clustering")
        prepared = standardize(points) if config.get("standardize", True) else [list(map(float, p)) for p in points]
        result = kmeans_best(prepared, k, seed=seed, restarts=int(config.get("restarts", 10)))
        return {
            "k": result.k,
            "inertia": result.inertia,
            "iterations": result.iterations,
            "seed": result.seed,
            "assignments": {labels[i]: c for i, c in result.assignments.items()},
            "centroids": result.centroids,
        }

    def _persist(self, result: AnalysisResult) -> None:
        doc = self._fusion.enrich("AnalysisResult", {
            "id": result.id,
            "algorithm": result.algorithm,
            "config": result.config,
            "result": result.result,
            "created_at": result.created_at,
        })
        self._fusion.store_document(doc)

    def _register_builtin_templates(self) -> None:
        self.register_template(AnalysisTemplate(
            id="summary-stats",
            algorithm="SummaryStats",
            config_schema={"compare_split_at": (int, 0)},
            query=QueryAst(target="Series"),
        ))
        self.register_template(AnalysisTemplate(
            id="user-clusters",
            algorithm="KMeans",
            config_schema={"k": (int, 2), "standardize": (bool, True), "restarts": (int, 10)},
            query=QueryAst(target="Users"),
        ))
