"""Condition-action recommendation engine.

When a stream condition fires, a rule selects target users (group match +
activity in the bound building space), renders intervention content per the
user's gamer type, and tracks each recommendation through its lifecycle:

    Pending -> Delivered -> Accepted | Rejected | Validated | Failed | Expired

Tasks are validated against the infrastructure: the involved object must
show the expected action signal (e.g. a door opening) *and* the stream
metric must show the expected effect inside the validation window. Messages
and quizzes accept user feedback without validation.

Accepted feedback also feeds back into profiles: enough accepted
recommendations on one preference theme materialize a preference assertion,
which can unlock new inferred group memberships.
"""

from __future__ import annotations

import itertools
import logging
import threading
from dataclasses import dataclass, field, replace
from typing import Any, Optional

from .broker import ContextBroker, Notification
from .clock import Clock
from .errors import (
    InvalidRuleError,
    MissingTemplateError,
    NoMatchingTemplateError,
    NoValidationSpecError,
    UnknownRecommendationError,
    UnknownStreamError,
    UnknownUserError,
    WrongStateError,
)
from .fusion import FusionStore
from .reasoning import GAMER_TYPES, GroupDefinition, default_gamer_type_definitions, infer_groups
from .streams import ConditionSpec, StreamEvent, StreamProcessor

logger = logging.getLogger(__name__)

SINK_NAME = "recommender"

REC_KINDS = ("Task", "Message", "Quiz")

# legal lifecycle transitions
_TRANSITIONS = {
    "Pending": {"Delivered", "Expired"},
    "Delivered": {"Accepted", "Rejected", "Validated", "Failed", "Expired"},
}

TERMINAL_STATES = ("Accepted", "Rejected", "Validated", "Failed", "Expired")

DEFAULT_GAMER_PRECEDENCE = ("Player", "Socialiser", "Humanitarian", "FreeSpirit")

SPACE_TYPES = ("Room", "Building", "BuildingSpace")


@dataclass
class UserProfile:
    user_id: str
    demographics: dict[str, Any] = field(default_factory=dict)
    preferences: set[str] = field(default_factory=set)
    asserted_groups: set[str] = field(default_factory=set)
    inferred_groups: set[str] = field(default_factory=set)
    gamer_type: Optional[str] = None
    activity_locations: set[str] = field(default_factory=set)
    action_counters: dict[str, int] = field(default_factory=dict)
    webhook_url: Optional[str] = None

    def groups(self) -> set[str]:
        return self.asserted_groups | self.inferred_groups

    def to_obj(self) -> dict:
        return {
            "user_id": self.user_id,
            "demographics": dict(self.demographics),
            "preferences": sorted(self.preferences),
            "asserted_groups": sorted(self.asserted_groups),
            "inferred_groups": sorted(self.inferred_groups),
            "gamer_type": self.gamer_type,
            "activity_locations": sorted(self.activity_locations),
            "action_counters": dict(self.action_counters),
        }


@dataclass(frozen=True)
class ValidationSpec:
    """What counts as 'the user did it and it worked' for a Task rule."""

    object_id: str
    action_attribute: str
    action_value: Any = True
    effect_threshold: Optional[float] = None  # default: the rule condition's threshold
    effect_drop_ratio: float = 0.10
    window_ms: int = 30 * 60 * 1000

    def to_obj(self) -> dict:
        return {
            "object_id": self.object_id,
            "action_attribute": self.action_attribute,
            "action_value": self.action_value,
            "effect_threshold": self.effect_threshold,
            "effect_drop_ratio": self.effect_drop_ratio,
            "window_ms": self.window_ms,
        }


@dataclass
class RecommendationRule:
    id: str
    condition_id: str
    stream_id: str
    space_id: str
    target_groups: set[str]
    kind: str
    templates: dict[str, str]
    validation: Optional[ValidationSpec] = None
    per_user_cooldown_ms: int = 3_600_000
    n_required: int = 5
    preference_theme: Optional[str] = None
    badge: Optional[str] = None
    expiry_ms: int = 24 * 3_600_000
    campaign_id: Optional[str] = None

    def counter_key(self) -> str:
        return self.badge or self.id

    def to_obj(self) -> dict:
        return {
            "id": self.id,
            "condition_id": self.condition_id,
            "stream_id": self.stream_id,
            "space_id": self.space_id,
            "target_groups": sorted(self.target_groups),
            "kind": self.kind,
            "templates": dict(self.templates),
            "validation": self.validation.to_obj() if self.validation else None,
            "per_user_cooldown_ms": self.per_user_cooldown_ms,
            "n_required": self.n_required,
            "preference_theme": self.preference_theme,
            "badge": self.badge,
            "expiry_ms": self.expiry_ms,
            "campaign_id": self.campaign_id,
        }


@dataclass
class Recommendation:
    id: str
    rule_id: str
    user_id: str
    kind: str
    content: str
    state: str = "Pending"
    created_at: int = 0
    delivered_at: Optional[int] = None
    window_end: Optional[int] = None
    feedback: Optional[str] = None
    feedback_at: Optional[int] = None
    history: list[tuple[str, int]] = field(default_factory=list)

    def to_obj(self) -> dict:
        return {
            "id": self.id,
            "rule_id": self.rule_id,
            "user_id": self.user_id,
            "kind": self.kind,
            "content": self.content,
            "state": self.state,
            "created_at": self.created_at,
            "delivered_at": self.delivered_at,
            "window_end": self.window_end,
            "feedback": self.feedback,
            "feedback_at": self.feedback_at,
            "history": [list(h) for h in self.history],
        }


@dataclass(frozen=True)
class EngineEvent:
    """Recommendation lifecycle event, the raw material for analytics."""

    kind: str  # created | delivered | accepted | rejected | validated | failed | expired
    recommendation_id: str
    rule_id: str
    user_id: str
    at: int


class Recommender:
    def __init__(
        self,
        clock: Clock,
        broker: ContextBroker,
        processor: StreamProcessor,
        fusion: FusionStore,
        *,
        gamer_precedence: tuple[str, ...] = DEFAULT_GAMER_PRECEDENCE,
        preference_evidence_k: int = 3,
        default_validation_window_ms: int = 30 * 60 * 1000,
        auto_deliver: bool = True,
    ):
        self._clock = clock
        self._broker = broker
        self._processor = processor
        self._fusion = fusion
        self._gamer_precedence = gamer_precedence
        self._evidence_k = preference_evidence_k
        self._default_window_ms = default_validation_window_ms
        self._auto_deliver = auto_deliver
        self._profiles: dict[str, UserProfile] = {}
        self._groups: dict[str, GroupDefinition] = {}
        self._rules: dict[str, RecommendationRule] = {}
        self._rules_by_condition: dict[str, str] = {}
        self._recs: dict[str, Recommendation] = {}
        self._recs_by_user: dict[str, list[str]] = {}
        self._last_created: dict[tuple[str, str], int] = {}
        self._evidence: dict[tuple[str, str], int] = {}
        self._action_log: list[tuple[str, str, Any, int]] = []  # (entity, attribute, value, at)
        self._tick_history: dict[str, list[tuple[int, float]]] = {}
        self._events: list[EngineEvent] = []
        self._rec_seq = itertools.count(1)
        self._rule_seq = itertools.count(1)
        self._lock = threading.RLock()
        for definition in default_gamer_type_definitions():
            self._groups[definition.name] = definition
        broker.register_sink(SINK_NAME, self._on_notification)
        broker.subscribe(SINK_NAME)
        processor.on_event(self.on_stream_event)

    # -- profiles and groups -------------------------------------------------

    def upsert_profile(self, profile: UserProfile) -> UserProfile:
        with self._lock:
            self._reinfer(profile)
            self._profiles[profile.user_id] = profile
            out = profile
        self._store_profile_doc(out)
        return out

    def get_profile(self, user_id: str) -> UserProfile:
        with self._lock:
            profile = self._profiles.get(user_id)
            if profile is None:
                raise UnknownUserError(f"no profile for {user_id!r}")
            return profile

    def profiles(self) -> list[UserProfile]:
        with self._lock:
            return list(self._profiles.values())

    def register_group(self, definition: GroupDefinition) -> None:
        definition.expression.check_shape()
        with self._lock:
            self._groups[definition.name] = definition
            for profile in self._profiles.values():
                self._reinfer(profile)

    def group_definitions(self) -> list[GroupDefinition]:
        with self._lock:
            return list(self._groups.values())

    def infer_for(self, user_id: str) -> set[str]:
        with self._lock:
            profile = self.get_profile(user_id)
            return set(profile.inferred_groups)

    def _reinfer(self, profile: UserProfile) -> None:
        profile.inferred_groups = infer_groups(profile.preferences, self._groups.values())
        if profile.gamer_type is None:
            matched = profile.groups() & set(GAMER_TYPES)
            for candidate in self._gamer_precedence:
                if candidate in matched:
                    profile.gamer_type = candidate
                    break

    # -- rules ------------------------------------------------------------------

    def register_rule(
        self,
        *,
        stream_id: str,
        comparator: str,
        threshold: float,
        target_groups: set[str],
        kind: str,
        templates: dict[str, str],
        trigger: str = "Level",
        cooldown_ms: Optional[int] = None,
        validation: Optional[dict] = None,
        involved_object_id: Optional[str] = None,
        per_user_cooldown_ms: Optional[int] = None,
        n_required: int = 5,
        preference_theme: Optional[str] = None,
        badge: Optional[str] = None,
        expiry_ms: int = 24 * 3_600_000,
        campaign_id: Optional[str] = None,
    ) -> RecommendationRule:
        """Create a rule and wire its condition to the stream's ticks."""
        if kind not in REC_KINDS:
            raise InvalidRuleError(f"unknown recommendation kind {kind!r}")
        stream = self._processor.get_stream(stream_id)  # raises unknown-stream
        for group in target_groups:
            if group in GAMER_TYPES and group not in templates:
                raise MissingTemplateError(f"rule targets {group} but has no {group} template")
        if not templates:
            raise MissingTemplateError("rule needs at least one content template")
        if kind in ("Message", "Quiz") and validation is not None:
            raise InvalidRuleError(f"{kind} rules cannot carry a validation spec")
        spec: Optional[ValidationSpec] = None
        if validation is not None:
            spec = ValidationSpec(
                object_id=validation["object_id"],
                action_attribute=validation["action_attribute"],
                action_value=validation.get("action_value", True),
                effect_threshold=validation.get("effect_threshold"),
                effect_drop_ratio=validation.get("effect_drop_ratio", 0.10),
                window_ms=validation.get("window_ms", self._default_window_ms),
            )
            involved_object_id = involved_object_id or spec.object_id
        if kind == "Task" and spec is None and involved_object_id is not None:
            if self._broker.has_entity(involved_object_id):
                raise NoValidationSpecError(
                    f"Task rule involves {involved_object_id!r} which has a sensor; "
                    "a validation spec is required"
                )
        space_id = self._bind_space(stream.selector_id)
        with self._lock:
            rule_id = f"rule-{next(self._rule_seq)}"
            condition_id = self._processor.register_condition(
                stream_id, comparator, threshold, trigger=trigger, cooldown_ms=cooldown_ms,
            )
            rule = RecommendationRule(
                id=rule_id,
                condition_id=condition_id,
                stream_id=stream_id,
                space_id=space_id,
                target_groups=set(target_groups),
                kind=kind,
                templates=dict(templates),
                validation=spec,
                per_user_cooldown_ms=(
                    per_user_cooldown_ms if per_user_cooldown_ms is not None
                    else (cooldown_ms if cooldown_ms is not None else stream.frequency_ms)
                ),
                n_required=n_required,
                preference_theme=preference_theme,
                badge=badge,
                expiry_ms=expiry_ms,
                campaign_id=campaign_id,
            )
            self._rules[rule_id] = rule
            self._rules_by_condition[condition_id] = rule_id
            return rule

    def get_rule(self, rule_id: str) -> RecommendationRule:
        with self._lock:
            rule = self._rules.get(rule_id)
            if rule is None:
                raise UnknownStreamError(f"no rule {rule_id!r}")
            return rule

    def rules(self) -> list[RecommendationRule]:
        with self._lock:
            return list(self._rules.values())

    def _bind_space(self, selector_id: str) -> str:
        """The building space a condition talks about.

        Composites (rooms and spaces) bind to themselves; physical sensors
        bind to their containing space via the located_in attribute.
        """
        entity = self._broker.get_entity(selector_id)
        if entity.entity_type in SPACE_TYPES:
            return entity.id
        att = entity.attributes.get("located_in")
        if att is None or not isinstance(att.value, str):
            raise InvalidRuleError(
                f"sensor {selector_id!r} has no located_in attribute to bind a space"
            )
        return str(att.value)

    # -- firing ---------------------------------------------------------------

    def on_stream_event(self, event: StreamEvent) -> None:
        if event.kind == "TickSample":
            with self._lock:
                self._tick_history.setdefault(event.stream_id, []).append(
                    (event.at, float(event.payload["value"]))
                )
            return
        if event.kind != "ContextChange" or "condition_id" not in event.payload:
            return
        with self._lock:
            rule_id = self._rules_by_condition.get(event.payload["condition_id"])
        if rule_id is not None:
            self.on_condition_fired(rule_id, event)

    def on_condition_fired(self, rule_id: str, event: StreamEvent) -> list[Recommendation]:
        """Fan a condition firing out to every eligible user."""
        created: list[Recommendation] = []
        with self._lock:
            rule = self._rules[rule_id]
            now = event.at
            for profile in list(self._profiles.values()):
                if not (profile.groups() & rule.target_groups):
                    continue
                if rule.space_id not in profile.activity_locations:
                    continue
                last = self._last_created.get((rule.id, profile.user_id))
                if last is not None and now - last < rule.per_user_cooldown_ms:
                    continue
                try:
                    content = self.select_content(rule, profile)
                except NoMatchingTemplateError:
                    logger.warning(
                        "no template for user %s (gamer type %s) on rule %s",
                        profile.user_id, profile.gamer_type, rule.id,
                    )
                    continue
                rec = Recommendation(
                    id=f"rec-{next(self._rec_seq)}",
                    rule_id=rule.id,
                    user_id=profile.user_id,
                    kind=rule.kind,
                    content=content,
                    state="Pending",
                    created_at=now,
                    history=[("Pending", now)],
                )
                self._recs[rec.id] = rec
                self._recs_by_user.setdefault(profile.user_id, []).append(rec.id)
                self._last_created[(rule.id, profile.user_id)] = now
                self._events.append(EngineEvent("created", rec.id, rule.id, profile.user_id, now))
                if self._auto_deliver:
                    # push delivery: the webhook/poll channel is at-least-once,
                    # so the window anchors at creation time
                    self._transition(rec, "Delivered", now)
                    rec.delivered_at = now
                    if rec.kind == "Task" and rule.validation is not None:
                        rec.window_end = now + rule.validation.window_ms
                created.append(rec)
        for rec in created:
            self._store_rec_doc(rec)
            self._push_webhook(rec)
        return created

    def select_content(self, rule: RecommendationRule, profile: UserProfile) -> str:
        """Render the rule's template for the profile's gamer type.

        ``{N}`` expands to the remaining action count for the rule's badge:
        max(n_required - n_done, 0).
        """
        gamer_type = profile.gamer_type or self._precedence_type(profile)
        template = rule.templates.get(gamer_type) if gamer_type else None
        if template is None:
            template = rule.templates.get("default")
        if template is None:
            raise NoMatchingTemplateError(
                f"rule {rule.id} has no template for gamer type {gamer_type!r}"
            )
        done = profile.action_counters.get(rule.counter_key(), 0)
        remaining = max(rule.n_required - done, 0)
        return template.replace("{N}", str(remaining))

    def _precedence_type(self, profile: UserProfile) -> Optional[str]:
        matched = profile.groups() & set(GAMER_TYPES)
        for candidate in self._gamer_precedence:
            if candidate in matched:
                return candidate
        return None

    # -- delivery and feedback ---------------------------------------------------

    def poll(self, user_id: str, state: Optional[str] = None) -> list[Recommendation]:
        """User-facing fetch; flips Pending recommendations to Delivered."""
        delivered: list[Recommendation] = []
        with self._lock:
            now = self._clock.now_ms()
            out = []
            for rec_id in self._recs_by_user.get(user_id, []):
                rec = self._recs[rec_id]
                if rec.state == "Pending":
                    self._transition(rec, "Delivered", now)
                    rec.delivered_at = now
                    rule = self._rules[rec.rule_id]
                    if rec.kind == "Task" and rule.validation is not None:
                        rec.window_end = now + rule.validation.window_ms
                    delivered.append(rec)
                if state is None or rec.state == state:
                    out.append(rec)
        for rec in delivered:
            self._store_rec_doc(rec)
        return out

    def get_recommendation(self, rec_id: str) -> Recommendation:
        with self._lock:
            rec = self._recs.get(rec_id)
            if rec is None:
                raise UnknownRecommendationError(f"no recommendation {rec_id!r}")
            return rec

    def recommendations(self) -> list[Recommendation]:
        with self._lock:
            return list(self._recs.values())

    def record_feedback(self, rec_id: str, response: str, answer: Optional[str] = None) -> Recommendation:
        """Accept/Reject (or quiz answer) from the user.

        Messages and quizzes are accepted by default without validation;
        Tasks wait for infrastructure validation.
        """
        with self._lock:
            rec = self._recs.get(rec_id)
            if rec is None:
                raise UnknownRecommendationError(f"no recommendation {rec_id!r}")
            if rec.state != "Delivered":
                raise WrongStateError(f"feedback on {rec.state} recommendation {rec_id}")
            now = self._clock.now_ms()
            rec.feedback = answer if answer is not None else response
            rec.feedback_at = now
            rule = self._rules[rec.rule_id]
            if response == "Reject":
                self._transition(rec, "Rejected", now)
            elif rec.kind in ("Message", "Quiz"):
                self._transition(rec, "Accepted", now)
                self._count_evidence(rule, rec.user_id)
            # Task + Accept: state awaits validate_task
        self._store_feedback_doc(rec)
        self._store_rec_doc(rec)
        return rec

    def validate_task(self, rec_id: str, now: Optional[int] = None) -> str:
        """Validated iff both action signal and effect occurred in the window.

        Returns "Validated", "Failed", or "pending" when the window is
        still open without conclusive evidence.
        """
        with self._lock:
            rec = self._recs.get(rec_id)
            if rec is None:
                raise UnknownRecommendationError(f"no recommendation {rec_id!r}")
            rule = self._rules[rec.rule_id]
            if rule.validation is None:
                raise NoValidationSpecError(f"rule {rule.id} has no validation spec")
            if rec.state in ("Validated", "Failed"):
                return rec.state
            if rec.state != "Delivered" or rec.delivered_at is None:
                raise WrongStateError(f"cannot validate {rec.state} recommendation {rec_id}")
            now = now if now is not None else self._clock.now_ms()
            spec = rule.validation
            window = (rec.delivered_at, rec.delivered_at + spec.window_ms)
            acted = self._action_seen(spec, window)
            effective = self._effect_seen(rule, spec, window)
            if acted and effective:
                self._transition(rec, "Validated", now)
                profile = self._profiles.get(rec.user_id)
                if profile is not None:
                    key = rule.counter_key()
                    profile.action_counters[key] = profile.action_counters.get(key, 0) + 1
                self._count_evidence(rule, rec.user_id)
                result = "Validated"
            elif now > window[1]:
                self._transition(rec, "Failed", now)
                result = "Failed"
            else:
                return "pending"
        self._store_rec_doc(self._recs[rec_id])
        return result

    def sweep(self, now_ms: int) -> None:
        """Finalize overdue tasks and expire stale recommendations."""
        with self._lock:
            candidates = list(self._recs.values())
        for rec in candidates:
            rule = self._rules[rec.rule_id]
            if rec.state == "Delivered" and rec.kind == "Task" and rule.validation is not None:
                if rec.window_end is not None and now_ms > rec.window_end:
                    try:
                        self.validate_task(rec.id, now_ms)
                    except WrongStateError:
                        pass
            elif rec.state in ("Pending", "Delivered"):
                anchor = rec.delivered_at or rec.created_at
                if now_ms - anchor > rule.expiry_ms:
                    with self._lock:
                        if rec.state in ("Pending", "Delivered"):
                            self._transition(rec, "Expired", now_ms)
                    self._store_rec_doc(rec)

    def engine_events(self) -> list[EngineEvent]:
        with self._lock:
            return list(self._events)

    # -- evidence loops ------------------------------------------------------------

    def _count_evidence(self, rule: RecommendationRule, user_id: str) -> None:
        """K accepted recommendations on one theme materialize a preference."""
        if rule.preference_theme is None:
            return
        key = (user_id, rule.preference_theme)
        self._evidence[key] = self._evidence.get(key, 0) + 1
        if self._evidence[key] >= self._evidence_k:
            profile = self._profiles.get(user_id)
            if profile is not None and rule.preference_theme not in profile.preferences:
                profile.preferences.add(rule.preference_theme)
                self._reinfer(profile)
                logger.info(
                    "materialized preference %s for user %s from feedback evidence",
                    rule.preference_theme, user_id,
                )

    def _action_seen(self, spec: ValidationSpec, window: tuple[int, int]) -> bool:
        for entity_id, attribute, value, at in self._action_log:
            if entity_id != spec.object_id or attribute != spec.action_attribute:
                continue
            if not (window[0] <= at <= window[1]):
                continue
            if self._signal_matches(value, spec.action_value):
                return True
        return False

    @staticmethod
    def _signal_matches(value: Any, expected: Any) -> bool:
        if isinstance(expected, bool):
            return bool(value) == expected
        return value == expected

    def _effect_seen(
        self, rule: RecommendationRule, spec: ValidationSpec, window: tuple[int, int]
    ) -> bool:
        threshold = spec.effect_threshold
        if threshold is None:
            threshold = self._processor.get_condition(rule.condition_id).threshold
        ticks = [
            (t, v) for t, v in self._tick_history.get(rule.stream_id, [])
            if window[0] < t <= window[1]
        ]
        for _, v in ticks:
            if v < threshold:
                return True
        for i, (_, vi) in enumerate(ticks):
            if vi <= 0:
                continue
            for _, vj in ticks[i + 1:]:
                if (vi - vj) / vi >= spec.effect_drop_ratio:
                    return True
        return False

    # -- wiring ---------------------------------------------------------------------

    def _on_notification(self, notification: Notification) -> None:
        with self._lock:
            watched = any(
                rule.validation is not None
                and rule.validation.object_id == notification.entity_id
                and rule.validation.action_attribute == notification.attribute
                for rule in self._rules.values()
            )
            if watched:
                self._action_log.append((
                    notification.entity_id,
                    notification.attribute,
                    notification.new.value,
                    notification.new.observed_at,
                ))

    def _transition(self, rec: Recommendation, state: str, at: int) -> None:
        allowed = _TRANSITIONS.get(rec.state, set())
        if state not in allowed:
            raise WrongStateError(f"{rec.id}: illegal transition {rec.state} -> {state}")
        rec.state = state
        rec.history.append((state, at))
        self._events.append(EngineEvent(state.lower(), rec.id, rec.rule_id, rec.user_id, at))

    def _store_profile_doc(self, profile: UserProfile) -> None:
        try:
            doc = self._fusion.enrich("UserProfile", {
                "user_id": profile.user_id,
                "preferences": profile.preferences,
                "gamer_type": profile.gamer_type,
                "activity_locations": profile.activity_locations,
            })
            self._fusion.store_document(doc)
        except Exception:  # noqa: BLE001
            logger.exception("failed to store profile document")

    def _store_rec_doc(self, rec: Recommendation) -> None:
        try:
            doc = self._fusion.enrich("Recommendation", {
                "id": rec.id,
                "rule_id": rec.rule_id,
                "user_id": rec.user_id,
                "kind": rec.kind,
                "content": rec.content,
                "state": rec.state,
                "created_at": rec.created_at,
            })
            self._fusion.store_document(doc)
        except Exception:  # noqa: BLE001
            logger.exception("failed to store recommendation document")

    def _store_feedback_doc(self, rec: Recommendation) -> None:
        try:
            doc = self._fusion.enrich("Feedback", {
                "recommendation_id": rec.id,
                "user_id": rec.user_id,
                "response": str(rec.feedback),
                "at": rec.feedback_at,
            })
            self._fusion.store_document(doc)
        except Exception:  # noqa: BLE001
            logger.exception("failed to store feedback document")

    def _push_webhook(self, rec: Recommendation) -> None:
        profile = self._profiles.get(rec.user_id)
        if profile is None or not profile.webhook_url:
            return

        def _send(url: str, payload: dict) -> None:
            try:
                import httpx

                httpx.post(url, json=payload, timeout=2.0)
            except Exception:  # noqa: BLE001 - fire and forget
                logger.debug("webhook delivery to %s failed", url)

        threading.Thread(
            target=_send, args=(profile.webhook_url, rec.to_obj()), daemon=True
        ).start()
