"""Semantic fusion: mapping platform records onto JSON-LD documents.

Two small vocabularies cover the platform: ``entropy:`` for energy
management (observations, sensors, spaces) and ``ebio:`` for behavioural
interventions (people, preferences, gamer types, recommendations,
feedback). Documents are produced and consumed inside this artifact, so
JSON-LD is handled in compacted form only, with a deterministic
serialization: top-level ``@context``, ``@id``, ``@type``, then sorted
property terms.

Document ids follow ``urn:entropy:<kind>:<source-id>:<timestamp>`` so
re-enriching the same source is idempotent.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from typing import Any, Iterable, Optional

from .errors import InvalidDocumentError, MissingFieldError, UnknownTermError

ENERGY_PREFIX = "entropy"
BEHAVIOUR_PREFIX = "ebio"

DEFAULT_PREFIXES = {
    ENERGY_PREFIX: "https://vocab.example/energy#",
    BEHAVIOUR_PREFIX: "https://vocab.example/behaviour#",
}

# property ranges
R_NUMBER = "number"
R_STRING = "string"
R_BOOLEAN = "boolean"
R_TIMESTAMP = "timestamp"
R_NODE = "node"      # reference to another node: {"@id": ...}
R_TERM = "term"      # reference to a vocabulary class: {"@id": "prefix:Name"}


@dataclass(frozen=True)
class Term:
    name: str              # prefixed, e.g. "entropy:Observation"
    kind: str              # "class" | "property"
    range: Optional[str] = None  # for properties


@dataclass(frozen=True)
class Vocabulary:
    prefixes: dict[str, str]
    terms: dict[str, Term]
    version: str = "1.0"

    def has(self, name: str) -> bool:
        return name in self.terms

    def is_class(self, name: str) -> bool:
        t = self.terms.get(name)
        return t is not None and t.kind == "class"

    def is_property(self, name: str) -> bool:
        t = self.terms.get(name)
        return t is not None and t.kind == "property"

    def expand(self, name: str) -> str:
        prefix, _, local = name.partition(":")
        if prefix in self.prefixes and local:
            return self.prefixes[prefix] + local
        return name

    def check_literal(self, term_name: str, value: Any) -> Optional[str]:
        """None when the literal fits the property's declared range."""
        term = self.terms.get(term_name)
        if term is None or term.kind != "property":
            return f"unknown property term {term_name}"
        rng = term.range
        if isinstance(value, list):
            for item in value:
                problem = self.check_literal(term_name, item)
                if problem:
                    return problem
            return None
        if rng == R_NUMBER:
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                return f"{term_name} expects a number, got {type(value).__name__}"
        elif rng == R_STRING:
            if not isinstance(value, str):
                return f"{term_name} expects a string, got {type(value).__name__}"
        elif rng == R_BOOLEAN:
            if not isinstance(value, bool):
                return f"{term_name} expects a boolean, got {type(value).__name__}"
        elif rng == R_TIMESTAMP:
            if isinstance(value, bool) or not isinstance(value, int):
                return f"{term_name} expects an epoch-ms timestamp, got {type(value).__name__}"
        elif rng == R_NODE:
            if not (isinstance(value, dict) and set(value) == {"@id"} and isinstance(value["@id"], str)):
                return f"{term_name} expects a node reference"
        elif rng == R_TERM:
            if not (isinstance(value, dict) and set(value) == {"@id"} and value["@id"] in self.terms):
                return f"{term_name} expects a vocabulary term reference"
        return None


def _t(name: str, kind: str, rng: Optional[str] = None) -> Term:
    return Term(name=name, kind=kind, range=rng)


def default_vocabulary(version: str = "1.0") -> Vocabulary:
    """The built-in vocabulary: energy-management + behavioural terms."""
    classes = [
        "entropy:Observation", "entropy:Sensor", "entropy:Room", "entropy:Building",
        "entropy:BuildingSpace", "entropy:Door", "entropy:AnalysisResult",
        "ebio:Person", "ebio:PreferenceAssertion", "ebio:Recommendation",
        "ebio:Task", "ebio:Message", "ebio:Quiz", "ebio:Feedback",
        "ebio:GamerType", "ebio:Humanitarian", "ebio:Socialiser",
        "ebio:FreeSpirit", "ebio:Player",
        "ebio:Reward", "ebio:Competition", "ebio:Recognition",
        "ebio:Social", "ebio:Autonomy", "ebio:Purpose",
    ]
    properties = [
        ("entropy:hasValue", R_NUMBER),
        ("entropy:unit", R_STRING),
        ("entropy:observedAt", R_TIMESTAMP),
        ("entropy:madeBySensor", R_NODE),
        ("entropy:observedProperty", R_STRING),
        ("entropy:quality", R_STRING),
        ("entropy:locatedIn", R_NODE),
        ("entropy:entityType", R_STRING),
        ("entropy:attributesJson", R_STRING),
        ("entropy:algorithm", R_STRING),
        ("entropy:resultJson", R_STRING),
        ("entropy:configJson", R_STRING),
        ("ebio:hasPreference", R_TERM),
        ("ebio:hasGamerType", R_TERM),
        ("ebio:hasActivitySpace", R_NODE),
        ("ebio:forUser", R_NODE),
        ("ebio:fromRule", R_STRING),
        ("ebio:content", R_STRING),
        ("ebio:state", R_STRING),
        ("ebio:createdAt", R_TIMESTAMP),
        ("ebio:respondsTo", R_NODE),
        ("ebio:answer", R_STRING),
        ("ebio:givenAt", R_TIMESTAMP),
        ("ebio:aboutSpace", R_NODE),
    ]
    terms = {name: _t(name, "class") for name in classes}
    terms.update({name: _t(name, "property", rng) for name, rng in properties})
    return Vocabulary(prefixes=dict(DEFAULT_PREFIXES), terms=terms, version=version)


@dataclass(frozen=True)
class JsonLdDocument:
    id: str
    types: tuple[str, ...]
    properties: dict[str, Any]
    context: dict[str, str]

    def to_obj(self) -> dict:
        obj: dict[str, Any] = {
            "@context": {k: self.context[k] for k in sorted(self.context)},
            "@id": self.id,
            "@type": self.types[0] if len(self.types) == 1 else sorted(self.types),
        }
        for key in sorted(self.properties):
            obj[key] = self.properties[key]
        return obj

    def serialize(self) -> str:
        return json.dumps(self.to_obj(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_obj(cls, obj: dict) -> "JsonLdDocument":
        if "@id" not in obj or "@type" not in obj:
            raise InvalidDocumentError("document needs @id and @type")
        raw_type = obj["@type"]
        types = tuple(sorted(raw_type)) if isinstance(raw_type, list) else (raw_type,)
        properties = {k: v for k, v in obj.items() if not k.startswith("@")}
        return cls(
            id=obj["@id"],
            types=types,
            properties=properties,
            context=dict(obj.get("@context", {})),
        )

    @classmethod
    def parse(cls, text: str) -> "JsonLdDocument":
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise InvalidDocumentError(f"not JSON: {exc}") from exc
        return cls.from_obj(obj)


# declared source fields per record kind; mapping rules must cover them all
DECLARED_FIELDS = {
    "Measurement": ("sensor_id", "attribute", "value", "unit", "observed_at", "quality"),
    "EntityRecord": ("id", "entity_type", "attributes"),
    "UserProfile": ("user_id", "preferences", "gamer_type", "activity_locations"),
    "Recommendation": ("id", "rule_id", "user_id", "kind", "content", "state", "created_at"),
    "Feedback": ("recommendation_id", "user_id", "response", "at"),
    "AnalysisResult": ("id", "algorithm", "config", "result", "created_at"),
}


@dataclass(frozen=True)
class MappingRule:
    source_kind: str
    target_class: str
    field_map: dict[str, str]  # source field -> property term (empty string skips id fields)

    def mapped_property(self, source_field: str) -> Optional[str]:
        term = self.field_map.get(source_field, "")
        return term or None


def entity_iri(entity_id: str) -> str:
    return f"urn:entropy:entity:{entity_id}"


def user_iri(user_id: str) -> str:
    return f"urn:entropy:user:{user_id}"


class FusionStore:
    """Registers mapping rules, enriches records, validates and stores docs."""

    def __init__(self, vocabulary: Optional[Vocabulary] = None):
        self._vocab = vocabulary or default_vocabulary()
        self._rules: dict[str, MappingRule] = {}
        self._docs: dict[str, JsonLdDocument] = {}
        self._order: list[str] = []
        self._lock = threading.RLock()
        for rule in _default_rules():
            self.register_rule(rule)

    @property
    def vocabulary(self) -> Vocabulary:
        return self._vocab

    def context_obj(self) -> dict:
        return {"@context": dict(self._vocab.prefixes), "version": self._vocab.version}

    # -- rules ------------------------------------------------------------

    def register_rule(self, rule: MappingRule) -> None:
        if rule.source_kind not in DECLARED_FIELDS:
            raise MissingFieldError(f"unknown source kind {rule.source_kind!r}")
        if not self._vocab.is_class(rule.target_class):
            raise UnknownTermError(f"target class {rule.target_class!r} not in vocabulary")
        declared = DECLARED_FIELDS[rule.source_kind]
        missing = [f for f in declared if f not in rule.field_map]
        if missing:
            raise MissingFieldError(
                f"rule for {rule.source_kind} leaves fields unmapped: {missing}"
            )
        for term in rule.field_map.values():
            if term and not self._vocab.is_property(term):
                raise UnknownTermError(f"property term {term!r} not in vocabulary")
        with self._lock:
            self._rules[rule.source_kind] = rule

    def rule_for(self, source_kind: str) -> MappingRule:
        with self._lock:
            rule = self._rules.get(source_kind)
            if rule is None:
                raise MissingFieldError(f"no mapping rule for {source_kind!r}")
            return rule

    # -- enrichment ---------------------------------------------------------

    def enrich(self, source_kind: str, record: dict, rule: Optional[MappingRule] = None) -> JsonLdDocument:
        """Map one source record onto a document. Deterministic per source."""
        rule = rule or self.rule_for(source_kind)
        if rule.source_kind != source_kind:
            raise MissingFieldError(f"rule is for {rule.source_kind}, record is {source_kind}")
        declared = DECLARED_FIELDS[source_kind]
        for fld in declared:
            if fld not in record:
                raise MissingFieldError(f"{source_kind} record is missing field {fld!r}")
        target_class = rule.target_class
        properties: dict[str, Any] = {}
        for fld in declared:
            term = rule.mapped_property(fld)
            if term is None or record[fld] is None:
                continue
            properties[term] = self._as_literal(term, fld, record[fld])
        if source_kind == "Recommendation":
            # recommendation kind refines the document class
            kind_class = {"Task": "ebio:Task", "Message": "ebio:Message", "Quiz": "ebio:Quiz"}.get(
                str(record.get("kind")), "ebio:Recommendation"
            )
            target_class = kind_class
        doc = JsonLdDocument(
            id=self._doc_id(source_kind, record),
            types=(target_class,),
            properties=properties,
            context=dict(self._vocab.prefixes),
        )
        violations = self.validate(doc)
        if violations:
            raise UnknownTermError(f"enrichment produced invalid document: {violations}")
        return doc

    def validate(self, doc: JsonLdDocument) -> list[str]:
        """All terms resolve in the vocabulary and literals match ranges."""
        violations: list[str] = []
        for t in doc.types:
            if not self._vocab.is_class(t):
                violations.append(f"unknown class term {t}")
        for term, value in doc.properties.items():
            if not self._vocab.is_property(term):
                violations.append(f"unknown property term {term}")
                continue
            problem = self._vocab.check_literal(term, value)
            if problem:
                violations.append(problem)
        for prefix in {t.partition(":")[0] for t in (*doc.types, *doc.properties)}:
            if prefix and prefix not in doc.context:
                violations.append(f"prefix {prefix!r} missing from @context")
        return violations

    # -- storage -------------------------------------------------------------

    def store_document(self, doc: JsonLdDocument) -> str:
        violations = self.validate(doc)
        if violations:
            raise InvalidDocumentError("; ".join(violations))
        with self._lock:
            if doc.id not in self._docs:
                self._order.append(doc.id)
            self._docs[doc.id] = doc
            return doc.id

    def get_document(self, doc_id: str) -> Optional[JsonLdDocument]:
        with self._lock:
            return self._docs.get(doc_id)

    def find_documents(
        self,
        class_term: Optional[str] = None,
        property_filters: Iterable[tuple[str, str, Any]] = (),
        time_range: Optional[tuple[int, int]] = None,
        time_property: str = "entropy:observedAt",
    ) -> list[JsonLdDocument]:
        """Linear scan; returns documents in insertion order."""
        ops = {
            ">": lambda a, b: a > b, ">=": lambda a, b: a >= b,
            "<": lambda a, b: a < b, "<=": lambda a, b: a <= b,
            "=": lambda a, b: a == b, "!=": lambda a, b: a != b,
        }
        with self._lock:
            out = []
            for doc_id in self._order:
                doc = self._docs[doc_id]
                if class_term is not None and class_term not in doc.types:
                    continue
                ok = True
                for term, op, literal in property_filters:
                    value = doc.properties.get(term)
                    try:
                        if value is None or not ops[op](value, literal):
                            ok = False
                            break
                    except TypeError:
                        ok = False
                        break
                if not ok:
                    continue
                if time_range is not None:
                    t = doc.properties.get(time_property)
                    if not isinstance(t, int) or not (time_range[0] <= t < time_range[1]):
                        continue
                out.append(doc)
            return out

    def all_documents(self) -> list[JsonLdDocument]:
        with self._lock:
            return [self._docs[i] for i in self._order]

    def document_count(self, class_term: Optional[str] = None) -> int:
        with self._lock:
            if class_term is None:
                return len(self._docs)
            return sum(1 for d in self._docs.values() if class_term in d.types)

    # -- internals -------------------------------------------------------------

    def _as_literal(self, term: str, fld: str, value: Any):
        rng = self._vocab.terms[term].range
        if rng == R_NODE:
            if fld in ("sensor_id",):
                return {"@id": entity_iri(str(value))}
            if fld in ("user_id",):
                return {"@id": user_iri(str(value))}
            if fld == "recommendation_id":
                return {"@id": f"urn:entropy:recommendation:{value}"}
            if fld == "activity_locations":
                return [{"@id": entity_iri(str(v))} for v in sorted(value)]
            return {"@id": str(value)}
        if rng == R_TERM:
            if fld == "preferences":
                return [{"@id": f"{BEHAVIOUR_PREFIX}:{v}"} for v in sorted(value)]
            return {"@id": f"{BEHAVIOUR_PREFIX}:{value}"}
        if rng == R_TIMESTAMP:
            return int(value)
        if rng == R_NUMBER:
            return value
        if rng == R_BOOLEAN:
            return bool(value)
        if fld == "attributes" or fld in ("config", "result"):
            return json.dumps(value, sort_keys=True, separators=(",", ":"))
        return str(value)

    @staticmethod
    def _doc_id(source_kind: str, record: dict) -> str:
        if source_kind == "Measurement":
            return (
                f"urn:entropy:observation:{record['sensor_id']}:"
                f"{record['attribute']}:{record['observed_at']}"
            )
        if source_kind == "EntityRecord":
            return entity_iri(str(record["id"]))
        if source_kind == "UserProfile":
            return user_iri(str(record["user_id"]))
        if source_kind == "Recommendation":
            return f"urn:entropy:recommendation:{record['id']}"
        if source_kind == "Feedback":
            return f"urn:entropy:feedback:{record['recommendation_id']}:{record['at']}"
        return f"urn:entropy:analysis:{record['id']}"


def _default_rules() -> list[MappingRule]:
    return [
        MappingRule(
            source_kind="Measurement",
            target_class="entropy:Observation",
            field_map={
                "sensor_id": "entropy:madeBySensor",
                "attribute": "entropy:observedProperty",
                "value": "entropy:hasValue",
                "unit": "entropy:unit",
                "observed_at": "entropy:observedAt",
                "quality": "entropy:quality",
            },
        ),
        MappingRule(
            source_kind="EntityRecord",
            target_class="entropy:Sensor",
            field_map={
                "id": "",  # becomes @id
                "entity_type": "entropy:entityType",
                "attributes": "entropy:attributesJson",
            },
        ),
        MappingRule(
            source_kind="UserProfile",
            target_class="ebio:Person",
            field_map={
                "user_id": "",  # becomes @id
                "preferences": "ebio:hasPreference",
                "gamer_type": "ebio:hasGamerType",
                "activity_locations": "ebio:hasActivitySpace",
            },
        ),
        MappingRule(
            source_kind="Recommendation",
            target_class="ebio:Recommendation",
            field_map={
                "id": "",
                "rule_id": "ebio:fromRule",
                "user_id": "ebio:forUser",
                "kind": "",  # refines @type instead
                "content": "ebio:content",
                "state": "ebio:state",
                "created_at": "ebio:createdAt",
            },
        ),
        MappingRule(
            source_kind="Feedback",
            target_class="ebio:Feedback",
            field_map={
                "recommendation_id": "ebio:respondsTo",
                "user_id": "ebio:forUser",
                "response": "ebio:answer",
                "at": "ebio:givenAt",
            },
        ),
        MappingRule(
            source_kind="AnalysisResult",
            target_class="entropy:AnalysisResult",
            field_map={
                "id": "",
                "algorithm": "entropy:algorithm",
                "config": "entropy:configJson",
                "result": "entropy:resultJson",
                "created_at": "entropy:observedAt",
            },
        ),
    ]
