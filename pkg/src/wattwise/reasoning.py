"""Group inference over behavioural profiles.

Group definitions are class expressions of the restricted shape

    Person and (hasPreference some C1) and ... and (hasPreference some Cn)

evaluated under a closed-world reading: the platform owns the complete
preference record, so a missing preference assertion counts as evidence of
non-membership. That is a deliberate departure from OWL's open-world
semantics and is what makes inference decidable by simple set containment.

A Manchester-style surface syntax is accepted for definitions, e.g.::

    Player equivalentTo Person that hasPreference some Reward
        and hasPreference some Competition
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable

from .errors import UnsupportedExpressionError

SUPPORTED_PROPERTY = "hasPreference"
UNIVERSE_CLASS = "Person"

GAMER_TYPES = ("Humanitarian", "Socialiser", "FreeSpirit", "Player")


@dataclass(frozen=True)
class ExistentialRestriction:
    prop: str
    filler: str

    def __str__(self) -> str:
        return f"{self.prop} some {self.filler}"


@dataclass(frozen=True)
class ClassExpression:
    named_class: str = UNIVERSE_CLASS
    restrictions: tuple[ExistentialRestriction, ...] = ()

    def check_shape(self) -> None:
        if self.named_class != UNIVERSE_CLASS:
            raise UnsupportedExpressionError(
                f"named class must be {UNIVERSE_CLASS}, got {self.named_class!r}"
            )
        for r in self.restrictions:
            if r.prop != SUPPORTED_PROPERTY:
                raise UnsupportedExpressionError(
                    f"only {SUPPORTED_PROPERTY} restrictions are supported, got {r.prop!r}"
                )

    def satisfied_by(self, preferences: Iterable[str]) -> bool:
        """Closed world: every existential conjunct must be witnessed."""
        have = set(preferences)
        return all(r.filler in have for r in self.restrictions)

    def to_obj(self) -> dict:
        return {
            "class": self.named_class,
            "some": [{"property": r.prop, "filler": r.filler} for r in self.restrictions],
        }

    @classmethod
    def from_obj(cls, obj: dict) -> "ClassExpression":
        restrictions = tuple(
            ExistentialRestriction(prop=item["property"], filler=item["filler"])
            for item in obj.get("some", [])
        )
        expr = cls(named_class=obj.get("class", UNIVERSE_CLASS), restrictions=restrictions)
        expr.check_shape()
        return expr


@dataclass(frozen=True)
class GroupDefinition:
    name: str
    expression: ClassExpression

    def to_obj(self) -> dict:
        return {"name": self.name, "expression": self.expression.to_obj()}


_RESTRICTION_RE = re.compile(r"^\s*([\w:]+)\s+some\s+([\w:]+)\s*$")


def _strip_prefix(name: str) -> str:
    return name.split(":", 1)[1] if ":" in name else name


def parse_class_expression(text: str) -> ClassExpression:
    """Parse ``Person that P some C and P some C ...``."""
    head, sep, rest = text.partition(" that ")
    named = _strip_prefix(head.strip())
    restrictions: list[ExistentialRestriction] = []
    if sep:
        for chunk in re.split(r"\s+and\s+", rest.strip()):
            m = _RESTRICTION_RE.match(chunk)
            if not m:
                raise UnsupportedExpressionError(f"cannot parse restriction {chunk!r}")
            restrictions.append(ExistentialRestriction(
                prop=_strip_prefix(m.group(1)),
                filler=_strip_prefix(m.group(2)),
            ))
    expr = ClassExpression(named_class=named, restrictions=tuple(restrictions))
    expr.check_shape()
    return expr


def parse_group_definition(text: str) -> GroupDefinition:
    """Parse ``Name equivalentTo <class expression>`` (whitespace tolerant)."""
    normalized = " ".join(text.split())
    name, sep, body = normalized.partition(" equivalentTo ")
    if not sep:
        raise UnsupportedExpressionError("expected '<Name> equivalentTo <expression>'")
    return GroupDefinition(name=name.strip(), expression=parse_class_expression(body))


def infer_groups(
    preferences: Iterable[str],
    definitions: Iterable[GroupDefinition],
) -> set[str]:
    """Every group whose definition the preference set satisfies."""
    prefs = set(preferences)
    return {d.name for d in definitions if d.expression.satisfied_by(prefs)}


def default_gamer_type_definitions() -> list[GroupDefinition]:
    """Shipped defaults; deployments may replace them.

    Player follows the published equivalence (Reward + Competition); the
    other three types have no published expressions, so each keys on a
    single characteristic preference.
    """
    return [
        parse_group_definition(
            "Player equivalentTo Person that hasPreference some Reward "
            "and hasPreference some Competition"
        ),
        parse_group_definition("Socialiser equivalentTo Person that hasPreference some Social"),
        parse_group_definition("Humanitarian equivalentTo Person that hasPreference some Purpose"),
        parse_group_definition("FreeSpirit equivalentTo Person that hasPreference some Autonomy"),
    ]
