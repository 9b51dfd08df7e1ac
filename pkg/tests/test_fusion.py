from __future__ import annotations

import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wattwise.errors import InvalidDocumentError, MissingFieldError, UnknownTermError
from wattwise.fusion import (
    FusionStore,
    JsonLdDocument,
    MappingRule,
    default_vocabulary,
)


@pytest.fixture
def fusion() -> FusionStore:
    return FusionStore()


MEASUREMENT = {
    "sensor_id": "co2-office-1",
    "attribute": "co2",
    "value": 1010.0,
    "unit": "ppm",
    "observed_at": 1_700_000_000_000,
    "quality": "Cleaned",
}


def test_measurement_enrichment_structure(fusion):
    doc = fusion.enrich("Measurement", MEASUREMENT)
    assert doc.types == ("entropy:Observation",)
    assert doc.properties["entropy:hasValue"] == 1010.0
    assert doc.properties["entropy:unit"] == "ppm"
    assert doc.properties["entropy:observedAt"] == 1_700_000_000_000
    assert doc.properties["entropy:madeBySensor"] == {"@id": "urn:entropy:entity:co2-office-1"}
    assert doc.properties["entropy:observedProperty"] == "co2"
    assert doc.id == "urn:entropy:observation:co2-office-1:co2:1700000000000"


def test_enrichment_is_deterministic(fusion):
    a = fusion.enrich("Measurement", MEASUREMENT).serialize()
    b = fusion.enrich("Measurement", dict(MEASUREMENT)).serialize()
    assert a == b
    assert isinstance(a, str)


def test_serialization_key_order(fusion):
    doc = fusion.enrich("Measurement", MEASUREMENT)
    keys = list(json.loads(doc.serialize()).keys())
    assert keys[0] == "@context"
    assert keys[1] == "@id"
    assert keys[2] == "@type"
    assert keys[3:] == sorted(keys[3:])


def test_rule_with_unknown_term_rejected_at_registration(fusion):
    with pytest.raises(UnknownTermError):
        fusion.register_rule(MappingRule(
            source_kind="Measurement",
            target_class="entropy:Observation",
            field_map={
                "sensor_id": "entropy:bogusProperty",
                "attribute": "entropy:observedProperty",
                "value": "entropy:hasValue",
                "unit": "entropy:unit",
                "observed_at": "entropy:observedAt",
                "quality": "entropy:quality",
            },
        ))


def test_rule_must_cover_declared_fields(fusion):
    with pytest.raises(MissingFieldError):
        fusion.register_rule(MappingRule(
            source_kind="Measurement",
            target_class="entropy:Observation",
            field_map={"value": "entropy:hasValue"},
        ))


def test_validate_flags_undeclared_term(fusion):
    doc = JsonLdDocument(
        id="urn:x:1",
        types=("entropy:Observation",),
        properties={"entropy:bogus": 1},
        context=dict(default_vocabulary().prefixes),
    )
    violations = fusion.validate(doc)
    assert len(violations) == 1
    assert "entropy:bogus" in violations[0]


def test_numeric_property_with_string_literal_is_violation(fusion):
    doc = JsonLdDocument(
        id="urn:x:2",
        types=("entropy:Observation",),
        properties={"entropy:hasValue": "very high"},
        context=dict(default_vocabulary().prefixes),
    )
    violations = fusion.validate(doc)
    assert any("expects a number" in v for v in violations)


def test_every_enriched_document_validates(fusion):
    for i in range(25):
        record = dict(MEASUREMENT, value=400.0 + i, observed_at=i)
        doc = fusion.enrich("Measurement", record)
        assert fusion.validate(doc) == []


def test_store_then_get_roundtrip(fusion):
    doc = fusion.enrich("Measurement", MEASUREMENT)
    doc_id = fusion.store_document(doc)
    again = fusion.get_document(doc_id)
    assert again == doc
    assert JsonLdDocument.parse(again.serialize()) == doc


def test_store_rejects_invalid_document(fusion):
    bad = JsonLdDocument(
        id="urn:x:3", types=("entropy:NotAClass",), properties={}, context={},
    )
    with pytest.raises(InvalidDocumentError):
        fusion.store_document(bad)


def test_find_with_value_filter_matches_scan_oracle(fusion):
    docs = []
    for i in range(200):
        record = dict(MEASUREMENT, value=500.0 + i * 10, observed_at=i * 1000)
        doc = fusion.enrich("Measurement", record)
        fusion.store_document(doc)
        docs.append(doc)
    t_range = (20_000, 150_000)
    found = fusion.find_documents(
        class_term="entropy:Observation",
        property_filters=[("entropy:hasValue", ">", 1000.0)],
        time_range=t_range,
    )
    expected = [
        d for d in docs
        if d.properties["entropy:hasValue"] > 1000.0
        and t_range[0] <= d.properties["entropy:observedAt"] < t_range[1]
    ]
    assert found == expected


def test_find_on_empty_store(fusion):
    assert fusion.find_documents(class_term="entropy:Observation") == []


def test_user_profile_enrichment(fusion):
    doc = fusion.enrich("UserProfile", {
        "user_id": "u1",
        "preferences": {"Reward", "Competition"},
        "gamer_type": "Player",
        "activity_locations": {"office-12"},
    })
    assert doc.types == ("ebio:Person",)
    assert doc.properties["ebio:hasPreference"] == [
        {"@id": "ebio:Competition"}, {"@id": "ebio:Reward"},
    ]
    assert doc.properties["ebio:hasGamerType"] == {"@id": "ebio:Player"}
    assert fusion.validate(doc) == []


def test_recommendation_kind_refines_type(fusion):
    doc = fusion.enrich("Recommendation", {
        "id": "rec-1", "rule_id": "rule-1", "user_id": "u1", "kind": "Task",
        "content": "Open the door", "state": "Delivered", "created_at": 9,
    })
    assert doc.types == ("ebio:Task",)


@settings(max_examples=50, deadline=None)
@given(
    value=st.floats(min_value=-1e9, max_value=1e9, allow_nan=False),
    at=st.integers(min_value=0, max_value=2**52),
    sensor=st.text(alphabet="abc-123", min_size=1, max_size=12),
)
def test_roundtrip_property(value, at, sensor):
    fusion = FusionStore()
    doc = fusion.enrich("Measurement", dict(
        MEASUREMENT, value=value, observed_at=at, sensor_id=sensor,
    ))
    assert JsonLdDocument.parse(doc.serialize()) == doc
