"""HTTP surface: /v1 JSON API over the platform.

Every endpoint is a thin adapter over the owning module's operation. Errors
surface as ``{"error": {"code", "message"}}`` with the code from the raised
domain error. Mutating endpoints require the static bearer token.
"""

from __future__ import annotations

import logging
from typing import Optional

from fastapi import Depends, FastAPI, Header, Query, Request
from fastapi.responses import JSONResponse

from . import analytics as analytics_mod
from .broker import AttributeValue
from .composites import CompositeSpec
from .errors import AuthError, PlatformError
from .fusion import JsonLdDocument
from .platform import Platform
from .reasoning import ClassExpression, GroupDefinition, parse_group_definition
from .recommender import UserProfile
from .streams import OutlierPolicy
from .timeseries import SeriesQuery

logger = logging.getLogger(__name__)


def create_app(platform: Platform) -> FastAPI:
    app = FastAPI(title="wattwise", version="0.1.0", docs_url=None, redoc_url=None)

    def require_token(authorization: Optional[str] = Header(default=None)) -> None:
        expected = f"Bearer {platform.config.token}"
        if authorization != expected:
            raise AuthError("missing or invalid bearer token")

    auth = Depends(require_token)

    @app.exception_handler(PlatformError)
    async def _domain_error(_request: Request, exc: PlatformError):
        return JSONResponse(
            status_code=exc.http_status,
            content={"error": {"code": exc.code, "message": str(exc)}},
        )

    @app.get("/v1/health")
    def health():
        return {"status": "ok", "now_ms": platform.clock.now_ms()}

    @app.get("/v1/context")
    def jsonld_context():
        return platform.fusion.context_obj()

    @app.post("/v1/clock/advance", dependencies=[auth])
    def clock_advance(body: dict):
        return platform.advance_clock(int(body["to_ms"]))

    # -- campaigns --------------------------------------------------------

    @app.post("/v1/campaigns", dependencies=[auth])
    def create_campaign(body: dict):
        return platform.create_campaign(body).to_obj()

    @app.get("/v1/campaigns")
    def list_campaigns():
        return [c.to_obj() for c in platform.campaigns()]

    @app.get("/v1/campaigns/{campaign_id}")
    def get_campaign(campaign_id: str):
        return platform.get_campaign(campaign_id).to_obj()

    @app.post("/v1/campaigns/{campaign_id}/activate", dependencies=[auth])
    def activate_campaign(campaign_id: str):
        return platform.activate_campaign(campaign_id).to_obj()

    @app.post("/v1/campaigns/{campaign_id}/end", dependencies=[auth])
    def end_campaign(campaign_id: str):
        return platform.end_campaign(campaign_id).to_obj()

    @app.get("/v1/campaigns/{campaign_id}/dashboard")
    def dashboard(campaign_id: str):
        return platform.dashboard(campaign_id)

    # -- entities ----------------------------------------------------------

    @app.post("/v1/entities", dependencies=[auth])
    def upsert_entity(body: dict):
        attributes = {
            name: AttributeValue.from_obj(obj)
            for name, obj in (body.get("attributes") or {}).items()
        }
        version = platform.broker.upsert_entity(body["id"], body.get("entity_type", "Custom"), attributes)
        return {"id": body["id"], "version": version}

    @app.get("/v1/entities")
    def query_entities(
        type: Optional[str] = Query(default=None),  # noqa: A002 - wire name
        q: Optional[str] = Query(default=None),
        ids: Optional[str] = Query(default=None),
    ):
        predicate = _parse_predicate_param(q) if q else None
        idset = ids.split(",") if ids else None
        records = platform.broker.query_entities(entity_type=type, predicate=predicate, ids=idset)
        return [r.to_obj() for r in records]

    @app.get("/v1/entities/{entity_id}")
    def get_entity(entity_id: str):
        return platform.broker.get_entity(entity_id).to_obj()

    @app.patch("/v1/entities/{entity_id}/attrs", dependencies=[auth])
    def patch_attributes(entity_id: str, body: dict):
        patch = {name: AttributeValue.from_obj(obj) for name, obj in body.items()}
        return platform.broker.update_attributes(entity_id, patch).to_obj()

    @app.get("/v1/entities/{entity_id}/lifecycle")
    def get_lifecycle(entity_id: str):
        return platform.broker.get_lifecycle(entity_id).to_obj()

    # -- composites -----------------------------------------------------------

    @app.post("/v1/composites", dependencies=[auth])
    def define_composite(body: dict):
        spec = CompositeSpec(
            composite_id=body["composite_id"],
            entity_type=body.get("entity_type", "Room"),
            member_ids=list(body.get("member_ids", [])),
            member_predicate=tuple(body["member_predicate"]) if body.get("member_predicate") else None,
            attribute_fns=dict(body.get("attribute_fns", {})),
        )
        platform.composites.define_composite(spec)
        return spec.to_obj()

    @app.post("/v1/composites/{composite_id}/refresh", dependencies=[auth])
    def refresh_composite(composite_id: str):
        record = platform.composites.refresh(composite_id)
        return record.to_obj() if record else {"composite_id": composite_id}

    # -- ingestion ---------------------------------------------------------------

    @app.post("/v1/ingest", dependencies=[auth])
    def ingest(body: dict, idempotency_key: Optional[str] = Header(default=None)):
        measurements = body.get("measurements", body if isinstance(body, list) else [])
        return platform.ingest(measurements, idempotency_key=idempotency_key)

    # -- streams --------------------------------------------------------------------

    @app.post("/v1/streams", dependencies=[auth])
    def register_stream(body: dict):
        platform.require_active_campaign(body.get("campaign_id"))
        policy = None
        if body.get("policy"):
            policy = OutlierPolicy(**body["policy"])
        stream_id = platform.processor.register_stream(
            body["selector_id"],
            body["attribute"],
            int(body["frequency_ms"]),
            body.get("measurement_type", "LastValue"),
            policy=policy,
            campaign_id=body.get("campaign_id"),
        )
        return platform.processor.get_stream(stream_id).to_obj()

    @app.get("/v1/streams")
    def list_streams():
        return [s.to_obj() for s in platform.processor.streams()]

    @app.post("/v1/streams/{stream_id}/activate", dependencies=[auth])
    def activate_stream(stream_id: str):
        platform.processor.activate(stream_id)
        return platform.processor.get_stream(stream_id).to_obj()

    @app.post("/v1/streams/{stream_id}/deactivate", dependencies=[auth])
    def deactivate_stream(stream_id: str):
        platform.processor.deactivate(stream_id)
        return platform.processor.get_stream(stream_id).to_obj()

    @app.get("/v1/streams/{stream_id}/events")
    def stream_events(stream_id: str, since: int = Query(default=0)):
        platform.processor.get_stream(stream_id)  # 404 on unknown stream
        return [e.to_obj() for e in platform.processor.events(stream_id, since_seq=since)]

    # -- series -----------------------------------------------------------------------

    @app.get("/v1/series/raw")
    def series_raw(
        sensor: str, attribute: str, t0: int, t1: int,
        quality: Optional[str] = Query(default=None),
    ):
        rows = platform.store.query_raw(SeriesQuery(
            sensor_id=sensor, attribute=attribute, t0=t0, t1=t1, quality=quality,
        ))
        return [m.to_obj() for m in rows]

    @app.get("/v1/series/agg")
    def series_agg(
        sensor: str, attribute: str, t0: int, t1: int, fn: str, bucket: int,
        quality: Optional[str] = Query(default=None),
    ):
        fn_name = {"avg": "Avg", "min": "Min", "max": "Max", "sum": "Sum", "count": "Count"}.get(
            fn.lower(), fn,
        )
        buckets = platform.store.query_aggregate(SeriesQuery(
            sensor_id=sensor, attribute=attribute, t0=t0, t1=t1,
            bucket_ms=bucket, fn=fn_name, quality=quality,
        ))
        return [b.to_obj() for b in buckets]

    # -- users, groups, rules ------------------------------------------------------------

    @app.post("/v1/users", dependencies=[auth])
    def upsert_user(body: dict):
        profile = UserProfile(
            user_id=body["user_id"],
            demographics=dict(body.get("demographics", {})),
            preferences=set(body.get("preferences", [])),
            asserted_groups=set(body.get("asserted_groups", [])),
            gamer_type=body.get("gamer_type"),
            activity_locations=set(body.get("activity_locations", [])),
            webhook_url=body.get("webhook_url"),
        )
        return platform.recommender.upsert_profile(profile).to_obj()

    @app.get("/v1/users/{user_id}")
    def get_user(user_id: str):
        return platform.recommender.get_profile(user_id).to_obj()

    @app.post("/v1/groups", dependencies=[auth])
    def register_group(body: dict):
        if "manchester" in body:
            definition = parse_group_definition(body["manchester"])
        else:
            definition = GroupDefinition(
                name=body["name"],
                expression=ClassExpression.from_obj(body.get("expression", {})),
            )
        platform.recommender.register_group(definition)
        return definition.to_obj()

    @app.get("/v1/groups")
    def list_groups():
        return [g.to_obj() for g in platform.recommender.group_definitions()]

    @app.post("/v1/rules", dependencies=[auth])
    def register_rule(body: dict):
        platform.require_active_campaign(body.get("campaign_id"))
        rule = platform.recommender.register_rule(
            stream_id=body["stream_id"],
            comparator=body["comparator"],
            threshold=float(body["threshold"]),
            target_groups=set(body.get("target_groups", [])),
            kind=body["kind"],
            templates=dict(body.get("templates", {})),
            trigger=body.get("trigger", "Level"),
            cooldown_ms=body.get("cooldown_ms"),
            validation=body.get("validation"),
            involved_object_id=body.get("involved_object_id"),
            per_user_cooldown_ms=body.get("per_user_cooldown_ms"),
            n_required=int(body.get("n_required", platform.config.default_n_required)),
            preference_theme=body.get("preference_theme"),
            badge=body.get("badge"),
            expiry_ms=int(body.get("expiry_ms", platform.config.recommendation_expiry_ms)),
            campaign_id=body.get("campaign_id"),
        )
        return rule.to_obj()

    @app.get("/v1/rules")
    def list_rules():
        return [r.to_obj() for r in platform.recommender.rules()]

    @app.get("/v1/users/{user_id}/recommendations")
    def user_recommendations(user_id: str, state: Optional[str] = Query(default=None)):
        return [r.to_obj() for r in platform.recommender.poll(user_id, state=state)]

    @app.post("/v1/recommendations/{rec_id}/feedback", dependencies=[auth])
    def record_feedback(rec_id: str, body: dict):
        rec = platform.recommender.record_feedback(
            rec_id, body.get("response", "Accept"), answer=body.get("answer"),
        )
        return rec.to_obj()

    @app.post("/v1/recommendations/{rec_id}/validate", dependencies=[auth])
    def validate_task(rec_id: str):
        outcome = platform.recommender.validate_task(rec_id)
        return {"id": rec_id, "outcome": outcome, "state": platform.recommender.get_recommendation(rec_id).state}

    # -- queries and analyses --------------------------------------------------------------

    @app.post("/v1/queries", dependencies=[auth])
    def run_query(body: dict):
        ast = analytics_mod.parse_query(body)
        results = platform.analytics.execute_query(ast)
        return {"query": ast.to_obj(), "results": results}

    @app.post("/v1/analyses", dependencies=[auth])
    def run_analysis(body: dict):
        query = analytics_mod.parse_query(body["query"]) if body.get("query") else None
        result = platform.analytics.run_template(
            body["template_id"],
            body.get("config"),
            seed=int(body.get("seed", 0)),
            query=query,
        )
        return result.to_obj()

    @app.get("/v1/analyses/{result_id}")
    def get_analysis(result_id: str):
        return platform.analytics.get_result(result_id).to_obj()

    # -- documents ---------------------------------------------------------------------------

    @app.get("/v1/documents")
    def find_documents(
        class_term: Optional[str] = Query(default=None),
        limit: int = Query(default=100),
    ):
        docs = platform.fusion.find_documents(class_term=class_term)
        return [d.to_obj() for d in docs[-limit:]]

    @app.get("/v1/documents/count")
    def document_count(class_term: Optional[str] = Query(default=None)):
        return {"count": platform.fusion.document_count(class_term)}

    @app.post("/v1/documents/validate", dependencies=[auth])
    def validate_document(body: dict):
        doc = JsonLdDocument.from_obj(body)
        return {"violations": platform.fusion.validate(doc)}

    return app


def _parse_predicate_param(q: str):
    """Mini predicate syntax for GET /entities: 'co2>1000', 'located_in=office-12'."""
    for op in (">=", "<=", "!=", ">", "<", "="):
        if op in q:
            name, _, raw = q.partition(op)
            raw = raw.strip()
            value: object
            try:
                value = float(raw) if "." in raw else int(raw)
            except ValueError:
                value = raw
            return (name.strip(), op, value)
    return None
