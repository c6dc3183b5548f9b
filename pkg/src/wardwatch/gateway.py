"""HTTP gateway: ingestion, queries, live feed, workflow upload, sim control.

Auth is static bearer tokens from a JSON file. Two token classes exist:
user tokens (resolved to a registered user and their access role) and
ingest tokens (room node uplinks posting readings). Role gates:

    administrator   everything: registry, workflows, alerts, instances,
                    stats, contacts, live feed, simulator control, flush
    epidemiologist  stats, contacts, full live feed
    clinical        own alerts and an own-alerts-only live feed
    ingest token    POST /api/readings only

All mutation funnels through the pipeline's serialized submit path; query
endpoints read the datastore directly. The live feed is exposed as
server-sent events with per-process gapless sequence numbers and resume
via Last-Event-ID or ?after=.
"""

from __future__ import annotations

import asyncio
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from fastapi import Depends, FastAPI, Header, HTTPException, Query, Request
from fastapi.responses import JSONResponse, StreamingResponse
from fastapi.staticfiles import StaticFiles

from .engine import EngineConfigError
from .events import WireFormatError, reading_from_wire, stable_json
from .pipeline import Pipeline, seed_store_from_registry
from .registry import (
    DeviceRecord,
    PersonRecord,
    RegistryError,
    RoomRecord,
    SterilizationLogEntry,
    UserRecord,
)
from .sim import ChannelModel, ScenarioError, ScenarioSim, parse_scenario
from .store import DanglingReferenceError
from .workflow_dsl import WorkflowParseError, parse_document
from .workflow_model import CompileError, compile_definition, validate_definition

logger = logging.getLogger(__name__)

SSE_POLL_S = 0.15
SSE_HEARTBEAT_S = 15.0


@dataclass(frozen=True)
class Principal:
    """Resolved caller identity: either a user or a node ingest credential."""

    kind: str  # "user" | "ingest"
    user_id: str | None = None
    role: str | None = None

    @property
    def is_admin(self) -> bool:
        return self.role == "administrator"


class TokenStore:
    """Static bearer tokens: {"users": {token: user_id}, "ingest": [token, ...]}."""

    def __init__(self, user_tokens: dict[str, str] | None = None, ingest_tokens: list[str] | None = None):
        self.user_tokens = dict(user_tokens or {})
        self.ingest_tokens = list(ingest_tokens or [])

    @classmethod
    def load(cls, path: str | Path) -> "TokenStore":
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(user_tokens=raw.get("users", {}), ingest_tokens=raw.get("ingest", []))

    def save(self, path: str | Path) -> None:
        payload = {"users": self.user_tokens, "ingest": self.ingest_tokens}
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def add_user_token(self, token: str, user_id: str) -> None:
        self.user_tokens[token] = user_id

    def add_ingest_token(self, token: str) -> None:
        if token not in self.ingest_tokens:
            self.ingest_tokens.append(token)


def create_app(
    pipeline: Pipeline,
    tokens: TokenStore,
    static_dir: str | Path | None = None,
    sse_poll_s: float = SSE_POLL_S,
    sse_heartbeat_s: float = SSE_HEARTBEAT_S,
) -> FastAPI:
    app = FastAPI(title="wardwatch gateway", docs_url=None, redoc_url=None)
    store = pipeline.store
    state: dict[str, Any] = {"sim": None}

    # -- auth ----------------------------------------------------------------

    def resolve_principal(authorization: str | None) -> Principal:
        if not authorization or not authorization.startswith("Bearer "):
            raise HTTPException(status_code=401, detail="missing bearer token")
        token = authorization.removeprefix("Bearer ").strip()
        if token in tokens.ingest_tokens:
            return Principal(kind="ingest")
        user_id = tokens.user_tokens.get(token)
        if user_id is None:
            raise HTTPException(status_code=401, detail="unknown token")
        user = store.registry.users.get(user_id)
        if user is None or not user.active:
            raise HTTPException(status_code=401, detail="token bound to unknown or inactive user")
        return Principal(kind="user", user_id=user.user_id, role=user.role)

    def principal(authorization: str | None = Header(default=None)) -> Principal:
        return resolve_principal(authorization)

    def require_roles(caller: Principal, *roles: str) -> None:
        if caller.kind != "user" or caller.role not in roles:
            raise HTTPException(status_code=403, detail="insufficient role")

    def own_person_id(caller: Principal) -> str | None:
        user = store.registry.users.get(caller.user_id or "")
        return user.person_id if user else None

    def parse_ms(value: str | None, name: str) -> int | None:
        if value is None or value == "":
            return None
        try:
            return int(value)
        except ValueError:
            raise HTTPException(status_code=400, detail=f"{name} must be integer milliseconds") from None

    # -- health --------------------------------------------------------------

    @app.get("/api/healthz")
    def healthz() -> dict[str, Any]:
        return {"ok": True, "feed_sequence": pipeline.feed.last_seq}

    # -- ingestion -----------------------------------------------------------

    @app.post("/api/readings", status_code=202)
    def post_reading(raw: dict, caller: Principal = Depends(principal)) -> dict[str, Any]:
        if caller.kind != "ingest":
            raise HTTPException(status_code=403, detail="reading ingestion requires a node token")
        try:
            reading = reading_from_wire(raw)
        except WireFormatError as exc:
            raise HTTPException(status_code=400, detail={"field": exc.field, "message": str(exc)})
        outcome = pipeline.submit(reading)
        if outcome.status == "duplicate":
            raise HTTPException(status_code=409, detail={"url": reading.reading_url})
        if outcome.status == "rejected":
            raise HTTPException(status_code=422, detail={"reason": outcome.reason, "message": outcome.detail})
        return {"accepted": True, "url": reading.reading_url, "events": len(outcome.events)}

    @app.post("/api/flush")
    def flush(caller: Principal = Depends(principal)) -> dict[str, Any]:
        require_roles(caller, "administrator")
        pipeline.finish()
        return {"flushed": True}

    # -- queries -------------------------------------------------------------

    @app.get("/api/alerts")
    def get_alerts(
        caller: Principal = Depends(principal),
        person: str | None = None,
        workflow: str | None = None,
        from_: str | None = Query(default=None, alias="from"),
        to: str | None = None,
        include_realerts: bool = True,
        limit: int = Query(default=100, ge=1, le=1000),
        offset: int = Query(default=0, ge=0),
    ) -> dict[str, Any]:
        require_roles(caller, "administrator", "clinical")
        if caller.role == "clinical":
            own = own_person_id(caller)
            if person is None:
                person = own
            elif person != own:
                raise HTTPException(status_code=403, detail="clinical users see only their own alerts")
        rows = store.alerts(
            from_ms=parse_ms(from_, "from"),
            to_ms=parse_ms(to, "to"),
            person=person,
            workflow=workflow,
            include_realerts=include_realerts,
        )
        return {"alerts": rows[offset : offset + limit], "total": len(rows), "offset": offset, "limit": limit}

    @app.get("/api/instances")
    def get_instances(
        caller: Principal = Depends(principal), state: str | None = None
    ) -> dict[str, Any]:
        require_roles(caller, "administrator")
        rows = store.latest_instances()
        if state is not None:
            rows = [r for r in rows if r["state"] == state]
        return {"instances": rows}

    @app.get("/api/stats")
    def get_stats(
        caller: Principal = Depends(principal),
        group_by: str = "user",
        from_: str | None = Query(default=None, alias="from"),
        to: str | None = None,
    ) -> dict[str, Any]:
        require_roles(caller, "administrator", "epidemiologist")
        try:
            rows = store.aggregate_alert_stats(
                group_by, from_ms=parse_ms(from_, "from"), to_ms=parse_ms(to, "to")
            )
        except ValueError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        return {"group_by": group_by, "rows": rows}

    @app.get("/api/contacts")
    def get_contacts(
        caller: Principal = Depends(principal),
        from_: str | None = Query(default=None, alias="from"),
        to: str | None = None,
    ) -> dict[str, Any]:
        require_roles(caller, "administrator", "epidemiologist")
        edges = store.build_contact_network(from_ms=parse_ms(from_, "from"), to_ms=parse_ms(to, "to"))
        return {"edges": [edge.to_dict() for edge in edges]}

    @app.get("/api/events")
    def get_events(
        caller: Principal = Depends(principal),
        kind: str | None = None,
        room: str | None = None,
        from_: str | None = Query(default=None, alias="from"),
        to: str | None = None,
    ) -> dict[str, Any]:
        require_roles(caller, "administrator")
        rows = store.events(
            from_ms=parse_ms(from_, "from"), to_ms=parse_ms(to, "to"), kind=kind, room=room
        )
        return {"events": rows}

    # -- workflow upload -----------------------------------------------------

    @app.get("/api/workflows")
    def list_workflows(caller: Principal = Depends(principal)) -> dict[str, Any]:
        require_roles(caller, "administrator")
        rows = [
            {"workflow_id": wf.definition.workflow_id, "version": wf.definition.version, "name": wf.definition.name}
            for wf in pipeline.engine.workflows.values()
        ]
        return {"workflows": sorted(rows, key=lambda r: (r["workflow_id"], r["version"]))}

    @app.post("/api/workflows", status_code=201)
    def upload_workflow(body: dict, caller: Principal = Depends(principal)) -> dict[str, Any]:
        require_roles(caller, "administrator")
        text = body.get("text")
        if not isinstance(text, str) or not text.strip():
            raise HTTPException(status_code=400, detail="body must carry the document in 'text'")
        try:
            definition = parse_document(text)
        except WorkflowParseError as exc:
            raise HTTPException(
                status_code=422,
                detail={"findings": [{"code": "parse_error", "message": str(exc), "where": f"line {exc.line}"}]},
            )
        findings = validate_definition(definition)
        if findings:
            raise HTTPException(
                status_code=422,
                detail={
                    "findings": [
                        {"code": f.code, "message": f.message, "where": f.where} for f in findings
                    ]
                },
            )
        try:
            compiled = compile_definition(definition)
            pipeline.engine.add_workflow(compiled)
        except (CompileError, EngineConfigError) as exc:
            raise HTTPException(
                status_code=422,
                detail={"findings": [{"code": "compile_error", "message": str(exc), "where": ""}]},
            )
        return {
            "workflow_id": definition.workflow_id,
            "version": definition.version,
            "findings": [],
        }

    # -- registry ------------------------------------------------------------

    @app.get("/api/registry")
    def get_registry(caller: Principal = Depends(principal)) -> dict[str, Any]:
        require_roles(caller, "administrator")
        reg = store.registry
        return {
            "rooms": [r.to_dict() for r in reg.rooms.values()],
            "persons": [p.to_dict() for p in reg.persons.values()],
            "users": [u.to_dict() for u in reg.users.values()],
            "devices": [d.to_dict() for d in reg.devices.values()],
            "sterilization_log": [e.to_dict() for e in reg.sterilization_log.values()],
        }

    REGISTRY_KINDS = {
        "rooms": (RoomRecord, store.register_room),
        "persons": (PersonRecord, store.register_person),
        "users": (UserRecord, store.register_user),
        "devices": (DeviceRecord, store.register_device),
        "packages": (SterilizationLogEntry, store.add_sterilized_package),
    }

    @app.post("/api/registry/{record_kind}", status_code=201)
    def post_registry(record_kind: str, body: dict, caller: Principal = Depends(principal)) -> dict[str, Any]:
        require_roles(caller, "administrator")
        entry = REGISTRY_KINDS.get(record_kind)
        if entry is None:
            raise HTTPException(status_code=404, detail=f"unknown registry collection {record_kind!r}")
        record_cls, register = entry
        try:
            record = record_cls(**body)
        except TypeError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        try:
            register(record)
        except RegistryError as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        return {"registered": record.to_dict()}

    # -- live feed (SSE) -------------------------------------------------------

    def feed_items_for(caller: Principal, after: int) -> list:
        items = pipeline.feed.since(after)
        if caller.role == "clinical":
            items = [
                item
                for item in items
                if item.kind == "alert" and caller.user_id in item.body.get("delivery_targets", [])
            ]
        return items

    @app.get("/api/live")
    async def live(
        request: Request,
        caller: Principal = Depends(principal),
        after: int | None = Query(default=None, ge=0),
        last_event_id: str | None = Header(default=None, alias="Last-Event-ID"),
    ) -> StreamingResponse:
        require_roles(caller, "administrator", "epidemiologist", "clinical")
        cursor = after
        if cursor is None and last_event_id is not None:
            try:
                cursor = int(last_event_id)
            except ValueError:
                raise HTTPException(status_code=400, detail="Last-Event-ID must be an integer")
        if cursor is None:
            cursor = pipeline.feed.last_seq  # live tail only

        async def stream():
            seen = cursor
            idle = 0.0
            yield ": connected\n\n"
            while True:
                if await request.is_disconnected():
                    return
                items = feed_items_for(caller, seen)
                if items:
                    idle = 0.0
                    for item in items:
                        seen = max(seen, item.seq)
                        payload = stable_json(item.to_dict())
                        yield f"id: {item.seq}\nevent: {item.kind}\ndata: {payload}\n\n"
                else:
                    idle += sse_poll_s
                    if idle >= sse_heartbeat_s:
                        idle = 0.0
                        yield ": heartbeat\n\n"
                    await asyncio.sleep(sse_poll_s)

        return StreamingResponse(
            stream(),
            media_type="text/event-stream",
            headers={"Cache-Control": "no-cache", "X-Accel-Buffering": "no"},
        )

    # -- simulator control -----------------------------------------------------

    def current_sim() -> "SimSession":
        session = state["sim"]
        if session is None:
            raise HTTPException(status_code=409, detail="no scenario loaded")
        return session

    @app.get("/api/sim")
    def sim_status(caller: Principal = Depends(principal)) -> dict[str, Any]:
        require_roles(caller, "administrator")
        session = state["sim"]
        return {"loaded": session is not None, **({} if session is None else session.status())}

    @app.post("/api/sim/load")
    def sim_load(body: dict, caller: Principal = Depends(principal)) -> dict[str, Any]:
        require_roles(caller, "administrator")
        text = body.get("text")
        name = body.get("scenario")
        if text is None and name is None:
            raise HTTPException(status_code=400, detail="pass 'scenario' (shipped name) or 'text'")
        if text is None:
            from .assets import shipped_scenario_names, shipped_scenario_text

            if name not in shipped_scenario_names():
                raise HTTPException(status_code=404, detail=f"unknown scenario {name!r}")
            text = shipped_scenario_text(name)
        try:
            script = parse_scenario(text)
            channel = ChannelModel(seed=int(body.get("seed", 0)))
            session = SimSession(pipeline, script, channel)
        except ScenarioError as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        except RegistryError as exc:
            raise HTTPException(status_code=409, detail=f"registry conflict: {exc}")
        state["sim"] = session
        return session.status()

    @app.post("/api/sim/step")
    def sim_step(body: dict | None = None, caller: Principal = Depends(principal)) -> dict[str, Any]:
        require_roles(caller, "administrator")
        count = int((body or {}).get("count", 1))
        if count < 1:
            raise HTTPException(status_code=400, detail="count must be >= 1")
        deliveries = current_sim().step(count)
        return {"deliveries": deliveries, **current_sim().status()}

    @app.post("/api/sim/run")
    def sim_run(caller: Principal = Depends(principal)) -> dict[str, Any]:
        require_roles(caller, "administrator")
        session = current_sim()
        deliveries = session.drain()
        pipeline.finish()
        return {"deliveries": deliveries, **session.status()}

    @app.post("/api/sim/inject")
    def sim_inject(body: dict, caller: Principal = Depends(principal)) -> dict[str, Any]:
        require_roles(caller, "administrator")
        session = current_sim()
        try:
            deliveries = session.inject(
                kind=body.get("kind", ""),
                person=body.get("person"),
                room=body.get("room"),
                item=body.get("item"),
            )
        except ScenarioError as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        return {"deliveries": deliveries, **session.status()}

    # -- error normalization ---------------------------------------------------

    @app.exception_handler(DanglingReferenceError)
    def dangling_handler(request: Request, exc: DanglingReferenceError) -> JSONResponse:
        return JSONResponse(status_code=422, content={"detail": str(exc)})

    if static_dir is not None and Path(static_dir).is_dir():
        app.mount("/", StaticFiles(directory=str(static_dir), html=True), name="console")

    return app


class SimSession:
    """One interactive scenario run bound to a live pipeline.

    Loading seeds the scenario's registry records into the datastore, so a
    session expects a store without conflicting ids (fresh directories in
    practice) and raises RegistryError otherwise.
    """

    def __init__(self, pipeline: Pipeline, script, channel: ChannelModel):
        self.pipeline = pipeline
        self.sim = ScenarioSim(script, channel)
        self.script = script
        self.delivered_count = 0
        seed_store_from_registry(pipeline.store, self.sim.registry)

    def status(self) -> dict[str, Any]:
        return {
            "scenario": self.script.name,
            "virtual_now": self.sim.virtual_now,
            "next_delivery_at": self.sim.peek(),
            "delivered": self.delivered_count,
            "exhausted": self.sim.peek() is None,
            "rooms": [
                {"room_id": r.room_id, "kind": r.kind, "kit": r.kit} for r in self.script.rooms
            ],
            "cast": [
                {"person_id": p.person_id, "role": p.role, "badge": p.badge}
                for p in self.script.persons
            ],
        }

    def _deliver_one(self) -> dict[str, Any] | None:
        delivery = self.sim.step()
        if delivery is None:
            return None
        outcome = self.pipeline.submit(delivery.reading)
        self.delivered_count += 1
        return {
            "delivered_at": delivery.delivered_at,
            "reading": delivery.reading.to_wire(),
            "outcome": outcome.status,
            "events": [e.kind for e in outcome.events],
        }

    def step(self, count: int = 1) -> list[dict[str, Any]]:
        out = []
        for _ in range(count):
            item = self._deliver_one()
            if item is None:
                break
            out.append(item)
        return out

    def drain(self) -> list[dict[str, Any]]:
        out = []
        while (item := self._deliver_one()) is not None:
            out.append(item)
        return out

    def inject(
        self,
        kind: str,
        person: str | None = None,
        room: str | None = None,
        item: str | None = None,
    ) -> list[dict[str, Any]]:
        """Splice an action in now and pump its firings through the pipeline."""
        times = self.sim.inject(kind, person=person, room=room, item=item)
        if not times:
            return []
        horizon = max(times)
        out = []
        while (peek := self.sim.peek()) is not None and peek <= horizon:
            delivered = self._deliver_one()
            if delivered is None:
                break
            out.append(delivered)
        return out
