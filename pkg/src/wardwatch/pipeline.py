"""Ingestion pipeline: wire readings in, persisted state changes out.

Glues the pieces together in one serialized path:

    submit() -> idempotence check -> validation -> readings log
             -> correlation -> events log -> rule engine -> effect logs

Between consecutive domain events the engine clock is advanced on a fixed
grid (default one tick per virtual second), so reminder alerts and timeouts
fire at deterministic instants during scenario playback. A lock serializes
submissions; the engine and correlator are not reentrant.

Every state change is also published to an in-memory live feed with a
gapless per-process sequence, which the gateway exposes over SSE.
"""

from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable

from .assets import shipped_scenario_text, shipped_workflow_names, shipped_workflow_text
from .correlation import CorrelationWindows, Correlator
from .engine import (
    AlertRequested,
    Engine,
    EngineConfig,
    GuardConfigError,
    InstanceAborted,
    InstanceAdvanced,
    InstanceCompleted,
    InstanceSpawned,
    ViolationCleared,
    ViolationOpened,
)
from .events import EQUIPMENT_USED, DomainEvent, SensorReading, stable_json
from .sim import ChannelModel, ScenarioScript, ScenarioSim, parse_scenario
from .store import Datastore
from .workflow_dsl import parse_document
from .workflow_model import CompiledWorkflow, compile_definition

logger = logging.getLogger(__name__)

TICK_INTERVAL_MS = 1000


def _wall_ms() -> int:
    return int(time.time() * 1000)


def load_shipped_workflows() -> list[CompiledWorkflow]:
    return [compile_definition(parse_document(shipped_workflow_text(n))) for n in shipped_workflow_names()]


class VirtualClock:
    """Mutable milliseconds source for deterministic received_at stamps."""

    def __init__(self, now_ms: int = 0):
        self.now_ms = now_ms

    def __call__(self) -> int:
        return self.now_ms


FEED_KINDS = ("reading", "event", "instance_update", "alert")


@dataclass(frozen=True)
class FeedItem:
    seq: int
    kind: str  # one of FEED_KINDS
    body: dict[str, Any]
    emitted_at: int

    def to_dict(self) -> dict[str, Any]:
        return {"sequence": self.seq, "kind": self.kind, "body": self.body, "emitted_at": self.emitted_at}


class LiveFeed:
    """In-memory change feed with a gapless, strictly increasing sequence.

    Sequence numbers are per process; a consumer that reconnects within the
    same process can resume exactly where it left off by passing the last
    seq it saw.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self._items: list[FeedItem] = []

    def publish(self, kind: str, body: dict[str, Any], emitted_at: int | None = None) -> FeedItem:
        if kind not in FEED_KINDS:
            raise ValueError(f"unknown feed kind {kind!r}")
        stamp = _wall_ms() if emitted_at is None else emitted_at
        with self._lock:
            item = FeedItem(seq=len(self._items) + 1, kind=kind, body=body, emitted_at=stamp)
            self._items.append(item)
            return item

    @property
    def last_seq(self) -> int:
        with self._lock:
            return len(self._items)

    def since(self, after: int, kinds: Iterable[str] | None = None) -> list[FeedItem]:
        """Items with seq > after, oldest first, optionally kind-filtered."""
        wanted = set(kinds) if kinds is not None else None
        with self._lock:
            tail = self._items[max(after, 0):]
        if wanted is None:
            return list(tail)
        return [item for item in tail if item.kind in wanted]


class AlertSink:
    """Delivery channel for raised alerts (push, SMS bridge, pager...).

    Implementations receive every alert exactly once, in persistence order,
    with delivery targets resolved. Must not raise.
    """

    def deliver(self, alert: dict[str, Any]) -> None:  # pragma: no cover - interface
        raise NotImplementedError


class LogFileAlertSink(AlertSink):
    """Default sink: appends one JSON line per delivered alert."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def deliver(self, alert: dict[str, Any]) -> None:
        line = stable_json({"targets": alert.get("delivery_targets", []), "alert": alert})
        with self.path.open("a", encoding="utf-8") as fh:
            fh.write(line + "\n")


@dataclass(frozen=True)
class SubmitOutcome:
    status: str  # accepted | duplicate | rejected
    reason: str = ""
    detail: str = ""
    events: tuple[DomainEvent, ...] = ()

    @property
    def accepted(self) -> bool:
        return self.status == "accepted"


class Pipeline:
    """One facility's ingestion path over a datastore."""

    def __init__(
        self,
        store: Datastore,
        workflows: Iterable[CompiledWorkflow] | None = None,
        engine_config: EngineConfig | None = None,
        windows: CorrelationWindows | None = None,
        tick_interval_ms: int = TICK_INTERVAL_MS,
        alert_sinks: Iterable[AlertSink] = (),
    ):
        if tick_interval_ms <= 0:
            raise ValueError(f"tick_interval_ms must be positive, got {tick_interval_ms}")
        self.store = store
        self.alert_sinks = list(alert_sinks)
        self.feed = LiveFeed()
        self.correlator = Correlator(
            registry=store.registry,
            windows=windows or CorrelationWindows(),
            on_unattributed=store.append_unattributed,
            on_audit=store.append_audit,
        )
        self.engine = Engine(
            store.registry,
            load_shipped_workflows() if workflows is None else workflows,
            config=engine_config,
            on_audit=store.append_audit,
        )
        self._lock = threading.RLock()
        self._tick_interval = tick_interval_ms
        self._next_tick = tick_interval_ms
        self._last_event_ts: int | None = None

    def submit(self, reading: SensorReading) -> SubmitOutcome:
        """Ingest one decoded reading; returns what happened to it."""
        with self._lock:
            if self.store.has_reading(reading.reading_url):
                return SubmitOutcome(status="duplicate", reason="duplicate_url", detail=reading.reading_url)
            verdict = self.correlator.validate_reading(reading, received_at=self.store.clock())
            if not verdict.ok:
                self.store.append_audit(
                    {"note": "reading_rejected", "reason": verdict.reason, "url": reading.reading_url}
                )
                return SubmitOutcome(status="rejected", reason=verdict.reason, detail=verdict.detail)
            self.store.append_reading(reading)
            self.feed.publish("reading", reading.to_wire(), emitted_at=self.store.clock())
            events = self.correlator.ingest_reading(reading)
            self._process_events(events)
            return SubmitOutcome(status="accepted", events=tuple(events))

    def finish(self) -> None:
        """Drain the correlation buffer and run the trailing clock grid."""
        with self._lock:
            self._process_events(self.correlator.close())
            if self._last_event_ts is not None:
                self._run_ticks(through=self._last_event_ts)

    def advance_clock(self, now_ms: int) -> None:
        """Run grid ticks up to and including now_ms (live operation)."""
        with self._lock:
            self._run_ticks(through=now_ms)

    # -- internals -----------------------------------------------------------

    def _process_events(self, events: list[DomainEvent]) -> None:
        for event in events:
            self._run_ticks(before=event.timestamp)
            self.store.append_event(event)
            self.feed.publish("event", event.to_dict(), emitted_at=self.store.clock())
            if event.kind == EQUIPMENT_USED and event.payload.get("verified"):
                self.store.record_package_consumed(event.payload["package_code"], at=event.timestamp)
            self._apply(self.engine.on_event(event))
            self._last_event_ts = event.timestamp

    def _run_ticks(self, before: int | None = None, through: int | None = None) -> None:
        limit = before if before is not None else through + 1
        while self._next_tick < limit:
            self._apply(self.engine.tick(self._next_tick))
            self._next_tick += self._tick_interval

    def _apply(self, effects) -> None:
        now = self.store.clock
        for effect in effects:
            if isinstance(effect, (InstanceSpawned, InstanceAdvanced, InstanceCompleted, InstanceAborted)):
                snapshot = self.engine.instance(effect.instance_id).to_dict()
                self.store.append_instance_snapshot(snapshot)
                self.feed.publish(
                    "instance_update", effect.to_dict() | {"instance": snapshot}, emitted_at=now()
                )
            elif isinstance(effect, (ViolationOpened, ViolationCleared)):
                violation = self.engine.violations[effect.violation_id].to_dict()
                self.store.append_violation_snapshot(violation)
                # blocking violations flip the instance between Active and
                # Violated without a separate instance effect
                instance = self.engine.instance(effect.instance_id).to_dict()
                self.store.append_instance_snapshot(instance)
                self.feed.publish(
                    "instance_update",
                    effect.to_dict() | {"instance": instance, "violation": violation},
                    emitted_at=now(),
                )
            elif isinstance(effect, AlertRequested):
                alert = effect.alert
                if alert.is_realert:
                    # reminder bumped the violation's counters; keep the log current
                    self.store.append_violation_snapshot(self.engine.violations[alert.violation_id].to_dict())
                self.store.append_alert(alert.to_dict())
                for sink in self.alert_sinks:
                    sink.deliver(alert.to_dict())
                self.feed.publish("alert", alert.to_dict(), emitted_at=now())
            elif isinstance(effect, GuardConfigError):
                self.store.append_audit(effect.to_dict() | {"note": "guard_config_error"})
            else:
                logger.warning("unhandled engine effect %r", effect)


@dataclass(frozen=True)
class PlaybackReport:
    """What a scenario run produced, for CLI output and tests."""

    scenario: str
    data_dir: str
    readings_delivered: int
    readings_accepted: int
    events: int
    instances_by_state: dict[str, int]
    alerts: int
    realerts: int
    violations_open: int
    violations_cleared: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "scenario": self.scenario,
            "data_dir": self.data_dir,
            "readings_delivered": self.readings_delivered,
            "readings_accepted": self.readings_accepted,
            "events": self.events,
            "instances_by_state": dict(self.instances_by_state),
            "alerts": self.alerts,
            "realerts": self.realerts,
            "violations_open": self.violations_open,
            "violations_cleared": self.violations_cleared,
        }


def seed_store_from_registry(store: Datastore, source) -> None:
    """Copy registry records from a built registry into the store's logs."""
    for room in source.rooms.values():
        store.register_room(room)
    ordered = sorted(source.devices.values(), key=lambda d: (d.node_class != "smart", d.sensor_id))
    for device in ordered:
        store.register_device(device)
    for person in source.persons.values():
        store.register_person(person)
    for user in source.users.values():
        store.register_user(user)
    for entry in source.sterilization_log.values():
        store.add_sterilized_package(entry)


def play_scenario(
    script: ScenarioScript,
    data_dir: str | Path,
    channel: ChannelModel | None = None,
    workflows: Iterable[CompiledWorkflow] | None = None,
    engine_config: EngineConfig | None = None,
    windows: CorrelationWindows | None = None,
    trace_path: str | Path | None = None,
    alert_sinks: Iterable[AlertSink] = (),
) -> PlaybackReport:
    """Run a scenario end to end into a fresh data directory.

    The store's receive clock follows the simulated delivery times, so two
    runs of the same scenario and channel produce byte-identical logs.
    """
    sim = ScenarioSim(script, channel)
    clock = VirtualClock()
    store = Datastore(data_dir, clock=clock)
    seed_store_from_registry(store, sim.registry)
    pipeline = Pipeline(
        store, workflows, engine_config=engine_config, windows=windows, alert_sinks=alert_sinks
    )

    delivered = 0
    accepted = 0
    trace_lines: list[str] = []
    while (delivery := sim.step()) is not None:
        delivered += 1
        clock.now_ms = delivery.delivered_at
        if trace_path is not None:
            trace_lines.append(delivery.trace_line())
        if pipeline.submit(delivery.reading).accepted:
            accepted += 1
    pipeline.finish()

    if trace_path is not None:
        Path(trace_path).write_text("".join(line + "\n" for line in trace_lines), encoding="utf-8")

    states: dict[str, int] = {}
    for snapshot in store.latest_instances():
        states[snapshot["state"]] = states.get(snapshot["state"], 0) + 1
    violations = store.latest_violations().values()
    alerts = store.alerts()
    return PlaybackReport(
        scenario=script.name,
        data_dir=str(data_dir),
        readings_delivered=delivered,
        readings_accepted=accepted,
        events=len(store.bodies("events")),
        instances_by_state=states,
        alerts=sum(1 for a in alerts if not a["is_realert"]),
        realerts=sum(1 for a in alerts if a["is_realert"]),
        violations_open=sum(1 for v in violations if v["cleared_at"] is None),
        violations_cleared=sum(1 for v in violations if v["cleared_at"] is not None),
    )


def play_shipped_scenario(name: str, data_dir: str | Path, **kwargs) -> PlaybackReport:
    return play_scenario(parse_scenario(shipped_scenario_text(name)), data_dir, **kwargs)
