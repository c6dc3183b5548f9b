"""Workflow execution: spawning, advancement, guards, violations, alerts.

The engine is a single-writer state machine. It consumes one serialized
stream of domain events plus injected clock ticks, and emits effects
(spawns, advancements, violations, alert requests, completions) that
downstream consumers persist and deliver. Given the same starting state
and the same input sequence it produces the same effect sequence.

Semantics in brief:

* A trigger match spawns one instance per episode owner and room kind;
  the triggering event is immediately offered to the fresh instance.
* A guarded node's prerequisite is satisfied when a matching event by the
  bound person exists within the guard window before the guarded event
  (boundaries inclusive) and after that person's most recent patient
  contact (an examination they performed).
* A failed guard opens a violation and requests an alert. Policy "block"
  suspends the instance until the corrective event clears it; policy
  "continue" records the breach and advances anyway, so later checkpoints
  in the same run still fire. Either way the violation stays open, and
  correctable, until its corrective event arrives.
* Clock ticks re-alert on every open violation at a fixed interval
  (stopping only when the owning instance aborts), abort instances idle
  past the timeout, and abort instances whose wait node carries an
  expired deadline.
* Optionally, a person entering a room mid-episode while not bound in the
  running instance gets an auxiliary hygiene-check instance of their own.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable

from .events import (
    EXAMINATION_STARTED,
    HAND_HYGIENE_PERFORMED,
    PATIENT_ON_TABLE,
    PERSON_ENTERED,
    PERSON_EXITED,
    DomainEvent,
)
from .registry import Registry
from .workflow_model import (
    DEFAULT_GUARD_WINDOW_S,
    OTHERWISE,
    CompiledWorkflow,
    EventPattern,
    GuardSpec,
    NodeKind,
    Transition,
    ViolationPolicy,
    WorkflowDefinition,
    WorkflowNode,
    compile_definition,
    evaluate_condition,
    payload_matches,
)

logger = logging.getLogger(__name__)

# Instance lifecycle states.
ACTIVE = "Active"
VIOLATED = "Violated"
COMPLETED = "Completed"
ABORTED = "Aborted"

# Which sensor an alert points at, keyed by the guard's missing event kind.
# The alert names the device whose expected activation did not happen.
ALERT_DEVICE_BY_KIND = {
    "HandHygienePerformed": "soap_dispenser",
    "GlovesEquipped": "glove_dispenser",
    "EquipmentUsed": "barcode_reader",
    "SurfaceDisinfected": "spray_holder",
    "PersonAtSink": "sink_antenna",
    "PersonEntered": "door_antenna",
    "PersonExited": "door_antenna",
    "ExaminationStarted": "thermal_array",
    "PatientOnTable": "table_infrared",
}

ALERT_DESCRIPTION = (
    "{workflow}: {required} by {person} missing within {window}s before {anchor} in {room}"
)
REALERT_DESCRIPTION = "{workflow}: reminder {count}, still awaiting {required} by {person} in {room}"

AUX_WORKFLOW_ID = "external_person_hygiene"


class EngineConfigError(ValueError):
    """Engine construction rejected (bad interval, empty template, dup key)."""


@dataclass(frozen=True)
class EngineConfig:
    """Timing knobs and feature flags for one engine run.

    Guard windows live on the workflow documents; these are the knobs the
    documents leave open.
    """

    realert_interval_s: float = 60.0
    instance_timeout_s: float = 7200.0
    external_person_spawn: bool = True
    alert_template: str = ALERT_DESCRIPTION
    realert_template: str = REALERT_DESCRIPTION

    def __post_init__(self) -> None:
        if self.realert_interval_s <= 0:
            raise EngineConfigError("realert interval must be positive")
        if self.instance_timeout_s <= 0:
            raise EngineConfigError("instance timeout must be positive")
        if not self.alert_template.strip() or not self.realert_template.strip():
            raise EngineConfigError("alert description templates must be non-empty")


# ---------------------------------------------------------------------------
# Records
# ---------------------------------------------------------------------------


@dataclass
class WorkflowInstance:
    """One execution of a workflow definition, single current node."""

    instance_id: str
    workflow_id: str
    version: int
    room: str
    state: str = ACTIVE
    current_node: str = ""
    bindings: dict[str, str] = field(default_factory=dict)
    memory: dict[str, str] = field(default_factory=dict)
    # each entry: {"event": event id or None, "from": node, "to": node}
    history: list[dict[str, Any]] = field(default_factory=list)
    created_at: int = 0
    updated_at: int = 0
    node_entered_at: int = 0
    open_violation: str | None = None
    episode_started: bool = False
    auxiliary: bool = False

    @property
    def workflow_key(self) -> tuple[str, int]:
        return (self.workflow_id, self.version)

    def to_dict(self) -> dict[str, Any]:
        return {
            "instance_id": self.instance_id,
            "workflow_id": self.workflow_id,
            "version": self.version,
            "room": self.room,
            "state": self.state,
            "current_node": self.current_node,
            "bindings": dict(self.bindings),
            "memory": dict(self.memory),
            "history": [dict(h) for h in self.history],
            "created_at": self.created_at,
            "updated_at": self.updated_at,
            "open_violation": self.open_violation,
            "auxiliary": self.auxiliary,
        }


@dataclass
class Violation:
    """An open or cleared guard breach, the unit re-alerts hang off."""

    violation_id: str
    instance_id: str
    workflow_id: str
    node_id: str
    required_kind: str
    responsible_person: str
    violating_event: str
    opened_at: int
    policy: str
    cleared_at: int | None = None
    realert_count: int = 0
    last_alert_at: int = 0

    def to_dict(self) -> dict[str, Any]:
        return {
            "violation_id": self.violation_id,
            "instance_id": self.instance_id,
            "workflow_id": self.workflow_id,
            "node_id": self.node_id,
            "required_kind": self.required_kind,
            "responsible_person": self.responsible_person,
            "violating_event": self.violating_event,
            "opened_at": self.opened_at,
            "policy": self.policy,
            "cleared_at": self.cleared_at,
            "realert_count": self.realert_count,
        }


@dataclass(frozen=True)
class Alert:
    """One notification: who breached what, where, and which device saw it."""

    alert_id: str
    workflow_id: str
    instance_id: str
    violation_id: str
    device: str
    person: str
    room: str
    timestamp: int
    description: str
    delivery_targets: tuple[str, ...]
    is_realert: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {
            "alert_id": self.alert_id,
            "workflow_id": self.workflow_id,
            "instance_id": self.instance_id,
            "violation_id": self.violation_id,
            "device": self.device,
            "person": self.person,
            "room": self.room,
            "timestamp": self.timestamp,
            "description": self.description,
            "delivery_targets": list(self.delivery_targets),
            "is_realert": self.is_realert,
        }


# ---------------------------------------------------------------------------
# Effects
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EngineEffect:
    def to_dict(self) -> dict[str, Any]:  # pragma: no cover - overridden
        raise NotImplementedError


@dataclass(frozen=True)
class InstanceSpawned(EngineEffect):
    instance_id: str
    workflow_id: str
    version: int
    room: str
    bindings: tuple[tuple[str, str], ...]
    at: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "effect": "instance_spawned",
            "instance_id": self.instance_id,
            "workflow_id": self.workflow_id,
            "version": self.version,
            "room": self.room,
            "bindings": dict(self.bindings),
            "at": self.at,
        }


@dataclass(frozen=True)
class InstanceAdvanced(EngineEffect):
    instance_id: str
    from_node: str
    to_node: str
    event_id: str | None
    at: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "effect": "instance_advanced",
            "instance_id": self.instance_id,
            "from_node": self.from_node,
            "to_node": self.to_node,
            "event_id": self.event_id,
            "at": self.at,
        }


@dataclass(frozen=True)
class ViolationOpened(EngineEffect):
    violation_id: str
    instance_id: str
    node_id: str
    responsible_person: str
    at: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "effect": "violation_opened",
            "violation_id": self.violation_id,
            "instance_id": self.instance_id,
            "node_id": self.node_id,
            "responsible_person": self.responsible_person,
            "at": self.at,
        }


@dataclass(frozen=True)
class ViolationCleared(EngineEffect):
    violation_id: str
    instance_id: str
    event_id: str
    at: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "effect": "violation_cleared",
            "violation_id": self.violation_id,
            "instance_id": self.instance_id,
            "event_id": self.event_id,
            "at": self.at,
        }


@dataclass(frozen=True)
class AlertRequested(EngineEffect):
    alert: Alert

    def to_dict(self) -> dict[str, Any]:
        return {"effect": "alert_requested", "alert": self.alert.to_dict()}


@dataclass(frozen=True)
class InstanceCompleted(EngineEffect):
    instance_id: str
    at: int

    def to_dict(self) -> dict[str, Any]:
        return {"effect": "instance_completed", "instance_id": self.instance_id, "at": self.at}


@dataclass(frozen=True)
class InstanceAborted(EngineEffect):
    instance_id: str
    at: int
    reason: str

    def to_dict(self) -> dict[str, Any]:
        return {
            "effect": "instance_aborted",
            "instance_id": self.instance_id,
            "at": self.at,
            "reason": self.reason,
        }


@dataclass(frozen=True)
class GuardConfigError(EngineEffect):
    instance_id: str
    node_id: str
    detail: str

    def to_dict(self) -> dict[str, Any]:
        return {
            "effect": "guard_config_error",
            "instance_id": self.instance_id,
            "node_id": self.node_id,
            "detail": self.detail,
        }


@dataclass(frozen=True)
class GuardVerdict:
    satisfied: bool
    responsible: str | None
    config_error: str | None = None


# ---------------------------------------------------------------------------
# Auxiliary workflow for persons entering mid-episode
# ---------------------------------------------------------------------------


def auxiliary_definition() -> WorkflowDefinition:
    """Hygiene check spawned for an unbound person entering mid-episode.

    Pre-bound at spawn time (newcomer and the episode's patient), so its
    trigger is never pattern-matched; it exists to satisfy the model.
    """
    guard = GuardSpec(
        required_event=EventPattern(kind=HAND_HYGIENE_PERFORMED, subject_role="newcomer"),
        by_role="newcomer",
        window_s=DEFAULT_GUARD_WINDOW_S,
        on_violation=ViolationPolicy.CONTINUE,
    )
    nodes = (
        WorkflowNode(node_id="start", kind=NodeKind.START),
        WorkflowNode(
            node_id="hygiene_checkpoint",
            kind=NodeKind.GUARDED,
            pattern=EventPattern(kind=PERSON_EXITED, subject_role="patient"),
            guard=guard,
        ),
        WorkflowNode(node_id="done", kind=NodeKind.END),
    )
    transitions = (
        Transition("start", "hygiene_checkpoint"),
        Transition("hygiene_checkpoint", "done"),
    )
    return WorkflowDefinition(
        workflow_id=AUX_WORKFLOW_ID,
        name="External person hygiene check",
        version=1,
        location_scope="any",
        role_bindings=("newcomer", "patient"),
        trigger=EventPattern(kind=PERSON_ENTERED, subject_role="newcomer"),
        nodes=nodes,
        transitions=transitions,
    )


# ---------------------------------------------------------------------------
# Engine
# ---------------------------------------------------------------------------


class Engine:
    """Executes compiled workflows against the serialized event stream."""

    def __init__(
        self,
        registry: Registry,
        workflows: Iterable[CompiledWorkflow],
        config: EngineConfig | None = None,
        on_audit: Callable[[dict[str, Any]], None] | None = None,
    ):
        self.registry = registry
        self.config = config or EngineConfig()
        self.on_audit = on_audit
        self.workflows: dict[tuple[str, int], CompiledWorkflow] = {}
        for wf in workflows:
            if wf.key in self.workflows:
                raise EngineConfigError(f"duplicate workflow {wf.key}")
            self.workflows[wf.key] = wf
        self._aux = compile_definition(auxiliary_definition())
        self.instances: dict[str, WorkflowInstance] = {}
        self.violations: dict[str, Violation] = {}
        self._timeline: list[DomainEvent] = []
        self._instance_seq = 0
        self._violation_seq = 0
        self._alert_seq = 0

    # -- public query surface ------------------------------------------------

    def instance(self, instance_id: str) -> WorkflowInstance | None:
        return self.instances.get(instance_id)

    def snapshot(self) -> list[dict[str, Any]]:
        return [inst.to_dict() for inst in self.instances.values()]

    def open_violations(self) -> list[Violation]:
        return [v for v in self.violations.values() if v.cleared_at is None]

    # -- event intake ----------------------------------------------------------

    def on_event(self, event: DomainEvent) -> list[EngineEffect]:
        if event.room not in self.registry.rooms:
            logger.warning("event %s references unknown room %r", event.event_id, event.room)
            self._audit("unknown_room", {"event": event.event_id, "room": event.room})
            return []
        self._timeline.append(event)

        effects: list[EngineEffect] = []
        for instance in list(self.instances.values()):
            if instance.state == VIOLATED:
                effects.extend(self._try_corrective(instance, event))
            elif instance.state == ACTIVE:
                effects.extend(self._offer(instance, event))

        effects.extend(self._clear_nonblocking(event))
        effects.extend(self._spawn_on_trigger(event))
        if self.config.external_person_spawn and event.kind == PERSON_ENTERED:
            effects.extend(self.spawn_on_external_entry(event))
        return effects

    def tick(self, now: int) -> list[EngineEffect]:
        """Clock edge: re-alerts, idle timeouts, wait-node deadlines."""
        effects: list[EngineEffect] = []
        realert_ms = int(self.config.realert_interval_s * 1000)
        timeout_ms = int(self.config.instance_timeout_s * 1000)
        for violation in list(self.violations.values()):
            if violation.cleared_at is not None:
                continue
            instance = self.instances[violation.instance_id]
            if instance.state == ABORTED:
                continue
            if now - violation.last_alert_at >= realert_ms:
                violation.realert_count += 1
                violation.last_alert_at = now
                node = self._compiled(instance).node(violation.node_id)
                effects.append(
                    AlertRequested(self._assemble_alert(instance, node, violation, at=now, is_realert=True))
                )
        for instance in list(self.instances.values()):
            if instance.state in (ACTIVE, VIOLATED):
                if now - instance.updated_at >= timeout_ms:
                    effects.append(self._abort(instance, now, "idle_timeout"))
                    continue
            if instance.state == ACTIVE:
                node = self._compiled(instance).node(instance.current_node)
                if (
                    node.kind is NodeKind.EVENT_WAIT
                    and node.deadline_s is not None
                    and now - instance.node_entered_at >= int(node.deadline_s * 1000)
                ):
                    effects.append(self._abort(instance, now, "deadline_exceeded"))
        return effects

    # -- guard evaluation -----------------------------------------------------

    def evaluate_guard(
        self,
        instance: WorkflowInstance,
        guard: GuardSpec,
        at_event: DomainEvent,
        extra_bindings: dict[str, str] | None = None,
    ) -> GuardVerdict:
        """Check the prerequisite behind a guarded node.

        Satisfied when a matching event exists in [t - window, t] (both ends
        inclusive, the guarded event itself counts) performed by the bound
        person, and dated after that person's most recent patient contact.
        """
        bindings = dict(instance.bindings)
        if extra_bindings:
            bindings.update(extra_bindings)
        responsible = bindings.get(guard.by_role)
        if responsible is None:
            return GuardVerdict(False, None, config_error=f"role {guard.by_role!r} unbound")

        t_at = at_event.timestamp
        floor = t_at - int(guard.window_s * 1000)
        last_contact = self._last_patient_contact(responsible, before=t_at)
        required = guard.required_event
        for candidate in reversed(self._timeline):
            if candidate.timestamp > t_at:
                continue
            if candidate.timestamp < floor:
                break
            if candidate.kind != required.kind:
                continue
            if required.subject_role is not None and candidate.subject != responsible:
                continue
            if not self._room_ok(required, instance, candidate):
                continue
            if not payload_matches(required, candidate.payload):
                continue
            if last_contact is not None and candidate.timestamp <= last_contact:
                continue
            return GuardVerdict(True, responsible)
        return GuardVerdict(False, responsible)

    def _last_patient_contact(self, person: str, before: int) -> int | None:
        latest: int | None = None
        for event in self._timeline:
            if (
                event.kind == EXAMINATION_STARTED
                and event.subject == person
                and event.timestamp < before
            ):
                latest = event.timestamp if latest is None else max(latest, event.timestamp)
        return latest

    # -- spawning ---------------------------------------------------------------

    def add_workflow(self, compiled: CompiledWorkflow) -> None:
        """Register an uploaded definition; future spawns use the latest version."""
        if compiled.key in self.workflows:
            raise EngineConfigError(f"duplicate workflow {compiled.key}")
        self.workflows[compiled.key] = compiled

    def _latest_workflows(self) -> list[CompiledWorkflow]:
        latest: dict[str, CompiledWorkflow] = {}
        for wf in self.workflows.values():
            seen = latest.get(wf.definition.workflow_id)
            if seen is None or wf.definition.version > seen.definition.version:
                latest[wf.definition.workflow_id] = wf
        return list(latest.values())

    def _spawn_on_trigger(self, event: DomainEvent) -> list[EngineEffect]:
        effects: list[EngineEffect] = []
        room_kind = self.registry.room_kind(event.room)
        for compiled in self._latest_workflows():
            defn = compiled.definition
            trigger = defn.trigger
            if event.kind != trigger.kind:
                continue
            if defn.location_scope != room_kind:
                continue
            if not payload_matches(trigger, event.payload):
                continue
            owner = event.subject
            if trigger.subject_role is not None:
                if owner is None:
                    continue
                person = self.registry.persons.get(owner)
                if person is None or person.role != trigger.subject_role:
                    continue
                if self._owner_already_running(owner, room_kind):
                    continue
            effects.extend(self._spawn(compiled, event))
        return effects

    def _owner_already_running(self, person: str, room_kind: str) -> bool:
        # one live primary instance per (episode owner, room kind)
        for instance in self.instances.values():
            if instance.auxiliary or instance.state not in (ACTIVE, VIOLATED):
                continue
            defn = self._compiled(instance).definition
            if defn.location_scope != room_kind:
                continue
            owner_role = defn.trigger.subject_role
            if owner_role and instance.bindings.get(owner_role) == person:
                return True
        return False

    def _spawn(self, compiled: CompiledWorkflow, event: DomainEvent) -> list[EngineEffect]:
        self._instance_seq += 1
        defn = compiled.definition
        instance = WorkflowInstance(
            instance_id=f"inst-{self._instance_seq:06d}",
            workflow_id=defn.workflow_id,
            version=defn.version,
            room=event.room,
            current_node=compiled.start_node,
            created_at=event.timestamp,
            updated_at=event.timestamp,
            node_entered_at=event.timestamp,
        )
        trigger = defn.trigger
        if trigger.subject_role is not None and event.subject is not None:
            instance.bindings[trigger.subject_role] = event.subject
        if trigger.secondary_role is not None and event.secondary_subject is not None:
            instance.bindings[trigger.secondary_role] = event.secondary_subject
        self.instances[instance.instance_id] = instance
        effects: list[EngineEffect] = [
            InstanceSpawned(
                instance_id=instance.instance_id,
                workflow_id=defn.workflow_id,
                version=defn.version,
                room=instance.room,
                bindings=tuple(sorted(instance.bindings.items())),
                at=event.timestamp,
            )
        ]
        effects.extend(self._advance_through_silent(instance, compiled, event.timestamp, None))
        # the triggering event is the first thing the new instance sees
        if instance.state == ACTIVE:
            effects.extend(self._offer(instance, event))
        return effects

    def spawn_on_external_entry(self, event: DomainEvent) -> list[EngineEffect]:
        """Auxiliary hygiene instance for an unbound person entering mid-episode."""
        newcomer = event.subject
        if newcomer is None or newcomer not in self.registry.persons:
            return []
        for instance in list(self.instances.values()):
            if instance.auxiliary or instance.state not in (ACTIVE, VIOLATED):
                continue
            if instance.room != event.room or not instance.episode_started:
                continue
            if newcomer in instance.bindings.values():
                continue
            owner_role = self._compiled(instance).definition.trigger.subject_role
            patient = instance.bindings.get(owner_role) if owner_role else None
            if patient is None:
                continue
            if self._aux_already_running(newcomer, event.room):
                continue
            return self._spawn_auxiliary(event, newcomer, patient)
        return []

    def _aux_already_running(self, newcomer: str, room: str) -> bool:
        for instance in self.instances.values():
            if (
                instance.auxiliary
                and instance.state in (ACTIVE, VIOLATED)
                and instance.room == room
                and instance.bindings.get("newcomer") == newcomer
            ):
                return True
        return False

    def _spawn_auxiliary(
        self, event: DomainEvent, newcomer: str, patient: str
    ) -> list[EngineEffect]:
        self._instance_seq += 1
        defn = self._aux.definition
        instance = WorkflowInstance(
            instance_id=f"inst-{self._instance_seq:06d}",
            workflow_id=defn.workflow_id,
            version=defn.version,
            room=event.room,
            current_node=self._aux.start_node,
            created_at=event.timestamp,
            updated_at=event.timestamp,
            node_entered_at=event.timestamp,
            auxiliary=True,
        )
        instance.bindings["newcomer"] = newcomer
        instance.bindings["patient"] = patient
        self.instances[instance.instance_id] = instance
        effects: list[EngineEffect] = [
            InstanceSpawned(
                instance_id=instance.instance_id,
                workflow_id=defn.workflow_id,
                version=defn.version,
                room=instance.room,
                bindings=tuple(sorted(instance.bindings.items())),
                at=event.timestamp,
            )
        ]
        effects.extend(self._advance_through_silent(instance, self._aux, event.timestamp, None))
        return effects

    # -- advancement -------------------------------------------------------------

    def _compiled(self, instance: WorkflowInstance) -> CompiledWorkflow:
        if instance.workflow_key == self._aux.key:
            return self._aux
        return self.workflows[instance.workflow_key]

    def _offer(self, instance: WorkflowInstance, event: DomainEvent) -> list[EngineEffect]:
        compiled = self._compiled(instance)
        node = compiled.node(instance.current_node)
        if node.kind not in (NodeKind.EVENT_WAIT, NodeKind.GUARDED) or node.pattern is None:
            return []
        new_bindings = self._match_pattern(node.pattern, instance, event)
        if new_bindings is None:
            return []
        if node.pattern.kind in (EXAMINATION_STARTED, PATIENT_ON_TABLE):
            instance.episode_started = True

        effects: list[EngineEffect] = []
        if node.kind is NodeKind.GUARDED and node.guard is not None:
            verdict = self.evaluate_guard(instance, node.guard, event, new_bindings)
            if verdict.config_error is not None:
                instance.bindings.update(new_bindings)
                instance.updated_at = event.timestamp
                return [GuardConfigError(instance.instance_id, node.node_id, verdict.config_error)]
            if not verdict.satisfied:
                instance.bindings.update(new_bindings)
                self._apply_remember(node, instance, event)
                effects.extend(
                    self._open_violation(instance, compiled, node, event, verdict.responsible)
                )
                if node.guard.on_violation is ViolationPolicy.CONTINUE:
                    effects.extend(self._advance_from(instance, compiled, node, event))
                return effects
        instance.bindings.update(new_bindings)
        self._apply_remember(node, instance, event)
        effects.extend(self._advance_from(instance, compiled, node, event))
        return effects

    def _match_pattern(
        self, pattern: EventPattern, instance: WorkflowInstance, event: DomainEvent
    ) -> dict[str, str] | None:
        """Match and propose role bindings; None when the event does not fit."""
        if event.kind != pattern.kind:
            return None
        if not self._room_ok(pattern, instance, event):
            return None
        if not payload_matches(pattern, event.payload):
            return None
        proposed: dict[str, str] = {}
        pairs = (
            (pattern.subject_role, event.subject),
            (pattern.secondary_role, event.secondary_subject),
        )
        for role, actual in pairs:
            if role is None:
                continue
            if actual is None:
                return None
            bound = instance.bindings.get(role, proposed.get(role))
            if bound is not None:
                if bound != actual:
                    return None
                continue
            person = self.registry.persons.get(actual)
            # a person may only fill the workflow role matching their own
            if person is None or person.role != role:
                return None
            proposed[role] = actual
        return proposed

    def _room_ok(
        self, pattern: EventPattern, instance: WorkflowInstance, event: DomainEvent
    ) -> bool:
        if pattern.room_constraint == "same":
            return event.room == instance.room
        return self.registry.room_kind(event.room) == pattern.room_constraint

    def _apply_remember(
        self, node: WorkflowNode, instance: WorkflowInstance, event: DomainEvent
    ) -> None:
        for spec in node.remember:
            if spec.literal is not None:
                instance.memory[spec.key] = spec.literal
            elif spec.payload_key is not None:
                value = event.payload.get(spec.payload_key)
                if value is not None:
                    from .workflow_model import norm_payload_value

                    instance.memory[spec.key] = norm_payload_value(value)

    def _advance_from(
        self,
        instance: WorkflowInstance,
        compiled: CompiledWorkflow,
        node: WorkflowNode,
        event: DomainEvent,
    ) -> list[EngineEffect]:
        successors = compiled.successors[node.node_id]
        target = successors[0].to_node
        effects: list[EngineEffect] = []
        self._move(instance, node.node_id, target, event.timestamp, event.event_id, effects)
        effects.extend(
            self._advance_through_silent(instance, compiled, event.timestamp, event.event_id)
        )
        return effects

    def _advance_through_silent(
        self,
        instance: WorkflowInstance,
        compiled: CompiledWorkflow,
        at: int,
        event_id: str | None,
    ) -> list[EngineEffect]:
        """Run Start/gateway/End nodes, which consume no events."""
        effects: list[EngineEffect] = []
        while True:
            node = compiled.node(instance.current_node)
            if node.kind is NodeKind.END:
                instance.state = COMPLETED
                instance.updated_at = at
                effects.append(InstanceCompleted(instance.instance_id, at))
                return effects
            if node.kind is NodeKind.START:
                target = compiled.successors[node.node_id][0].to_node
                self._move(instance, node.node_id, target, at, event_id, effects)
                continue
            if node.kind is NodeKind.EXCLUSIVE_GATEWAY:
                chosen: Transition | None = None
                default: Transition | None = None
                for transition in compiled.successors[node.node_id]:
                    parsed = compiled.conditions[
                        (transition.from_node, transition.to_node, transition.condition)
                    ]
                    if parsed[0] == OTHERWISE:
                        default = transition
                        continue
                    if chosen is None and evaluate_condition(parsed, instance.memory):
                        chosen = transition
                picked = chosen if chosen is not None else default
                assert picked is not None  # validation guarantees an otherwise edge
                self._move(instance, node.node_id, picked.to_node, at, event_id, effects)
                continue
            return effects

    def _move(
        self,
        instance: WorkflowInstance,
        from_node: str,
        to_node: str,
        at: int,
        event_id: str | None,
        effects: list[EngineEffect],
    ) -> None:
        instance.current_node = to_node
        instance.node_entered_at = at
        instance.updated_at = at
        instance.history.append({"event": event_id, "from": from_node, "to": to_node})
        effects.append(InstanceAdvanced(instance.instance_id, from_node, to_node, event_id, at))

    # -- violations -----------------------------------------------------------

    def _open_violation(
        self,
        instance: WorkflowInstance,
        compiled: CompiledWorkflow,
        node: WorkflowNode,
        event: DomainEvent,
        responsible: str,
    ) -> list[EngineEffect]:
        assert node.guard is not None
        self._violation_seq += 1
        violation = Violation(
            violation_id=f"vio-{self._violation_seq:06d}",
            instance_id=instance.instance_id,
            workflow_id=instance.workflow_id,
            node_id=node.node_id,
            required_kind=node.guard.required_event.kind,
            responsible_person=responsible,
            violating_event=event.event_id,
            opened_at=event.timestamp,
            policy=node.guard.on_violation.value,
            last_alert_at=event.timestamp,
        )
        self.violations[violation.violation_id] = violation
        instance.updated_at = event.timestamp
        if node.guard.on_violation is ViolationPolicy.BLOCK:
            instance.state = VIOLATED
            instance.open_violation = violation.violation_id
        alert = self._assemble_alert(instance, node, violation, at=event.timestamp)
        return [
            ViolationOpened(
                violation_id=violation.violation_id,
                instance_id=instance.instance_id,
                node_id=node.node_id,
                responsible_person=responsible,
                at=event.timestamp,
            ),
            AlertRequested(alert),
        ]

    def _try_corrective(
        self, instance: WorkflowInstance, event: DomainEvent
    ) -> list[EngineEffect]:
        compiled = self._compiled(instance)
        node = compiled.node(instance.current_node)
        guard = node.guard
        if guard is None or instance.open_violation is None:
            return []
        violation = self.violations[instance.open_violation]
        corrective = guard.corrective()
        if event.kind != corrective.kind:
            return []
        if corrective.subject_role is not None and event.subject != violation.responsible_person:
            return []
        if not self._room_ok(corrective, instance, event):
            return []
        if not payload_matches(corrective, event.payload):
            return []

        violation.cleared_at = event.timestamp
        instance.state = ACTIVE
        instance.open_violation = None
        instance.updated_at = event.timestamp
        effects: list[EngineEffect] = [
            ViolationCleared(
                violation_id=violation.violation_id,
                instance_id=instance.instance_id,
                event_id=event.event_id,
                at=event.timestamp,
            )
        ]
        # the guarded node is re-evaluated at the corrective moment
        verdict = self.evaluate_guard(instance, guard, event)
        if verdict.satisfied:
            effects.extend(self._advance_from(instance, compiled, node, event))
        else:
            effects.extend(
                self._open_violation(instance, compiled, node, event, violation.responsible_person)
            )
        return effects

    def _clear_nonblocking(self, event: DomainEvent) -> list[EngineEffect]:
        """Clear open continue-policy violations whose corrective arrived.

        Blocking violations are handled by _try_corrective (they also resume
        the instance); these belong to instances that already advanced, so
        clearing is pure bookkeeping plus the end of their re-alerts.
        """
        effects: list[EngineEffect] = []
        for violation in list(self.violations.values()):
            if violation.cleared_at is not None or violation.policy != ViolationPolicy.CONTINUE.value:
                continue
            instance = self.instances[violation.instance_id]
            node = self._compiled(instance).node(violation.node_id)
            guard = node.guard
            if guard is None:
                continue
            corrective = guard.corrective()
            if event.kind != corrective.kind:
                continue
            if corrective.subject_role is not None and event.subject != violation.responsible_person:
                continue
            if not self._room_ok(corrective, instance, event):
                continue
            if not payload_matches(corrective, event.payload):
                continue
            violation.cleared_at = event.timestamp
            effects.append(
                ViolationCleared(
                    violation_id=violation.violation_id,
                    instance_id=violation.instance_id,
                    event_id=event.event_id,
                    at=event.timestamp,
                )
            )
        return effects

    def _abort(self, instance: WorkflowInstance, at: int, reason: str) -> EngineEffect:
        instance.state = ABORTED
        instance.updated_at = at
        self._audit(
            "instance_aborted",
            {"instance": instance.instance_id, "reason": reason, "at": at},
        )
        return InstanceAborted(instance.instance_id, at, reason)

    # -- alerts -----------------------------------------------------------------

    def _assemble_alert(
        self,
        instance: WorkflowInstance,
        node: WorkflowNode,
        violation: Violation,
        at: int,
        is_realert: bool = False,
    ) -> Alert:
        assert node.guard is not None
        guard = node.guard
        self._alert_seq += 1
        person = violation.responsible_person
        person_rec = self.registry.persons.get(person)
        person_name = person_rec.display_name if person_rec else person
        anchor = node.pattern.kind if node.pattern is not None else node.node_id
        workflow_name = self._compiled(instance).definition.name
        if is_realert:
            description = self.config.realert_template.format(
                workflow=workflow_name,
                count=violation.realert_count,
                required=guard.required_event.kind,
                person=person_name,
                room=instance.room,
            )
        else:
            description = self.config.alert_template.format(
                workflow=workflow_name,
                required=guard.required_event.kind,
                person=person_name,
                window=int(guard.window_s),
                anchor=anchor,
                room=instance.room,
            )
        targets = {u.user_id for u in self.registry.users_for_person(person)}
        targets.update(u.user_id for u in self.registry.users_with_role("administrator"))
        return Alert(
            alert_id=f"alr-{self._alert_seq:06d}",
            workflow_id=instance.workflow_id,
            instance_id=instance.instance_id,
            violation_id=violation.violation_id,
            device=self._alert_device(instance.room, guard),
            person=person,
            room=instance.room,
            timestamp=at,
            description=description,
            delivery_targets=tuple(sorted(targets)),
            is_realert=is_realert,
        )

    def _alert_device(self, room: str, guard: GuardSpec) -> str:
        required = guard.required_event
        device_kind = ALERT_DEVICE_BY_KIND.get(required.kind, "door_antenna")
        if required.kind == HAND_HYGIENE_PERFORMED:
            methods = dict(required.payload_constraints).get("method")
            if methods == ("gel",):
                device_kind = "gel_dispenser"
        record = self.registry.room_device_of_kind(room, device_kind)
        if record is not None:
            return record.sensor_id
        # degenerate kit: fall back to any sensor in the room, then the room id
        for device in sorted(self.registry.devices.values(), key=lambda d: d.sensor_id):
            if device.room == room:
                return device.sensor_id
        return room

    def _audit(self, note: str, detail: dict[str, Any]) -> None:
        if self.on_audit is not None:
            self.on_audit({"note": note, **detail})


def history_is_valid_path(instance: WorkflowInstance, compiled: CompiledWorkflow) -> bool:
    """Replay check: the recorded transitions walk the definition's graph."""
    current = compiled.start_node
    for step in instance.history:
        if step["from"] != current:
            return False
        allowed = {t.to_node for t in compiled.successors.get(step["from"], ())}
        if step["to"] not in allowed:
            return False
        current = step["to"]
    if instance.state == COMPLETED:
        return current in compiled.end_nodes
    return True
