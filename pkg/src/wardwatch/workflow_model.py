"""Workflow documents: typed model, validation and compilation.

A workflow document describes one monitored clinical procedure as a small
graph: a Start node, wait nodes that consume domain events, guarded wait
nodes that additionally demand a prerequisite event (hand hygiene before an
examination, verified sterile equipment before the end of a procedure),
exclusive gateways branching on instance context, and End nodes.

Documents are parsed from the line-oriented text format (see workflow_dsl),
validated into a list of findings, and compiled into dispatch tables the
engine executes. Instances run single-token: exactly one current node.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable

from .events import EVENT_KINDS

logger = logging.getLogger(__name__)

# Guards fall back to this window when the document does not set one.
DEFAULT_GUARD_WINDOW_S = 600.0


class NodeKind(str, Enum):
    START = "Start"
    END = "End"
    EVENT_WAIT = "EventWait"
    GUARDED = "Guarded"
    EXCLUSIVE_GATEWAY = "ExclusiveGateway"


class ViolationPolicy(str, Enum):
    """What a guarded node does when its guard fails.

    BLOCK suspends the instance on the node until a corrective event clears
    the violation. CONTINUE records the violation (alerts keep firing until
    corrected) but lets the token advance; used for end-of-procedure checks
    where stopping the instance would hide later breaches.
    """

    BLOCK = "block"
    CONTINUE = "continue"


@dataclass(frozen=True)
class EventPattern:
    """Matcher over domain events.

    Attributes:
        kind: Domain event kind, member of the closed taxonomy.
        subject_role: Workflow role the event subject must bind to, if any.
        secondary_role: Role for the secondary participant, if any.
        room_constraint: "same" (the instance's room) or a room kind name.
        payload_constraints: (key, allowed-values) pairs; every key must
            match one of its allowed literal values.
    """

    kind: str
    subject_role: str | None = None
    secondary_role: str | None = None
    room_constraint: str = "same"
    payload_constraints: tuple[tuple[str, tuple[str, ...]], ...] = ()

    def roles(self) -> set[str]:
        out = set()
        if self.subject_role:
            out.add(self.subject_role)
        if self.secondary_role:
            out.add(self.secondary_role)
        return out


def norm_payload_value(value: Any) -> str:
    """Render a payload value the way pattern literals are written."""
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    return str(value)


def payload_matches(pattern: EventPattern, payload: dict[str, Any]) -> bool:
    for key, allowed in pattern.payload_constraints:
        if norm_payload_value(payload.get(key)) not in allowed:
            return False
    return True


@dataclass(frozen=True)
class GuardSpec:
    """Prerequisite attached to a guarded node.

    The guard is satisfied when an event matching `required_event`,
    performed by the person bound to `by_role` (when the pattern names a
    subject), exists within `window_s` seconds before the guarded event,
    and after that person's last patient contact.
    """

    required_event: EventPattern
    by_role: str
    window_s: float = DEFAULT_GUARD_WINDOW_S
    corrective_event: EventPattern | None = None
    on_violation: ViolationPolicy = ViolationPolicy.BLOCK

    def corrective(self) -> EventPattern:
        return self.corrective_event if self.corrective_event is not None else self.required_event


@dataclass(frozen=True)
class RememberSpec:
    """Copy something into instance context when a wait node matches."""

    key: str
    payload_key: str | None = None
    literal: str | None = None


@dataclass(frozen=True)
class WorkflowNode:
    node_id: str
    kind: NodeKind
    pattern: EventPattern | None = None
    deadline_s: float | None = None
    guard: GuardSpec | None = None
    remember: tuple[RememberSpec, ...] = ()


@dataclass(frozen=True)
class Transition:
    """Directed edge. `condition` is None for plain sequence flow;
    gateway edges carry either an expression or the literal "otherwise"."""

    from_node: str
    to_node: str
    condition: str | None = None


@dataclass(frozen=True)
class WorkflowDefinition:
    workflow_id: str
    name: str
    version: int
    location_scope: str
    role_bindings: tuple[str, ...]
    trigger: EventPattern
    nodes: tuple[WorkflowNode, ...]
    transitions: tuple[Transition, ...]

    @property
    def key(self) -> tuple[str, int]:
        return (self.workflow_id, self.version)

    def node(self, node_id: str) -> WorkflowNode | None:
        for n in self.nodes:
            if n.node_id == node_id:
                return n
        return None


# ---------------------------------------------------------------------------
# Conditions
# ---------------------------------------------------------------------------

OTHERWISE = "otherwise"


class ConditionError(ValueError):
    pass


def parse_condition(text: str) -> tuple:
    """Parse a gateway edge condition into an evaluable tuple.

    Grammar: `otherwise` | `has KEY` | `KEY == VALUE` | `KEY != VALUE`.
    """
    parts = text.split()
    if parts == [OTHERWISE]:
        return (OTHERWISE,)
    if len(parts) == 2 and parts[0] == "has":
        return ("has", parts[1])
    if len(parts) == 3 and parts[1] in ("==", "!="):
        op = "eq" if parts[1] == "==" else "ne"
        return (op, parts[0], parts[2])
    raise ConditionError(f"cannot parse condition: {text!r}")


def evaluate_condition(compiled: tuple, context: dict[str, str]) -> bool:
    op = compiled[0]
    if op == OTHERWISE:
        return True
    if op == "has":
        return compiled[1] in context
    if op == "eq":
        return context.get(compiled[1]) == compiled[2]
    if op == "ne":
        return context.get(compiled[1]) != compiled[2]
    raise ConditionError(f"unknown condition op: {op!r}")


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Finding:
    """One validation problem, addressable by code in tests and tooling."""

    code: str
    message: str
    where: str = ""

    def __str__(self) -> str:
        loc = f" [{self.where}]" if self.where else ""
        return f"{self.code}: {self.message}{loc}"


def validate_definition(defn: WorkflowDefinition) -> list[Finding]:
    """Structural validation. Returns an empty list for a sound document."""
    findings: list[Finding] = []
    add = findings.append

    if not defn.workflow_id:
        add(Finding("empty_id", "workflow id must be non-empty"))
    if defn.version < 1:
        add(Finding("bad_version", f"version must be >= 1, got {defn.version}"))
    if not defn.location_scope:
        add(Finding("missing_location", "location scope must be non-empty"))

    seen_ids: set[str] = set()
    for node in defn.nodes:
        if node.node_id in seen_ids:
            add(Finding("duplicate_node", f"duplicate node id {node.node_id!r}", node.node_id))
        seen_ids.add(node.node_id)

    starts = [n for n in defn.nodes if n.kind is NodeKind.START]
    ends = [n for n in defn.nodes if n.kind is NodeKind.END]
    if len(starts) != 1:
        add(Finding("start_count", f"exactly one Start node required, found {len(starts)}"))
    if not ends:
        add(Finding("end_missing", "at least one End node required"))

    roles = set(defn.role_bindings)

    def check_pattern(pattern: EventPattern, where: str) -> None:
        if pattern.kind not in EVENT_KINDS:
            add(Finding("unknown_event_kind", f"unknown event kind {pattern.kind!r}", where))
        for role in pattern.roles():
            if role not in roles:
                add(Finding("unbound_role", f"role {role!r} not declared in roles", where))

    check_pattern(defn.trigger, "trigger")

    outgoing: dict[str, list[Transition]] = {n.node_id: [] for n in defn.nodes}
    for t in defn.transitions:
        if t.from_node not in seen_ids:
            add(Finding("dangling_transition", f"edge from unknown node {t.from_node!r}", t.from_node))
            continue
        if t.to_node not in seen_ids:
            add(Finding("dangling_transition", f"edge to unknown node {t.to_node!r}", t.to_node))
            continue
        outgoing[t.from_node].append(t)

    for node in defn.nodes:
        where = node.node_id
        outs = outgoing.get(node.node_id, [])
        if node.kind in (NodeKind.EVENT_WAIT, NodeKind.GUARDED):
            if node.pattern is None:
                add(Finding("missing_pattern", "wait node needs an expect pattern", where))
            else:
                check_pattern(node.pattern, where)
            if node.deadline_s is not None and node.deadline_s <= 0:
                add(Finding("bad_deadline", "deadline must be positive seconds", where))
        if node.kind is NodeKind.GUARDED:
            if node.guard is None:
                add(Finding("missing_guard", "Guarded node needs a require clause", where))
            else:
                check_pattern(node.guard.required_event, where)
                check_pattern(node.guard.corrective(), where)
                if node.guard.by_role not in roles:
                    add(Finding("unbound_role", f"guard role {node.guard.by_role!r} not declared", where))
                if node.guard.window_s <= 0:
                    add(Finding("bad_window", "guard window must be positive seconds", where))
        elif node.guard is not None:
            add(Finding("guard_outside_guarded", "only Guarded nodes may carry a guard", where))

        if node.kind is NodeKind.END:
            if outs:
                add(Finding("end_with_outgoing", "End node must not have outgoing edges", where))
            continue
        if node.kind is NodeKind.EXCLUSIVE_GATEWAY:
            if not outs:
                add(Finding("gateway_no_outgoing", "gateway needs outgoing edges", where))
                continue
            defaults = [t for t in outs if t.condition == OTHERWISE]
            if len(defaults) != 1:
                add(Finding(
                    "gateway_default",
                    f"gateway needs exactly one otherwise edge, found {len(defaults)}",
                    where,
                ))
            for t in outs:
                if t.condition is None:
                    add(Finding("gateway_unconditional_edge", "gateway edges must carry conditions", where))
                else:
                    try:
                        parse_condition(t.condition)
                    except ConditionError as exc:
                        add(Finding("bad_condition", str(exc), where))
        else:
            # Start / EventWait / Guarded: plain sequence flow
            if len(outs) != 1:
                add(Finding(
                    "sequence_out_degree",
                    f"node must have exactly one outgoing edge, found {len(outs)}",
                    where,
                ))
            for t in outs:
                if t.condition is not None:
                    add(Finding("conditional_edge_outside_gateway", "conditions only on gateway edges", where))

    # reachability from Start
    if len(starts) == 1:
        reachable = {starts[0].node_id}
        frontier = [starts[0].node_id]
        while frontier:
            current = frontier.pop()
            for t in outgoing.get(current, []):
                if t.to_node not in reachable:
                    reachable.add(t.to_node)
                    frontier.append(t.to_node)
        for node in defn.nodes:
            if node.node_id not in reachable:
                add(Finding("unreachable_node", f"node {node.node_id!r} unreachable from Start", node.node_id))

    return findings


# ---------------------------------------------------------------------------
# Compilation
# ---------------------------------------------------------------------------


class CompileError(ValueError):
    def __init__(self, findings: list[Finding]):
        super().__init__("; ".join(str(f) for f in findings))
        self.findings = findings


@dataclass
class CompiledWorkflow:
    """Executable form of a definition.

    Attributes:
        dispatch: event kind -> node ids interested in it (wait patterns,
            guard prerequisites and correctives).
        successors: node id -> outgoing transitions in document order.
        conditions: parsed gateway conditions per (from, to, condition).
    """

    definition: WorkflowDefinition
    start_node: str = ""
    end_nodes: frozenset[str] = frozenset()
    dispatch: dict[str, tuple[str, ...]] = field(default_factory=dict)
    successors: dict[str, tuple[Transition, ...]] = field(default_factory=dict)
    conditions: dict[tuple[str, str, str], tuple] = field(default_factory=dict)

    @property
    def key(self) -> tuple[str, int]:
        return self.definition.key

    def node(self, node_id: str) -> WorkflowNode:
        found = self.definition.node(node_id)
        if found is None:
            raise KeyError(node_id)
        return found


def compile_definition(defn: WorkflowDefinition) -> CompiledWorkflow:
    """Validate and compile. Raises CompileError when findings exist."""
    findings = validate_definition(defn)
    if findings:
        raise CompileError(findings)

    interested: dict[str, list[str]] = {}

    def note(kind: str, node_id: str) -> None:
        nodes = interested.setdefault(kind, [])
        if node_id not in nodes:
            nodes.append(node_id)

    for node in defn.nodes:
        if node.pattern is not None:
            note(node.pattern.kind, node.node_id)
        if node.guard is not None:
            note(node.guard.required_event.kind, node.node_id)
            note(node.guard.corrective().kind, node.node_id)

    dispatch = {kind: tuple(nodes) for kind, nodes in sorted(interested.items())}

    successors: dict[str, tuple[Transition, ...]] = {}
    for node in defn.nodes:
        outs = tuple(t for t in defn.transitions if t.from_node == node.node_id)
        successors[node.node_id] = outs

    conditions: dict[tuple[str, str, str], tuple] = {}
    for t in defn.transitions:
        if t.condition is not None:
            conditions[(t.from_node, t.to_node, t.condition)] = parse_condition(t.condition)

    start = next(n.node_id for n in defn.nodes if n.kind is NodeKind.START)
    ends = frozenset(n.node_id for n in defn.nodes if n.kind is NodeKind.END)
    return CompiledWorkflow(
        definition=defn,
        start_node=start,
        end_nodes=ends,
        dispatch=dispatch,
        successors=successors,
        conditions=conditions,
    )


def compile_all(definitions: Iterable[WorkflowDefinition]) -> dict[tuple[str, int], CompiledWorkflow]:
    """Compile a set of definitions, enforcing (id, version) uniqueness."""
    compiled: dict[tuple[str, int], CompiledWorkflow] = {}
    for defn in definitions:
        if defn.key in compiled:
            raise CompileError([Finding("duplicate_definition", f"duplicate workflow {defn.key}")])
        compiled[defn.key] = compile_definition(defn)
    return compiled
