"""Line-oriented text format for workflow documents.

A document is a sequence of blocks. A block opens with an unindented
directive line and owns the indented `key: value` lines that follow it:

    workflow gp_office
      name: General practitioner consultation
      version: 1
      location: gp_office
      roles: patient, practitioner
      trigger: PersonEntered subject=patient

    node examination
      kind: Guarded
      expect: ExaminationStarted subject=practitioner secondary=patient
      require: HandHygienePerformed subject=practitioner
      require_by: practitioner
      require_window: 600
      on_violation: block
      corrective: HandHygienePerformed subject=practitioner

    edge start -> examination
    edge route -> fast when method == gel
    edge route -> slow otherwise

Event patterns are written `Kind key=value ...`; `subject`, `secondary` and
`room` are structural keys, anything else constrains the event payload
(`method=soap|gel` accepts either literal). Full-line comments start with
`#`; blank lines are separators.
"""

from __future__ import annotations

import logging

from .events import EVENT_KINDS
from .workflow_model import (
    DEFAULT_GUARD_WINDOW_S,
    EventPattern,
    GuardSpec,
    NodeKind,
    RememberSpec,
    Transition,
    ViolationPolicy,
    WorkflowDefinition,
    WorkflowNode,
)

logger = logging.getLogger(__name__)

_NODE_PROP_ORDER = (
    "kind",
    "expect",
    "deadline",
    "remember",
    "require",
    "require_by",
    "require_window",
    "on_violation",
    "corrective",
)


class WorkflowParseError(ValueError):
    """Parse failure with document coordinates.

    Attributes:
        line: 1-based line number.
        column: 1-based column, best effort.
    """

    def __init__(self, message: str, line: int, column: int = 1):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


def _column_of(text: str, token: str) -> int:
    at = text.find(token)
    return at + 1 if at >= 0 else 1


def parse_pattern(text: str, line_no: int, line_text: str) -> EventPattern:
    tokens = text.split()
    if not tokens:
        raise WorkflowParseError("empty event pattern", line_no, _column_of(line_text, ":") + 1)
    kind = tokens[0]
    if kind not in EVENT_KINDS:
        raise WorkflowParseError(f"unknown event kind {kind!r}", line_no, _column_of(line_text, kind))
    subject = None
    secondary = None
    room = "same"
    constraints: dict[str, tuple[str, ...]] = {}
    for token in tokens[1:]:
        if "=" not in token:
            raise WorkflowParseError(
                f"pattern token {token!r} must look like key=value", line_no, _column_of(line_text, token)
            )
        key, _, value = token.partition("=")
        if not key or not value:
            raise WorkflowParseError(f"bad pattern token {token!r}", line_no, _column_of(line_text, token))
        if key == "subject":
            subject = value
        elif key == "secondary":
            secondary = value
        elif key == "room":
            room = value
        else:
            if key in constraints:
                raise WorkflowParseError(
                    f"duplicate payload constraint {key!r}", line_no, _column_of(line_text, token)
                )
            constraints[key] = tuple(value.split("|"))
    return EventPattern(
        kind=kind,
        subject_role=subject,
        secondary_role=secondary,
        room_constraint=room,
        payload_constraints=tuple(sorted(constraints.items())),
    )


def _render_pattern(pattern: EventPattern) -> str:
    parts = [pattern.kind]
    if pattern.subject_role:
        parts.append(f"subject={pattern.subject_role}")
    if pattern.secondary_role:
        parts.append(f"secondary={pattern.secondary_role}")
    if pattern.room_constraint != "same":
        parts.append(f"room={pattern.room_constraint}")
    for key, allowed in pattern.payload_constraints:
        parts.append(f"{key}={'|'.join(allowed)}")
    return " ".join(parts)


def _render_seconds(value: float) -> str:
    return str(int(value)) if float(value).is_integer() else repr(value)


class _Block:
    def __init__(self, directive: str, name: str, line: int):
        self.directive = directive
        self.name = name
        self.line = line
        self.props: dict[str, tuple[str, int, str]] = {}  # key -> (value, line, raw line)
        self.remember: list[tuple[str, int, str]] = []


def parse_document(text: str) -> WorkflowDefinition:
    """Parse one workflow document.

    Raises:
        WorkflowParseError: on any syntax or vocabulary problem, carrying
            line and column coordinates.
    """
    workflow_block: _Block | None = None
    node_blocks: list[_Block] = []
    edges: list[tuple[Transition, int]] = []
    node_ids_seen: dict[str, int] = {}
    current: _Block | None = None

    for line_no, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.strip()
        if not stripped or stripped.startswith("#"):
            continue
        indented = raw[:1] in (" ", "\t")
        if indented:
            if current is None:
                raise WorkflowParseError("property line outside any block", line_no)
            if ":" not in stripped:
                raise WorkflowParseError("expected key: value", line_no)
            key, _, value = stripped.partition(":")
            key = key.strip()
            value = value.strip()
            if not key:
                raise WorkflowParseError("empty property key", line_no)
            if key == "remember":
                current.remember.append((value, line_no, raw))
                continue
            if key in current.props:
                raise WorkflowParseError(f"duplicate property {key!r}", line_no, _column_of(raw, key))
            current.props[key] = (value, line_no, raw)
            continue

        tokens = stripped.split()
        directive = tokens[0]
        if directive == "workflow":
            if len(tokens) != 2:
                raise WorkflowParseError("usage: workflow <id>", line_no)
            if workflow_block is not None:
                raise WorkflowParseError("multiple workflow blocks in one document", line_no)
            workflow_block = _Block("workflow", tokens[1], line_no)
            current = workflow_block
        elif directive == "node":
            if len(tokens) != 2:
                raise WorkflowParseError("usage: node <id>", line_no)
            node_id = tokens[1]
            if node_id in node_ids_seen:
                raise WorkflowParseError(
                    f"duplicate node id {node_id!r} (first at line {node_ids_seen[node_id]})",
                    line_no,
                    _column_of(raw, node_id),
                )
            node_ids_seen[node_id] = line_no
            block = _Block("node", node_id, line_no)
            node_blocks.append(block)
            current = block
        elif directive == "edge":
            if len(tokens) < 4 or tokens[2] != "->":
                raise WorkflowParseError("usage: edge <from> -> <to> [when <cond> | otherwise]", line_no)
            from_node, to_node = tokens[1], tokens[3]
            condition: str | None = None
            rest = tokens[4:]
            if rest:
                if rest == ["otherwise"]:
                    condition = "otherwise"
                elif rest[0] == "when" and len(rest) > 1:
                    condition = " ".join(rest[1:])
                else:
                    raise WorkflowParseError(
                        f"bad edge suffix {' '.join(rest)!r}", line_no, _column_of(raw, rest[0])
                    )
            edges.append((Transition(from_node, to_node, condition), line_no))
            current = None
        else:
            raise WorkflowParseError(f"unknown directive {directive!r}", line_no, _column_of(raw, directive))

    if workflow_block is None:
        raise WorkflowParseError("document contains no workflow block", 1)

    def take(block: _Block, key: str) -> tuple[str, int, str] | None:
        return block.props.pop(key, None)

    # -- header -------------------------------------------------------------
    props = workflow_block
    name_p = take(props, "name")
    version_p = take(props, "version")
    location_p = take(props, "location")
    roles_p = take(props, "roles")
    trigger_p = take(props, "trigger")
    for missing, p in (("name", name_p), ("version", version_p), ("location", location_p),
                       ("roles", roles_p), ("trigger", trigger_p)):
        if p is None:
            raise WorkflowParseError(f"workflow block missing {missing!r}", props.line)
    if props.props:
        key = next(iter(props.props))
        raise WorkflowParseError(f"unknown workflow property {key!r}", props.props[key][1])
    try:
        version = int(version_p[0])
    except ValueError:
        raise WorkflowParseError(f"version must be an integer, got {version_p[0]!r}", version_p[1]) from None
    roles = tuple(r.strip() for r in roles_p[0].split(",") if r.strip())
    if not roles:
        raise WorkflowParseError("roles list is empty", roles_p[1])
    trigger = parse_pattern(trigger_p[0], trigger_p[1], trigger_p[2])

    # -- nodes --------------------------------------------------------------
    nodes: list[WorkflowNode] = []
    for block in node_blocks:
        kind_p = take(block, "kind")
        if kind_p is None:
            raise WorkflowParseError(f"node {block.name!r} missing kind", block.line)
        try:
            kind = NodeKind(kind_p[0])
        except ValueError:
            raise WorkflowParseError(
                f"unknown node kind {kind_p[0]!r}", kind_p[1], _column_of(kind_p[2], kind_p[0])
            ) from None

        pattern = None
        expect_p = take(block, "expect")
        if expect_p is not None:
            pattern = parse_pattern(expect_p[0], expect_p[1], expect_p[2])

        deadline = None
        deadline_p = take(block, "deadline")
        if deadline_p is not None:
            try:
                deadline = float(deadline_p[0])
            except ValueError:
                raise WorkflowParseError(f"bad deadline {deadline_p[0]!r}", deadline_p[1]) from None

        remembers: list[RememberSpec] = []
        for value, line_no, _raw in block.remember:
            if "=" in value:
                key, _, literal = value.partition("=")
                remembers.append(RememberSpec(key=key.strip(), literal=literal.strip()))
            else:
                remembers.append(RememberSpec(key=value.strip(), payload_key=value.strip()))

        guard = None
        require_p = take(block, "require")
        require_by_p = take(block, "require_by")
        window_p = take(block, "require_window")
        policy_p = take(block, "on_violation")
        corrective_p = take(block, "corrective")
        if require_p is not None:
            required = parse_pattern(require_p[0], require_p[1], require_p[2])
            if require_by_p is not None:
                by_role = require_by_p[0]
            elif required.subject_role is not None:
                by_role = required.subject_role
            else:
                raise WorkflowParseError(
                    f"node {block.name!r} guard needs require_by or a subject role", require_p[1]
                )
            window = DEFAULT_GUARD_WINDOW_S
            if window_p is not None:
                try:
                    window = float(window_p[0])
                except ValueError:
                    raise WorkflowParseError(f"bad require_window {window_p[0]!r}", window_p[1]) from None
            policy = ViolationPolicy.BLOCK
            if policy_p is not None:
                try:
                    policy = ViolationPolicy(policy_p[0])
                except ValueError:
                    raise WorkflowParseError(
                        f"on_violation must be block or continue, got {policy_p[0]!r}", policy_p[1]
                    ) from None
            corrective = None
            if corrective_p is not None:
                corrective = parse_pattern(corrective_p[0], corrective_p[1], corrective_p[2])
            guard = GuardSpec(
                required_event=required,
                by_role=by_role,
                window_s=window,
                corrective_event=corrective,
                on_violation=policy,
            )
        else:
            for stray in (require_by_p, window_p, policy_p, corrective_p):
                if stray is not None:
                    raise WorkflowParseError("guard properties need a require clause", stray[1])

        if block.props:
            key = next(iter(block.props))
            raise WorkflowParseError(f"unknown node property {key!r}", block.props[key][1])

        nodes.append(
            WorkflowNode(
                node_id=block.name,
                kind=kind,
                pattern=pattern,
                deadline_s=deadline,
                guard=guard,
                remember=tuple(remembers),
            )
        )

    return WorkflowDefinition(
        workflow_id=workflow_block.name,
        name=name_p[0],
        version=version,
        location_scope=location_p[0],
        role_bindings=roles,
        trigger=trigger,
        nodes=tuple(nodes),
        transitions=tuple(t for t, _line in edges),
    )


def serialize_definition(defn: WorkflowDefinition) -> str:
    """Render a definition back to canonical document text.

    parse_document(serialize_definition(d)) reproduces d exactly for any d
    that itself came from parse_document.
    """
    lines: list[str] = [f"workflow {defn.workflow_id}"]
    lines.append(f"  name: {defn.name}")
    lines.append(f"  version: {defn.version}")
    lines.append(f"  location: {defn.location_scope}")
    lines.append(f"  roles: {', '.join(defn.role_bindings)}")
    lines.append(f"  trigger: {_render_pattern(defn.trigger)}")
    for node in defn.nodes:
        lines.append("")
        lines.append(f"node {node.node_id}")
        lines.append(f"  kind: {node.kind.value}")
        if node.pattern is not None:
            lines.append(f"  expect: {_render_pattern(node.pattern)}")
        if node.deadline_s is not None:
            lines.append(f"  deadline: {_render_seconds(node.deadline_s)}")
        for spec in node.remember:
            if spec.payload_key is not None:
                lines.append(f"  remember: {spec.payload_key}")
            else:
                lines.append(f"  remember: {spec.key}={spec.literal}")
        if node.guard is not None:
            guard = node.guard
            lines.append(f"  require: {_render_pattern(guard.required_event)}")
            lines.append(f"  require_by: {guard.by_role}")
            lines.append(f"  require_window: {_render_seconds(guard.window_s)}")
            lines.append(f"  on_violation: {guard.on_violation.value}")
            if guard.corrective_event is not None:
                lines.append(f"  corrective: {_render_pattern(guard.corrective_event)}")
    lines.append("")
    for t in defn.transitions:
        if t.condition is None:
            lines.append(f"edge {t.from_node} -> {t.to_node}")
        elif t.condition == "otherwise":
            lines.append(f"edge {t.from_node} -> {t.to_node} otherwise")
        else:
            lines.append(f"edge {t.from_node} -> {t.to_node} when {t.condition}")
    return "\n".join(lines) + "\n"
