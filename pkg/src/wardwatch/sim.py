"""Scripted simulator for the ward sensor network.

A scenario file describes rooms, badge-wearing people and a timeline of
physical actions ("the doctor walks through the door at t=0ms"). The
simulator expands each action into the sensor firings it would cause and
pushes them through a channel model (per-hop latency, optional loss on the
battery-switch hop, optional per-node clock skew). The output is the stream
of wire readings exactly as the gateway would receive them, ordered by
delivery time.

Everything is driven by a seeded RNG and a virtual clock, so a given
(scenario, channel) pair always produces a byte-identical trace. Real runs
of the shipped scenarios finish in well under a second.
"""

from __future__ import annotations

import heapq
import random
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

from .events import (
    AntennaKind,
    BarcodeScanned,
    DispenserActivated,
    DispenserKind,
    Presence,
    ReadingPayload,
    RfidTag,
    SensorReading,
    SprayUsed,
    TapUsed,
    ThermalPresence,
    stable_json,
)
from .registry import (
    DEVICE_KINDS,
    DISPENSER_DEVICE_BY_KIND,
    PERSON_ROLES,
    DeviceRecord,
    PersonRecord,
    Registry,
    RoomRecord,
    SterilizationLogEntry,
)

# Device complements installable per room. Scenario files pick one by name
# instead of listing thirteen sensors per room.
ROOM_KITS: dict[str, tuple[str, ...]] = {
    "gp": (
        "door_antenna",
        "sink_antenna",
        "thermal_array",
        "soap_dispenser",
        "gel_dispenser",
        "glove_dispenser",
        "towel_dispenser",
        "trash_can",
        "tap",
        "bed_proximity",
    ),
    "surgery": (
        "door_antenna",
        "sink_antenna",
        "barcode_reader",
        "soap_dispenser",
        "gel_dispenser",
        "glove_dispenser",
        "towel_dispenser",
        "trash_can",
        "tap",
        "table_infrared",
        "spray_holder",
    ),
}

SENSOR_SUFFIX = {
    "door_antenna": "door",
    "sink_antenna": "sink",
    "thermal_array": "thermal",
    "soap_dispenser": "soap",
    "gel_dispenser": "gel",
    "glove_dispenser": "gloves",
    "towel_dispenser": "towel",
    "trash_can": "trash",
    "tap": "tap",
    "bed_proximity": "bed",
    "table_infrared": "table",
    "barcode_reader": "barcode",
    "spray_holder": "spray",
}

# action kind -> (needs person, needs room, needs item)
ACTION_SHAPES: dict[str, tuple[bool, bool, bool]] = {
    "move_through_door": (True, True, False),
    "approach_sink": (True, True, False),
    "use_dispenser": (False, True, True),
    "use_tap": (False, True, False),
    "approach_bed": (True, True, False),
    "lie_on_table": (True, True, False),
    "scan_barcode": (False, True, True),
    "use_spray": (False, True, False),
    "depart": (True, False, False),
    # Spurious door read from someone walking past in the corridor. Kept out
    # of the shipped scripts; exists so badly-placed-antenna effects can be
    # reproduced on demand.
    "corridor_pass": (True, True, False),
}

# Device each action needs installed in its room. depart is resolved to a
# door crossing of the room the person is in, so it checks door_antenna too.
_REQUIRED_DEVICE: dict[str, str] = {
    "move_through_door": "door_antenna",
    "corridor_pass": "door_antenna",
    "approach_sink": "sink_antenna",
    "use_tap": "tap",
    "approach_bed": "bed_proximity",
    "lie_on_table": "table_infrared",
    "scan_barcode": "barcode_reader",
    "use_spray": "spray_holder",
    "depart": "door_antenna",
}


class ScenarioError(ValueError):
    """Scenario text failed validation.

    Attributes:
        line: 1-based line number in the source, or None for errors raised
            outside parsing (e.g. bad injections).
    """

    def __init__(self, message: str, line: int | None = None):
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)
        self.line = line


@dataclass(frozen=True)
class PhysicalAction:
    """One timeline entry: something a person or a hand does at `at` ms."""

    at: int
    kind: str
    person: str | None = None
    room: str | None = None
    item: str | None = None


@dataclass(frozen=True)
class RoomDecl:
    room_id: str
    kind: str
    kit: str


@dataclass(frozen=True)
class PersonDecl:
    person_id: str
    role: str
    badge: str


@dataclass(frozen=True)
class PackageDecl:
    code: str
    autoclave: str
    sterilized_at: int


@dataclass(frozen=True)
class ScenarioScript:
    name: str
    rooms: tuple[RoomDecl, ...]
    persons: tuple[PersonDecl, ...]
    packages: tuple[PackageDecl, ...]
    timeline: tuple[PhysicalAction, ...]


@dataclass(frozen=True)
class ChannelModel:
    """Transport behaviour between sensors and the gateway.

    Latency bounds are inclusive, in milliseconds. Loss applies only to the
    battery-switch -> smart-node notification hop; the smart uplink is
    reliable. `clock_skew_ms` is the absolute bound of a fixed per-node
    offset applied to reading timestamps (delivery times are unaffected).
    """

    dummy_to_smart_ms: tuple[int, int] = (5, 30)
    smart_uplink_ms: tuple[int, int] = (10, 80)
    loss_probability: float = 0.0
    clock_skew_ms: int = 0
    seed: int = 0

    def __post_init__(self):
        for name in ("dummy_to_smart_ms", "smart_uplink_ms"):
            low, high = getattr(self, name)
            if low < 0 or low > high:
                raise ScenarioError(f"{name} must satisfy 0 <= min <= max, got {(low, high)}")
        if not 0.0 <= self.loss_probability <= 1.0:
            raise ScenarioError(f"loss_probability must be within [0, 1], got {self.loss_probability}")
        if self.clock_skew_ms < 0:
            raise ScenarioError(f"clock_skew_ms must be >= 0, got {self.clock_skew_ms}")


def room_node_id(room_id: str) -> str:
    return f"{room_id}-node"


def room_sensor_id(room_id: str, device_kind: str) -> str:
    return f"{room_id}-{SENSOR_SUFFIX[device_kind]}"


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------


def parse_scenario(text: str) -> ScenarioScript:
    """Parse scenario text into a validated script.

    Grammar, one directive per line ('#' starts a comment):

        scenario <name>
        room <room_id> <room_kind> <kit>
        person <person_id> <role> <badge_tag>
        package <code> <autoclave_id> <sterilized_at_ms>
        at <offset_ms> <action> <args...>

    Offsets must be non-decreasing and every id an action mentions must be
    declared above the timeline. Raises ScenarioError with the offending
    line number.
    """
    name: str | None = None
    rooms: dict[str, RoomDecl] = {}
    persons: dict[str, PersonDecl] = {}
    packages: dict[str, PackageDecl] = {}
    timeline: list[PhysicalAction] = []
    badges_seen: set[str] = set()
    # person -> room they are currently in, from the timeline so far
    where: dict[str, str] = {}
    last_at = -1

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        directive = parts[0]

        if directive == "scenario":
            if name is not None:
                raise ScenarioError("duplicate scenario directive", lineno)
            if len(parts) != 2:
                raise ScenarioError("expected: scenario <name>", lineno)
            name = parts[1]
            continue

        if name is None:
            raise ScenarioError("first directive must be: scenario <name>", lineno)

        if directive == "room":
            if len(parts) != 4:
                raise ScenarioError("expected: room <room_id> <room_kind> <kit>", lineno)
            room_id, room_kind, kit = parts[1:]
            if room_id in rooms:
                raise ScenarioError(f"duplicate room: {room_id}", lineno)
            if kit not in ROOM_KITS:
                raise ScenarioError(f"unknown kit {kit!r}, expected one of {sorted(ROOM_KITS)}", lineno)
            rooms[room_id] = RoomDecl(room_id=room_id, kind=room_kind, kit=kit)
        elif directive == "person":
            if len(parts) != 4:
                raise ScenarioError("expected: person <person_id> <role> <badge_tag>", lineno)
            person_id, role, badge = parts[1:]
            if person_id in persons:
                raise ScenarioError(f"duplicate person: {person_id}", lineno)
            if role not in PERSON_ROLES:
                raise ScenarioError(f"unknown role {role!r}, expected one of {PERSON_ROLES}", lineno)
            if badge in badges_seen:
                raise ScenarioError(f"duplicate badge: {badge}", lineno)
            badges_seen.add(badge)
            persons[person_id] = PersonDecl(person_id=person_id, role=role, badge=badge)
        elif directive == "package":
            if len(parts) != 4:
                raise ScenarioError("expected: package <code> <autoclave_id> <sterilized_at_ms>", lineno)
            code, autoclave, at_text = parts[1:]
            if code in packages:
                raise ScenarioError(f"duplicate package: {code}", lineno)
            packages[code] = PackageDecl(code=code, autoclave=autoclave, sterilized_at=_int(at_text, lineno))
        elif directive == "at":
            if len(parts) < 3:
                raise ScenarioError("expected: at <offset_ms> <action> <args...>", lineno)
            at = _int(parts[1], lineno)
            if at < last_at:
                raise ScenarioError(f"timeline offsets must be non-decreasing ({at} after {last_at})", lineno)
            last_at = at
            action = _parse_action(at, parts[2], parts[3:], persons, rooms, packages, where, lineno)
            timeline.append(action)
        else:
            raise ScenarioError(f"unknown directive: {directive}", lineno)

    if name is None:
        raise ScenarioError("missing scenario directive")
    return ScenarioScript(
        name=name,
        rooms=tuple(rooms.values()),
        persons=tuple(persons.values()),
        packages=tuple(packages.values()),
        timeline=tuple(timeline),
    )


def _int(text: str, lineno: int) -> int:
    try:
        return int(text)
    except ValueError:
        raise ScenarioError(f"expected an integer, got {text!r}", lineno) from None


def _parse_action(
    at: int,
    kind: str,
    args: list[str],
    persons: dict[str, PersonDecl],
    rooms: dict[str, RoomDecl],
    packages: dict[str, PackageDecl],
    where: dict[str, str],
    lineno: int,
) -> PhysicalAction:
    if kind not in ACTION_SHAPES:
        raise ScenarioError(f"unknown action: {kind}", lineno)
    needs_person, needs_room, needs_item = ACTION_SHAPES[kind]
    expected = int(needs_person) + int(needs_room) + int(needs_item)
    if len(args) != expected:
        raise ScenarioError(f"{kind} takes {expected} argument(s), got {len(args)}", lineno)

    cursor = iter(args)
    person = next(cursor) if needs_person else None
    room = next(cursor) if needs_room else None
    item = next(cursor) if needs_item else None

    if person is not None and person not in persons:
        raise ScenarioError(f"undeclared person: {person}", lineno)
    if room is not None and room not in rooms:
        raise ScenarioError(f"undeclared room: {room}", lineno)

    if kind == "depart":
        room = where.get(person)
        if room is None:
            raise ScenarioError(f"{person} cannot depart: not inside any room", lineno)
    if kind == "use_dispenser":
        if item not in DISPENSER_DEVICE_BY_KIND:
            raise ScenarioError(
                f"unknown dispenser kind {item!r}, expected one of {sorted(DISPENSER_DEVICE_BY_KIND)}", lineno
            )
        required = DISPENSER_DEVICE_BY_KIND[item]
    else:
        required = _REQUIRED_DEVICE[kind]
    if required not in ROOM_KITS[rooms[room].kit]:
        raise ScenarioError(f"room {room} has no {required} (kit {rooms[room].kit!r})", lineno)

    if kind in ("approach_sink", "approach_bed", "lie_on_table") and where.get(person) != room:
        raise ScenarioError(f"{person} is not inside {room}", lineno)
    if kind == "corridor_pass" and where.get(person) == room:
        raise ScenarioError(f"{person} is inside {room}; corridor_pass is for people passing outside", lineno)
    if kind == "scan_barcode" and item not in packages:
        raise ScenarioError(f"undeclared package: {item}", lineno)

    if kind == "move_through_door":
        if where.get(person) == room:
            del where[person]
        elif person in where:
            raise ScenarioError(f"{person} is inside {where[person]}, cannot enter {room}", lineno)
        else:
            where[person] = room
    elif kind == "depart":
        del where[person]

    return PhysicalAction(at=at, kind=kind, person=person, room=room, item=item)


def load_scenario_file(path: str | Path) -> ScenarioScript:
    return parse_scenario(Path(path).read_text(encoding="utf-8"))


def build_registry(script: ScenarioScript) -> Registry:
    """Materialize the scenario's declarations into a fresh registry."""
    reg = Registry()
    for room in script.rooms:
        reg.register_room(RoomRecord(room_id=room.room_id, kind=room.kind))
        node = room_node_id(room.room_id)
        # smart node devices first: dummy registration checks its node exists
        ordered = sorted(ROOM_KITS[room.kit], key=lambda k: (DEVICE_KINDS[k] != "smart", k))
        for device_kind in ordered:
            reg.register_device(
                DeviceRecord(
                    sensor_id=room_sensor_id(room.room_id, device_kind),
                    node_id=node,
                    device_kind=device_kind,
                    room=room.room_id,
                    node_class=DEVICE_KINDS[device_kind],
                )
            )
    for person in script.persons:
        reg.register_person(
            PersonRecord(
                person_id=person.person_id,
                display_name=person.person_id,
                role=person.role,
                badge_tag=person.badge,
            )
        )
    for package in script.packages:
        reg.add_sterilized_package(
            SterilizationLogEntry(
                package_code=package.code,
                sterilized_at=package.sterilized_at,
                autoclave_id=package.autoclave,
            )
        )
    return reg


# ---------------------------------------------------------------------------
# Expansion and delivery
# ---------------------------------------------------------------------------


def _firings(action: PhysicalAction, badge_of: dict[str, str]) -> list[tuple[str, ReadingPayload]]:
    """Sensor activations an action causes, as (device_kind, payload)."""
    kind = action.kind
    if kind in ("move_through_door", "depart", "corridor_pass"):
        return [("door_antenna", RfidTag(tag_id=badge_of[action.person], antenna=AntennaKind.DOOR))]
    if kind == "approach_sink":
        return [("sink_antenna", RfidTag(tag_id=badge_of[action.person], antenna=AntennaKind.SINK))]
    if kind == "use_dispenser":
        return [(DISPENSER_DEVICE_BY_KIND[action.item], DispenserActivated(kind=DispenserKind(action.item)))]
    if kind == "use_tap":
        return [("tap", TapUsed())]
    if kind == "approach_bed":
        # warm body hits the ceiling array and the bed-side cell together
        return [("thermal_array", ThermalPresence(value=True)), ("bed_proximity", Presence(value=True))]
    if kind == "lie_on_table":
        return [("table_infrared", Presence(value=True))]
    if kind == "scan_barcode":
        return [("barcode_reader", BarcodeScanned(code=action.item))]
    if kind == "use_spray":
        return [("spray_holder", SprayUsed())]
    raise ScenarioError(f"unknown action: {kind}")


@dataclass(frozen=True)
class Delivery:
    """A reading plus the virtual instant it reaches the gateway."""

    delivered_at: int
    reading: SensorReading

    def trace_line(self) -> str:
        return stable_json({"delivered_at": self.delivered_at, "reading": self.reading.to_wire()})


class ScenarioSim:
    """Replays a script through the channel model.

    Scripted actions are expanded lazily in timeline order, so RNG draws do
    not depend on how often step() is called. inject() splices an extra
    action at the current virtual time, e.g. to poke a live system from the
    shell. step() returns None once script and injections are exhausted.
    """

    def __init__(self, script: ScenarioScript, channel: ChannelModel | None = None):
        self.script = script
        self.channel = channel or ChannelModel()
        self.registry = build_registry(script)
        self._badge_of = {p.person_id: p.badge for p in script.persons}
        self._rng = random.Random(self.channel.seed)
        skew = self.channel.clock_skew_ms
        self._node_skew = {
            node: (self._rng.randint(-skew, skew) if skew else 0)
            for node in sorted(room_node_id(r.room_id) for r in script.rooms)
        }
        self._url_seq = 0
        self._order = 0
        self._queue: list[tuple[int, int, SensorReading]] = []
        self._pending = deque(script.timeline)
        self._where: dict[str, str] = {}
        self.virtual_now = 0
        self.lost_urls: list[str] = []

    def _schedule(self, action: PhysicalAction) -> None:
        for device_kind, payload in _firings(action, self._badge_of):
            device = self.registry.room_device_of_kind(action.room, device_kind)
            if device is None:
                raise ScenarioError(f"room {action.room} has no {device_kind}")
            self._url_seq += 1
            url = f"reading://{device.node_id}/{device.sensor_id}/{self._url_seq:05d}"
            uplink = self._rng.randint(*self.channel.smart_uplink_ms)
            if device.node_class == "dummy":
                lost = self._rng.random() < self.channel.loss_probability
                hop = self._rng.randint(*self.channel.dummy_to_smart_ms)
            else:
                lost, hop = False, 0
            if lost:
                self.lost_urls.append(url)
                continue
            reading = SensorReading(
                reading_url=url,
                sensor_id=device.sensor_id,
                node_id=device.node_id,
                timestamp=action.at + self._node_skew[device.node_id],
                payload=payload,
            )
            self._order += 1
            heapq.heappush(self._queue, (action.at + hop + uplink, self._order, reading))
        if action.kind == "move_through_door":
            if self._where.get(action.person) == action.room:
                del self._where[action.person]
            else:
                self._where[action.person] = action.room
        elif action.kind == "depart":
            self._where.pop(action.person, None)

    def _catch_up(self) -> None:
        # expand every scripted action that could deliver before the queue head
        while self._pending and (not self._queue or self._pending[0].at <= self._queue[0][0]):
            self._schedule(self._pending.popleft())

    def peek(self) -> int | None:
        """Delivery time of the next reading, or None when exhausted."""
        self._catch_up()
        return self._queue[0][0] if self._queue else None

    def step(self) -> Delivery | None:
        """Next delivered reading, or None once the scenario is exhausted."""
        self._catch_up()
        if not self._queue:
            return None
        delivered_at, _, reading = heapq.heappop(self._queue)
        self.virtual_now = max(self.virtual_now, delivered_at)
        return Delivery(delivered_at=delivered_at, reading=reading)

    def inject(
        self, kind: str, person: str | None = None, room: str | None = None, item: str | None = None
    ) -> list[int]:
        """Splice an unscripted action in at the current virtual time.

        Returns the delivery times of the firings it scheduled (empty when
        every firing was lost in transit).
        """
        if kind not in ACTION_SHAPES:
            raise ScenarioError(f"unknown action: {kind}")
        needs_person, needs_room, needs_item = ACTION_SHAPES[kind]
        if needs_person and person is None:
            raise ScenarioError(f"{kind} needs a person")
        if needs_item and item is None:
            raise ScenarioError(f"{kind} needs an argument")
        if person is not None and person not in self._badge_of:
            raise ScenarioError(f"undeclared person: {person}")
        if kind == "depart":
            room = self._where.get(person)
            if room is None:
                raise ScenarioError(f"{person} cannot depart: not inside any room")
        elif needs_room:
            if room is None:
                raise ScenarioError(f"{kind} needs a room")
            if self.registry.room_kind(room) is None:
                raise ScenarioError(f"undeclared room: {room}")
        if kind == "use_dispenser" and item not in DISPENSER_DEVICE_BY_KIND:
            raise ScenarioError(f"unknown dispenser kind {item!r}")
        mark = self._order
        self._schedule(PhysicalAction(at=self.virtual_now, kind=kind, person=person, room=room, item=item))
        return sorted(entry[0] for entry in self._queue if entry[1] > mark)

    def run(self) -> list[Delivery]:
        out: list[Delivery] = []
        while (delivery := self.step()) is not None:
            out.append(delivery)
        return out


def run_scenario(script: ScenarioScript, channel: ChannelModel | None = None) -> list[Delivery]:
    """One-shot convenience: expand the whole script to delivered readings."""
    return ScenarioSim(script, channel).run()


def iter_trace_lines(deliveries: list[Delivery]) -> Iterator[str]:
    for delivery in deliveries:
        yield delivery.trace_line()
