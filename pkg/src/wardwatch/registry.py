"""Facility registry: rooms, persons, users, devices, sterilization log.

The registry is the authority the correlation rules consult to resolve
badge tags to persons and sensors to rooms, and the authority the gateway
consults for API principals. It enforces the wiring invariants (unique ids,
badge uniqueness among active users, dummy sensors parented to a smart node
in the same room) at registration time so downstream code can trust lookups.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Iterable

logger = logging.getLogger(__name__)


class RegistryError(ValueError):
    """Registration rejected: duplicate id, dangling reference or bad wiring."""


# System access roles for API principals (closed set).
USER_ROLES = ("administrator", "epidemiologist", "clinical")

# Roles a badge-wearing person can fill in a workflow document.
PERSON_ROLES = ("patient", "practitioner", "nurse", "surgeon")

CLINICIAN_ROLES = frozenset({"practitioner", "nurse", "surgeon"})

# Device kinds, and which node class each sensor is attached to. Antennas,
# thermal arrays and barcode readers ride on the room's smart node; the
# battery-powered switches are dummy nodes that report to that smart node.
DEVICE_KINDS = {
    "door_antenna": "smart",
    "sink_antenna": "smart",
    "thermal_array": "smart",
    "barcode_reader": "smart",
    "soap_dispenser": "dummy",
    "gel_dispenser": "dummy",
    "glove_dispenser": "dummy",
    "towel_dispenser": "dummy",
    "trash_can": "dummy",
    "tap": "dummy",
    "bed_proximity": "dummy",
    "table_infrared": "dummy",
    "spray_holder": "dummy",
}

DISPENSER_DEVICE_BY_KIND = {
    "soap": "soap_dispenser",
    "gel": "gel_dispenser",
    "gloves": "glove_dispenser",
    "towel": "towel_dispenser",
    "trash": "trash_can",
}


@dataclass(frozen=True)
class RoomRecord:
    room_id: str
    kind: str  # e.g. gp_office, operating_room, consultation_room

    def to_dict(self) -> dict[str, Any]:
        return {"room_id": self.room_id, "kind": self.kind}


@dataclass(frozen=True)
class PersonRecord:
    """A badge-wearing person moving through the facility.

    Patients receive a temporary badge at reception, staff carry permanent
    ones; both are persons. API access is a separate concern (UserRecord).
    """

    person_id: str
    display_name: str
    role: str  # one of PERSON_ROLES
    badge_tag: str

    def to_dict(self) -> dict[str, Any]:
        return {
            "person_id": self.person_id,
            "display_name": self.display_name,
            "role": self.role,
            "badge_tag": self.badge_tag,
        }


@dataclass(frozen=True)
class UserRecord:
    """An API principal with a system access role."""

    user_id: str
    display_name: str
    role: str  # one of USER_ROLES
    badge_tag: str | None = None
    active: bool = True
    person_id: str | None = None  # clinical users link to their person record

    def to_dict(self) -> dict[str, Any]:
        return {
            "user_id": self.user_id,
            "display_name": self.display_name,
            "role": self.role,
            "badge_tag": self.badge_tag,
            "active": self.active,
            "person_id": self.person_id,
        }


@dataclass(frozen=True)
class DeviceRecord:
    """One sensor, wired to the smart node that uplinks its readings."""

    sensor_id: str
    node_id: str
    device_kind: str
    room: str
    node_class: str  # "dummy" | "smart"

    def to_dict(self) -> dict[str, Any]:
        return {
            "sensor_id": self.sensor_id,
            "node_id": self.node_id,
            "device_kind": self.device_kind,
            "room": self.room,
            "node_class": self.node_class,
        }


@dataclass
class SterilizationLogEntry:
    """Autoclave traceability: one sterilized package, consumed at most once."""

    package_code: str
    sterilized_at: int
    autoclave_id: str
    consumed_at: int | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "package_code": self.package_code,
            "sterilized_at": self.sterilized_at,
            "autoclave_id": self.autoclave_id,
            "consumed_at": self.consumed_at,
        }


@dataclass
class Registry:
    rooms: dict[str, RoomRecord] = field(default_factory=dict)
    persons: dict[str, PersonRecord] = field(default_factory=dict)
    users: dict[str, UserRecord] = field(default_factory=dict)
    devices: dict[str, DeviceRecord] = field(default_factory=dict)
    sterilization_log: dict[str, SterilizationLogEntry] = field(default_factory=dict)

    # -- registration -----------------------------------------------------

    def register_room(self, room: RoomRecord) -> RoomRecord:
        if room.room_id in self.rooms:
            raise RegistryError(f"duplicate room id: {room.room_id}")
        if not room.kind:
            raise RegistryError("room kind must be non-empty")
        self.rooms[room.room_id] = room
        return room

    def register_person(self, person: PersonRecord) -> PersonRecord:
        if person.person_id in self.persons:
            raise RegistryError(f"duplicate person id: {person.person_id}")
        if person.role not in PERSON_ROLES:
            raise RegistryError(f"unknown person role: {person.role!r}")
        if any(p.badge_tag == person.badge_tag for p in self.persons.values()):
            raise RegistryError(f"badge tag already assigned: {person.badge_tag}")
        self.persons[person.person_id] = person
        return person

    def register_user(self, user: UserRecord) -> UserRecord:
        if user.user_id in self.users:
            raise RegistryError(f"duplicate user id: {user.user_id}")
        if user.role not in USER_ROLES:
            raise RegistryError(f"unknown user role: {user.role!r}")
        if user.badge_tag is not None and user.active:
            # badge uniqueness is only enforced among active users
            for other in self.users.values():
                if other.active and other.badge_tag == user.badge_tag:
                    raise RegistryError(f"badge tag already assigned to active user: {user.badge_tag}")
        if user.person_id is not None and user.person_id not in self.persons:
            raise RegistryError(f"user references unknown person: {user.person_id}")
        self.users[user.user_id] = user
        return user

    def register_device(self, device: DeviceRecord) -> DeviceRecord:
        if device.sensor_id in self.devices:
            raise RegistryError(f"duplicate sensor id: {device.sensor_id}")
        if device.device_kind not in DEVICE_KINDS:
            raise RegistryError(f"unknown device kind: {device.device_kind!r}")
        if device.room not in self.rooms:
            raise RegistryError(f"device placed in unknown room: {device.room}")
        if device.node_class not in ("dummy", "smart"):
            raise RegistryError(f"bad node class: {device.node_class!r}")
        if device.node_class == "dummy":
            # dummy nodes report to exactly one smart node in the same room
            if device.node_id not in self._smart_node_ids(device.room):
                raise RegistryError(
                    f"dummy sensor {device.sensor_id} must report to a smart node "
                    f"in room {device.room}; {device.node_id!r} is not one"
                )
        self.devices[device.sensor_id] = device
        return device

    def _smart_node_ids(self, room: str) -> set[str]:
        return {
            d.node_id
            for d in self.devices.values()
            if d.room == room and d.node_class == "smart"
        }

    # -- sterilization traceability ----------------------------------------

    def add_sterilized_package(self, entry: SterilizationLogEntry) -> SterilizationLogEntry:
        if entry.package_code in self.sterilization_log:
            raise RegistryError(f"package already logged: {entry.package_code}")
        self.sterilization_log[entry.package_code] = entry
        return entry

    def consume_package(self, package_code: str, at: int) -> SterilizationLogEntry | None:
        """Mark a package as taken out of sterile storage.

        Returns the entry when this was a valid first use, None when the code
        is unknown or already consumed (callers flag the use as unverified).
        """
        entry = self.sterilization_log.get(package_code)
        if entry is None or entry.consumed_at is not None:
            return None
        entry.consumed_at = at
        return entry

    # -- lookups ------------------------------------------------------------

    def person_by_badge(self, badge_tag: str) -> PersonRecord | None:
        for person in self.persons.values():
            if person.badge_tag == badge_tag:
                return person
        return None

    def room_kind(self, room_id: str) -> str | None:
        room = self.rooms.get(room_id)
        return room.kind if room else None

    def rooms_of_kind(self, kind: str) -> list[RoomRecord]:
        return [r for r in self.rooms.values() if r.kind == kind]

    def device(self, sensor_id: str) -> DeviceRecord | None:
        return self.devices.get(sensor_id)

    def room_device_of_kind(self, room: str, device_kind: str) -> DeviceRecord | None:
        for device in sorted(self.devices.values(), key=lambda d: d.sensor_id):
            if device.room == room and device.device_kind == device_kind:
                return device
        return None

    def users_with_role(self, role: str) -> list[UserRecord]:
        return [u for u in self.users.values() if u.role == role and u.active]

    def users_for_person(self, person_id: str) -> list[UserRecord]:
        return [u for u in self.users.values() if u.person_id == person_id and u.active]


def registry_from_records(records: Iterable[dict[str, Any]]) -> Registry:
    """Rebuild a registry from persisted registration records (in order)."""
    reg = Registry()
    for rec in records:
        kind = rec.get("record")
        body = rec.get("body", {})
        if kind == "room":
            reg.register_room(RoomRecord(**body))
        elif kind == "person":
            reg.register_person(PersonRecord(**body))
        elif kind == "user":
            reg.register_user(UserRecord(**body))
        elif kind == "device":
            reg.register_device(DeviceRecord(**body))
        elif kind == "sterilized_package":
            reg.add_sterilized_package(SterilizationLogEntry(**body))
        elif kind == "package_consumed":
            entry = reg.sterilization_log.get(body["package_code"])
            if entry is not None:
                entry.consumed_at = body["consumed_at"]
        else:
            logger.warning("skipping unknown registry record kind: %r", kind)
    return reg
