"""Sensor readings and derived domain events.

This module owns the two vocabularies everything else is built on:

* the raw sensor-reading payload variants produced by room hardware
  (antennas, dispensers, taps, thermal arrays, infrared cells, barcode
  readers, spray holders), together with their wire encoding, and
* the closed set of high-level domain events the correlation rules derive
  from those readings.

Timestamps are integer milliseconds. Durations configured elsewhere in
seconds are converted at the boundary.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

logger = logging.getLogger(__name__)


def stable_json(obj: Any) -> str:
    """Canonical one-line JSON: sorted keys, no whitespace."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))

# Wire object field names are a published interface; do not rename.
WIRE_FIELDS = ("url", "sensor_id", "node_id", "timestamp_ms", "payload")


class WireFormatError(ValueError):
    """Raised when a raw reading dict is structurally malformed.

    Attributes:
        field: Name of the offending field, for error responses.
    """

    def __init__(self, field_name: str, message: str):
        super().__init__(message)
        self.field = field_name


class AntennaKind(str, Enum):
    DOOR = "door"
    SINK = "sink"
    TABLE = "table"


class DispenserKind(str, Enum):
    SOAP = "soap"
    GEL = "gel"
    GLOVES = "gloves"
    TOWEL = "towel"
    TRASH = "trash"


@dataclass(frozen=True)
class Presence:
    """Boolean proximity report (bed-side or table-side cell)."""

    value: bool


@dataclass(frozen=True)
class RfidTag:
    """A badge tag observed by one of the room antennas."""

    tag_id: str
    antenna: AntennaKind


@dataclass(frozen=True)
class DispenserActivated:
    """A wall dispenser lever or pedal was used once."""

    kind: DispenserKind


@dataclass(frozen=True)
class BarcodeScanned:
    code: str


@dataclass(frozen=True)
class ThermalPresence:
    """Thermal array detected (or stopped detecting) a warm body."""

    value: bool


@dataclass(frozen=True)
class SprayUsed:
    """Disinfectant spray bottle lifted from its holder and used."""


@dataclass(frozen=True)
class TapUsed:
    """Water tap opened."""


ReadingPayload = (
    Presence
    | RfidTag
    | DispenserActivated
    | BarcodeScanned
    | ThermalPresence
    | SprayUsed
    | TapUsed
)

# type tag <-> payload class, single source of truth for the wire format
_PAYLOAD_TAGS: dict[str, type] = {
    "presence": Presence,
    "rfid_tag": RfidTag,
    "dispenser_activated": DispenserActivated,
    "barcode_scanned": BarcodeScanned,
    "thermal_presence": ThermalPresence,
    "spray_used": SprayUsed,
    "tap_used": TapUsed,
}
_TAG_BY_CLASS = {cls: tag for tag, cls in _PAYLOAD_TAGS.items()}


def payload_to_wire(payload: ReadingPayload) -> dict[str, Any]:
    tag = _TAG_BY_CLASS[type(payload)]
    body: dict[str, Any] = {"type": tag}
    if isinstance(payload, Presence) or isinstance(payload, ThermalPresence):
        body["value"] = payload.value
    elif isinstance(payload, RfidTag):
        body["tag_id"] = payload.tag_id
        body["antenna"] = payload.antenna.value
    elif isinstance(payload, DispenserActivated):
        body["kind"] = payload.kind.value
    elif isinstance(payload, BarcodeScanned):
        body["code"] = payload.code
    return body


def payload_from_wire(raw: Any) -> ReadingPayload:
    """Decode the tagged payload union.

    Raises:
        WireFormatError: unknown tag, missing or mistyped member fields.
    """
    if not isinstance(raw, dict):
        raise WireFormatError("payload", "payload must be an object")
    tag = raw.get("type")
    if tag not in _PAYLOAD_TAGS:
        raise WireFormatError("payload.type", f"unknown payload type: {tag!r}")
    try:
        if tag == "presence":
            return Presence(value=_require_bool(raw, "value"))
        if tag == "thermal_presence":
            return ThermalPresence(value=_require_bool(raw, "value"))
        if tag == "rfid_tag":
            return RfidTag(
                tag_id=_require_str(raw, "tag_id"),
                antenna=AntennaKind(_require_str(raw, "antenna")),
            )
        if tag == "dispenser_activated":
            return DispenserActivated(kind=DispenserKind(_require_str(raw, "kind")))
        if tag == "barcode_scanned":
            return BarcodeScanned(code=_require_str(raw, "code"))
        if tag == "spray_used":
            return SprayUsed()
        return TapUsed()
    except ValueError as exc:
        if isinstance(exc, WireFormatError):
            raise
        raise WireFormatError("payload", f"bad payload member: {exc}") from exc


def _require_str(raw: dict[str, Any], key: str) -> str:
    value = raw.get(key)
    if not isinstance(value, str) or not value:
        raise WireFormatError(f"payload.{key}", f"payload field {key!r} must be a non-empty string")
    return value


def _require_bool(raw: dict[str, Any], key: str) -> bool:
    value = raw.get(key)
    if not isinstance(value, bool):
        raise WireFormatError(f"payload.{key}", f"payload field {key!r} must be a boolean")
    return value


@dataclass(frozen=True)
class SensorReading:
    """One observation as accepted from a node uplink.

    Args mirror the wire object: `reading_url` is the globally unique
    identifier used for ingestion idempotence, `node_id` names the uplinking
    smart node, `sensor_id` the individual sensor.
    """

    reading_url: str
    sensor_id: str
    node_id: str
    timestamp: int
    payload: ReadingPayload

    def to_wire(self) -> dict[str, Any]:
        return {
            "url": self.reading_url,
            "sensor_id": self.sensor_id,
            "node_id": self.node_id,
            "timestamp_ms": self.timestamp,
            "payload": payload_to_wire(self.payload),
        }


def reading_from_wire(raw: Any) -> SensorReading:
    """Decode and structurally validate a wire reading object.

    Only shape is checked here; registry lookups and clock-skew policy live
    in the correlation module.
    """
    if not isinstance(raw, dict):
        raise WireFormatError("", "reading must be a JSON object")
    for name in WIRE_FIELDS:
        if name not in raw:
            raise WireFormatError(name, f"missing mandatory field: {name}")
    url = raw["url"]
    sensor_id = raw["sensor_id"]
    node_id = raw["node_id"]
    timestamp = raw["timestamp_ms"]
    if not isinstance(url, str) or not url:
        raise WireFormatError("url", "url must be a non-empty string")
    if not isinstance(sensor_id, str) or not sensor_id:
        raise WireFormatError("sensor_id", "sensor_id must be a non-empty string")
    if not isinstance(node_id, str) or not node_id:
        raise WireFormatError("node_id", "node_id must be a non-empty string")
    if isinstance(timestamp, bool) or not isinstance(timestamp, int):
        raise WireFormatError("timestamp_ms", "timestamp_ms must be an integer (milliseconds)")
    return SensorReading(
        reading_url=url,
        sensor_id=sensor_id,
        node_id=node_id,
        timestamp=timestamp,
        payload=payload_from_wire(raw["payload"]),
    )


# ---------------------------------------------------------------------------
# Domain events
# ---------------------------------------------------------------------------

PERSON_ENTERED = "PersonEntered"
PERSON_EXITED = "PersonExited"
HAND_HYGIENE_PERFORMED = "HandHygienePerformed"
GLOVES_EQUIPPED = "GlovesEquipped"
EXAMINATION_STARTED = "ExaminationStarted"
PATIENT_ON_TABLE = "PatientOnTable"
EQUIPMENT_USED = "EquipmentUsed"
SURFACE_DISINFECTED = "SurfaceDisinfected"
PERSON_AT_SINK = "PersonAtSink"

# Closed taxonomy. Workflow documents and correlation rules may only use these.
EVENT_KINDS = frozenset(
    {
        PERSON_ENTERED,
        PERSON_EXITED,
        HAND_HYGIENE_PERFORMED,
        GLOVES_EQUIPPED,
        EXAMINATION_STARTED,
        PATIENT_ON_TABLE,
        EQUIPMENT_USED,
        SURFACE_DISINFECTED,
        PERSON_AT_SINK,
    }
)

HYGIENE_METHODS = ("soap", "gel")
EQUIPMENT_MODES = ("single_use", "sterilized")


@dataclass(frozen=True)
class DomainEvent:
    """High-level fact derived from one or more sensor readings.

    Attributes:
        event_id: Monotonic id assigned by the correlation stage.
        kind: One of EVENT_KINDS.
        room: Room the event happened in.
        timestamp: Event completion time, ms.
        subject: Person primarily performing/undergoing the event, if known.
        secondary_subject: Second participant (e.g. the patient being
            examined), if any.
        payload: Kind-specific details (method, mode, package_code, ...).
        provenance: reading_urls of every reading this event was derived
            from; never empty.
    """

    event_id: str
    kind: str
    room: str
    timestamp: int
    subject: str | None = None
    secondary_subject: str | None = None
    payload: dict[str, Any] = field(default_factory=dict)
    provenance: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.kind not in EVENT_KINDS:
            raise ValueError(f"unknown domain event kind: {self.kind!r}")
        if not self.provenance:
            raise ValueError("domain events must cite at least one source reading")

    def to_dict(self) -> dict[str, Any]:
        return {
            "event_id": self.event_id,
            "kind": self.kind,
            "room": self.room,
            "timestamp": self.timestamp,
            "subject": self.subject,
            "secondary_subject": self.secondary_subject,
            "payload": dict(self.payload),
            "provenance": list(self.provenance),
        }
