"""Correlation: low-level sensor readings to high-level domain events.

Readings enter a timestamp-ordered buffer and are processed once the
watermark (highest timestamp seen) has moved one skew bound past them, so
moderately out-of-order delivery does not change the derived events.
Readings arriving later than an already-flushed boundary are dropped and
audited. Within a flush batch, readings process in (timestamp, reading_url)
order; readings sharing a timestamp therefore process in url order.

Derivation rules:

* door-antenna badge reads toggle room occupancy (enter/leave with
  direction from the occupancy state itself);
* hand hygiene pairs a sink-presence read with a soap or gel dispenser
  activation inside the pairing window, soap additionally demanding a tap
  use; attribution picks the nearest-in-time sink read, ties to the
  earlier one;
* glove dispenser activations are attributed the same way;
* examinations fuse bed-side presence (thermal array or bed proximity)
  with room occupancy containing a clinician and a patient, once per
  episode;
* table occupancy fuses the table infrared cell with a patient occupant;
* barcode scans become equipment use, verified against the sterilization
  log (single consumption per package);
* spray-holder use becomes a surface disinfection.

Soap/gel/glove activations that never find a person within the window are
recorded as unattributed for analytics and emit no event.
"""

from __future__ import annotations

import heapq
import itertools
import logging
from dataclasses import dataclass, field
from typing import Any, Callable

from .events import (
    AntennaKind,
    BarcodeScanned,
    DispenserActivated,
    DispenserKind,
    DomainEvent,
    EQUIPMENT_USED,
    EXAMINATION_STARTED,
    GLOVES_EQUIPPED,
    HAND_HYGIENE_PERFORMED,
    PATIENT_ON_TABLE,
    PERSON_AT_SINK,
    PERSON_ENTERED,
    PERSON_EXITED,
    Presence,
    ReadingPayload,
    RfidTag,
    SensorReading,
    SprayUsed,
    SURFACE_DISINFECTED,
    TapUsed,
    ThermalPresence,
)
from .registry import CLINICIAN_ROLES, Registry

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CorrelationWindows:
    """Tunable timing windows, seconds. All must be positive."""

    hand_hygiene_pair_window_s: float = 30.0
    exam_fusion_window_s: float = 10.0
    skew_bound_s: float = 5.0
    duplicate_suppression_window_s: float = 2.0

    def __post_init__(self) -> None:
        for name in (
            "hand_hygiene_pair_window_s",
            "exam_fusion_window_s",
            "skew_bound_s",
            "duplicate_suppression_window_s",
        ):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def pair_ms(self) -> int:
        return int(self.hand_hygiene_pair_window_s * 1000)

    @property
    def fusion_ms(self) -> int:
        return int(self.exam_fusion_window_s * 1000)

    @property
    def skew_ms(self) -> int:
        return int(self.skew_bound_s * 1000)

    @property
    def dup_ms(self) -> int:
        return int(self.duplicate_suppression_window_s * 1000)


@dataclass(frozen=True)
class ValidationResult:
    ok: bool
    reason: str = ""
    detail: str = ""


# device kind -> acceptable payload check
def _payload_compatible(device_kind: str, payload: ReadingPayload) -> bool:
    if device_kind == "door_antenna":
        return isinstance(payload, RfidTag) and payload.antenna is AntennaKind.DOOR
    if device_kind == "sink_antenna":
        return isinstance(payload, RfidTag) and payload.antenna is AntennaKind.SINK
    if device_kind == "thermal_array":
        return isinstance(payload, ThermalPresence)
    if device_kind in ("bed_proximity", "table_infrared"):
        return isinstance(payload, Presence)
    if device_kind == "tap":
        return isinstance(payload, TapUsed)
    if device_kind == "barcode_reader":
        return isinstance(payload, BarcodeScanned)
    if device_kind == "spray_holder":
        return isinstance(payload, SprayUsed)
    expected = {
        "soap_dispenser": DispenserKind.SOAP,
        "gel_dispenser": DispenserKind.GEL,
        "glove_dispenser": DispenserKind.GLOVES,
        "towel_dispenser": DispenserKind.TOWEL,
        "trash_can": DispenserKind.TRASH,
    }.get(device_kind)
    return isinstance(payload, DispenserActivated) and payload.kind is expected


@dataclass
class _SinkRead:
    person: str
    ts: int
    url: str


@dataclass
class _PendingActivation:
    kind: DispenserKind
    ts: int
    url: str


@dataclass
class _PendingTap:
    ts: int
    url: str


@dataclass
class _PendingPresence:
    ts: int
    url: str


@dataclass
class Correlator:
    """Stateful reading-to-event derivation over one facility registry.

    Args:
        registry: Authority for sensors, badges, rooms and the
            sterilization log (consumed in place on verified equipment use).
        windows: Timing configuration.
        on_unattributed: Optional sink for unattributed-activation records.
        on_audit: Optional sink for audit notes (late drops, unknown badges,
            occupancy corrections, duplicate suppressions).
    """

    registry: Registry
    windows: CorrelationWindows = field(default_factory=CorrelationWindows)
    on_unattributed: Callable[[dict[str, Any]], None] | None = None
    on_audit: Callable[[dict[str, Any]], None] | None = None

    # ordered buffer
    _heap: list[tuple[int, str, SensorReading]] = field(default_factory=list)
    _watermark: int | None = None
    _flushed_cutoff: int | None = None

    # derivation state
    room_occupancy: dict[str, dict[str, int]] = field(default_factory=dict)
    _sink_reads: dict[str, list[_SinkRead]] = field(default_factory=dict)
    _activations: dict[str, list[_PendingActivation]] = field(default_factory=dict)
    _taps: dict[str, list[_PendingTap]] = field(default_factory=dict)
    _bed_presence: dict[str, list[_PendingPresence]] = field(default_factory=dict)
    _table_presence: dict[str, list[_PendingPresence]] = field(default_factory=dict)
    _exam_latch: dict[str, str] = field(default_factory=dict)
    _table_latch: dict[str, str] = field(default_factory=dict)
    _last_by_sensor: dict[str, tuple[ReadingPayload, int]] = field(default_factory=dict)
    _event_counter: itertools.count = field(default_factory=lambda: itertools.count(1))

    # -- validation ---------------------------------------------------------

    def validate_reading(self, reading: SensorReading, received_at: int) -> ValidationResult:
        """Registry and clock checks for a structurally sound reading."""
        device = self.registry.device(reading.sensor_id)
        if device is None:
            return ValidationResult(False, "unknown_sensor", reading.sensor_id)
        if not _payload_compatible(device.device_kind, reading.payload):
            return ValidationResult(
                False,
                "payload_mismatch",
                f"{type(reading.payload).__name__} not valid for {device.device_kind}",
            )
        if reading.timestamp - received_at > self.windows.skew_ms:
            return ValidationResult(
                False,
                "timestamp_out_of_skew",
                f"timestamp {reading.timestamp} ahead of clock {received_at}",
            )
        return ValidationResult(True)

    # -- buffer -------------------------------------------------------------

    def ingest_reading(self, reading: SensorReading) -> list[DomainEvent]:
        """Buffer one validated reading; process everything now due.

        Returns the domain events derived by this call (possibly from
        earlier readings whose skew window just elapsed).
        """
        if self._flushed_cutoff is not None and reading.timestamp < self._flushed_cutoff:
            self._audit(
                "late_reading_dropped",
                room=None,
                detail=f"{reading.reading_url} ts={reading.timestamp} cutoff={self._flushed_cutoff}",
                ts=reading.timestamp,
            )
            return []
        heapq.heappush(self._heap, (reading.timestamp, reading.reading_url, reading))
        if self._watermark is None or reading.timestamp > self._watermark:
            self._watermark = reading.timestamp
        return self._flush_due()

    def _flush_due(self) -> list[DomainEvent]:
        if self._watermark is None:
            return []
        cutoff = self._watermark - self.windows.skew_ms
        if self._flushed_cutoff is None or cutoff > self._flushed_cutoff:
            self._flushed_cutoff = cutoff
        events: list[DomainEvent] = []
        while self._heap and self._heap[0][0] <= self._flushed_cutoff:
            _, _, reading = heapq.heappop(self._heap)
            events.extend(self._process(reading))
        return events

    def flush(self) -> list[DomainEvent]:
        """Drain the buffer regardless of skew (stream idle or ending)."""
        events: list[DomainEvent] = []
        while self._heap:
            ts, _, reading = heapq.heappop(self._heap)
            if self._flushed_cutoff is None or ts > self._flushed_cutoff:
                self._flushed_cutoff = ts
            events.extend(self._process(reading))
        return events

    def close(self) -> list[DomainEvent]:
        """End of stream: drain, then expire every pending activation."""
        events = self.flush()
        for room in list(self._activations):
            self._expire_activations(room, None)
        return events

    # -- helpers ------------------------------------------------------------

    def _audit(self, note: str, room: str | None, detail: str, ts: int) -> None:
        logger.debug("audit %s: %s", note, detail)
        if self.on_audit is not None:
            self.on_audit({"note": note, "room": room, "detail": detail, "timestamp": ts})

    def _emit(
        self,
        kind: str,
        room: str,
        ts: int,
        provenance: tuple[str, ...],
        subject: str | None = None,
        secondary: str | None = None,
        payload: dict[str, Any] | None = None,
    ) -> DomainEvent:
        return DomainEvent(
            event_id=f"ev-{next(self._event_counter):06d}",
            kind=kind,
            room=room,
            timestamp=ts,
            subject=subject,
            secondary_subject=secondary,
            payload=payload or {},
            provenance=provenance,
        )

    def _expire_activations(self, room: str, now: int | None) -> None:
        """Drop pending soap/gel/glove activations that ran out their pairing
        window (now=None expires everything; end of stream)."""
        keep: list[_PendingActivation] = []
        for act in self._activations.get(room, []):
            if now is not None and act.ts >= now - self.windows.pair_ms:
                keep.append(act)
                continue
            had_sink = any(
                abs(act.ts - s.ts) <= self.windows.pair_ms for s in self._sink_reads.get(room, [])
            )
            reason = "no_tap_within_window" if (act.kind is DispenserKind.SOAP and had_sink) else "no_person_in_window"
            record = {
                "room": room,
                "kind": act.kind.value,
                "timestamp": act.ts,
                "reading_url": act.url,
                "reason": reason,
            }
            self._audit("unattributed_activation", room, f"{act.kind.value} at {act.ts}: {reason}", act.ts)
            if self.on_unattributed is not None:
                self.on_unattributed(record)
        self._activations[room] = keep

    def _prune(self, room: str, now: int) -> None:
        pair_floor = now - self.windows.pair_ms
        fusion_floor = now - self.windows.fusion_ms
        self._sink_reads[room] = [s for s in self._sink_reads.get(room, []) if s.ts >= pair_floor]
        self._taps[room] = [t for t in self._taps.get(room, []) if t.ts >= pair_floor]
        self._bed_presence[room] = [p for p in self._bed_presence.get(room, []) if p.ts >= fusion_floor]
        self._table_presence[room] = [p for p in self._table_presence.get(room, []) if p.ts >= fusion_floor]
        self._expire_activations(room, now)

    # -- processing ---------------------------------------------------------

    def _process(self, reading: SensorReading) -> list[DomainEvent]:
        device = self.registry.device(reading.sensor_id)
        if device is None:  # validated upstream; defensive
            return []
        room = device.room
        now = reading.timestamp

        last = self._last_by_sensor.get(reading.sensor_id)
        if last is not None and last[0] == reading.payload and now - last[1] <= self.windows.dup_ms:
            self._last_by_sensor[reading.sensor_id] = (reading.payload, now)
            self._audit("duplicate_suppressed", room, reading.reading_url, now)
            return []
        self._last_by_sensor[reading.sensor_id] = (reading.payload, now)

        self._prune(room, now)

        payload = reading.payload
        if isinstance(payload, RfidTag):
            if payload.antenna is AntennaKind.DOOR:
                return self._on_door_read(room, reading)
            if payload.antenna is AntennaKind.SINK:
                return self._on_sink_read(room, reading)
            self._audit("unsupported_antenna", room, f"{payload.antenna.value} at {reading.sensor_id}", now)
            return []
        if isinstance(payload, DispenserActivated):
            return self._on_dispenser(room, reading, payload.kind)
        if isinstance(payload, TapUsed):
            self._taps.setdefault(room, []).append(_PendingTap(now, reading.reading_url))
            return self._attempt_hygiene(room)
        if isinstance(payload, ThermalPresence) or (
            isinstance(payload, Presence) and device.device_kind == "bed_proximity"
        ):
            if payload.value:
                self._bed_presence.setdefault(room, []).append(
                    _PendingPresence(now, reading.reading_url)
                )
                return self._attempt_examination(room, now)
            return []
        if isinstance(payload, Presence) and device.device_kind == "table_infrared":
            if payload.value:
                self._table_presence.setdefault(room, []).append(
                    _PendingPresence(now, reading.reading_url)
                )
                return self._attempt_table(room, now)
            return []
        if isinstance(payload, BarcodeScanned):
            return self._on_barcode(room, reading, payload.code)
        if isinstance(payload, SprayUsed):
            return [self._emit(SURFACE_DISINFECTED, room, now, (reading.reading_url,))]
        return []

    # -- room transit ---------------------------------------------------------

    def derive_room_transit(self, room: str, reading: SensorReading) -> list[DomainEvent]:
        return self._on_door_read(room, reading)

    def _on_door_read(self, room: str, reading: SensorReading) -> list[DomainEvent]:
        assert isinstance(reading.payload, RfidTag)
        person = self.registry.person_by_badge(reading.payload.tag_id)
        now = reading.timestamp
        if person is None:
            self._audit("unknown_badge", room, reading.payload.tag_id, now)
            return []
        pid = person.person_id
        events: list[DomainEvent] = []
        occupants = self.room_occupancy.setdefault(room, {})
        if pid in occupants:
            del occupants[pid]
            events.append(
                self._emit(PERSON_EXITED, room, now, (reading.reading_url,), subject=pid)
            )
            if self._exam_latch.get(room) == pid:
                del self._exam_latch[room]
            if self._table_latch.get(room) == pid:
                del self._table_latch[room]
            return events
        # a person can only occupy one room; repair stale state if needed
        for other_room, other_occupants in self.room_occupancy.items():
            if pid in other_occupants:
                del other_occupants[pid]
                self._audit(
                    "occupancy_corrected",
                    other_room,
                    f"{pid} had no exit read in {other_room}",
                    now,
                )
                events.append(
                    self._emit(PERSON_EXITED, other_room, now, (reading.reading_url,), subject=pid)
                )
                if self._exam_latch.get(other_room) == pid:
                    del self._exam_latch[other_room]
                if self._table_latch.get(other_room) == pid:
                    del self._table_latch[other_room]
                break
        occupants[pid] = now
        events.append(self._emit(PERSON_ENTERED, room, now, (reading.reading_url,), subject=pid))
        # an arrival can complete a pending presence fusion
        events.extend(self._attempt_examination(room, now))
        events.extend(self._attempt_table(room, now))
        return events

    # -- hand hygiene -----------------------------------------------------------

    def derive_hand_hygiene(self, room: str) -> list[DomainEvent]:
        return self._attempt_hygiene(room)

    def _on_sink_read(self, room: str, reading: SensorReading) -> list[DomainEvent]:
        assert isinstance(reading.payload, RfidTag)
        person = self.registry.person_by_badge(reading.payload.tag_id)
        now = reading.timestamp
        if person is None:
            self._audit("unknown_badge", room, reading.payload.tag_id, now)
            return []
        self._sink_reads.setdefault(room, []).append(
            _SinkRead(person.person_id, now, reading.reading_url)
        )
        events = [
            self._emit(PERSON_AT_SINK, room, now, (reading.reading_url,), subject=person.person_id)
        ]
        events.extend(self._attempt_hygiene(room))
        return events

    def _on_dispenser(
        self, room: str, reading: SensorReading, kind: DispenserKind
    ) -> list[DomainEvent]:
        if kind in (DispenserKind.TOWEL, DispenserKind.TRASH):
            return []  # recorded as a reading; no event, not required for hygiene
        self._activations.setdefault(room, []).append(
            _PendingActivation(kind, reading.timestamp, reading.reading_url)
        )
        return self._attempt_hygiene(room)

    def _attempt_hygiene(self, room: str) -> list[DomainEvent]:
        """Greedy deterministic pairing over the pending sets for one room."""
        events: list[DomainEvent] = []
        pair_ms = self.windows.pair_ms
        progress = True
        while progress:
            progress = False
            for act in sorted(self._activations.get(room, []), key=lambda a: (a.ts, a.url)):
                sinks = [
                    s for s in self._sink_reads.get(room, []) if abs(act.ts - s.ts) <= pair_ms
                ]
                if not sinks:
                    continue
                # nearest in time; tie goes to the earlier read
                best = min(sinks, key=lambda s: (abs(act.ts - s.ts), s.ts, s.person))
                tap = None
                if act.kind is DispenserKind.SOAP:
                    taps = [t for t in self._taps.get(room, []) if abs(act.ts - t.ts) <= pair_ms]
                    if not taps:
                        continue  # hold until a tap use arrives or the window expires
                    tap = min(taps, key=lambda t: (abs(act.ts - t.ts), t.ts))
                    self._taps[room].remove(tap)
                self._activations[room].remove(act)
                if act.kind is DispenserKind.GLOVES:
                    events.append(
                        self._emit(
                            GLOVES_EQUIPPED,
                            room,
                            max(act.ts, best.ts),
                            (best.url, act.url),
                            subject=best.person,
                        )
                    )
                else:
                    method = act.kind.value
                    provenance = [best.url, act.url]
                    ts = max(act.ts, best.ts)
                    if tap is not None:
                        provenance.append(tap.url)
                        ts = max(ts, tap.ts)
                    events.append(
                        self._emit(
                            HAND_HYGIENE_PERFORMED,
                            room,
                            ts,
                            tuple(provenance),
                            subject=best.person,
                            payload={"method": method},
                        )
                    )
                progress = True
                break
        return events

    # -- examination / table ------------------------------------------------

    def derive_examination_start(self, room: str, now: int) -> list[DomainEvent]:
        return self._attempt_examination(room, now)

    def _occupant_roles(self, room: str) -> tuple[list[tuple[int, str]], list[tuple[int, str]]]:
        clinicians: list[tuple[int, str]] = []
        patients: list[tuple[int, str]] = []
        for pid, entered in self.room_occupancy.get(room, {}).items():
            person = self.registry.persons.get(pid)
            if person is None:
                continue
            if person.role in CLINICIAN_ROLES:
                clinicians.append((entered, pid))
            elif person.role == "patient":
                patients.append((entered, pid))
        return sorted(clinicians), sorted(patients)

    def _attempt_examination(self, room: str, now: int) -> list[DomainEvent]:
        if room in self._exam_latch:
            return []
        pending = [p for p in self._bed_presence.get(room, []) if p.ts >= now - self.windows.fusion_ms]
        if not pending:
            return []
        clinicians, patients = self._occupant_roles(room)
        if not clinicians or not patients:
            return []
        subject = clinicians[0][1]
        patient = patients[0][1]
        self._exam_latch[room] = patient
        provenance = tuple(p.url for p in sorted(pending, key=lambda p: (p.ts, p.url)))
        return [
            self._emit(
                EXAMINATION_STARTED,
                room,
                now,
                provenance,
                subject=subject,
                secondary=patient,
            )
        ]

    def derive_table_and_equipment(self, room: str, now: int) -> list[DomainEvent]:
        return self._attempt_table(room, now)

    def _attempt_table(self, room: str, now: int) -> list[DomainEvent]:
        if room in self._table_latch:
            return []
        pending = [
            p for p in self._table_presence.get(room, []) if p.ts >= now - self.windows.fusion_ms
        ]
        if not pending:
            return []
        _clinicians, patients = self._occupant_roles(room)
        if not patients:
            return []
        patient = patients[0][1]
        self._table_latch[room] = patient
        provenance = tuple(p.url for p in sorted(pending, key=lambda p: (p.ts, p.url)))
        return [self._emit(PATIENT_ON_TABLE, room, now, provenance, subject=patient)]

    # -- equipment ------------------------------------------------------------

    def _on_barcode(self, room: str, reading: SensorReading, code: str) -> list[DomainEvent]:
        now = reading.timestamp
        entry = self.registry.consume_package(code, now)
        verified = entry is not None
        if not verified:
            self._audit("unverified_package", room, code, now)
        return [
            self._emit(
                EQUIPMENT_USED,
                room,
                now,
                (reading.reading_url,),
                payload={"mode": "sterilized", "package_code": code, "verified": verified},
            )
        ]
