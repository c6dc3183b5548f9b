"""File-backed append-only datastore with in-memory indexes.

One newline-delimited JSON file per log type, each line a versioned
envelope: {"v": 1, "seq": n, "received_at": ms, "body": {...}}. A sidecar
.idx file maps sequence numbers to byte offsets so single records can be
fetched without scanning. Stored records are never mutated; corrections
(a violation clearing, an instance advancing) are appended as fresh
snapshots and queries read the latest snapshot per id.

The registry is rebuilt from its log on open, so the store is the single
write path for rooms, persons, users, devices and sterilization entries;
registration invariants are enforced by the live Registry before the
record is appended.

Concurrency: single serialized writer per process; queries read the
in-memory lists, which always hold a consistent prefix of each log.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable

from .events import PERSON_ENTERED, PERSON_EXITED, DomainEvent, SensorReading, stable_json
from .registry import (
    DeviceRecord,
    PersonRecord,
    Registry,
    RoomRecord,
    SterilizationLogEntry,
    UserRecord,
    registry_from_records,
)

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

LOG_NAMES = (
    "registry",
    "readings",
    "events",
    "instances",
    "violations",
    "alerts",
    "unattributed",
    "audit",
    "his",
)

UNATTRIBUTED_ROW = "(unattributed)"


class DanglingReferenceError(ValueError):
    """Appended record points at an id the store has never seen."""


def _dump(obj: Any) -> str:
    return stable_json(obj)


def _wall_clock_ms() -> int:
    return time.time_ns() // 1_000_000


class LogFile:
    """One append-only NDJSON log plus its offset sidecar."""

    def __init__(self, path: Path):
        self.path = path
        self.idx_path = path.with_suffix(path.suffix + ".idx")
        self.records: list[dict[str, Any]] = []
        self._offsets: list[int] = []
        self._load()

    def _load(self) -> None:
        if not self.path.exists():
            return
        offset = 0
        with self.path.open("rb") as fh:
            for line in fh:
                text = line.decode("utf-8").strip()
                if text:
                    self.records.append(json.loads(text))
                    self._offsets.append(offset)
                offset += len(line)
        self._rewrite_idx_if_stale()

    def _rewrite_idx_if_stale(self) -> None:
        want = "".join(f"{rec['seq']} {off}\n" for rec, off in zip(self.records, self._offsets))
        have = self.idx_path.read_text() if self.idx_path.exists() else ""
        if want != have:
            self.idx_path.write_text(want)

    @property
    def next_seq(self) -> int:
        return self.records[-1]["seq"] + 1 if self.records else 1

    def append(self, body: dict[str, Any], received_at: int) -> int:
        envelope = {
            "v": SCHEMA_VERSION,
            "seq": self.next_seq,
            "received_at": received_at,
            "body": body,
        }
        line = _dump(envelope) + "\n"
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with self.path.open("a", encoding="utf-8") as fh:
            offset = fh.tell()
            fh.write(line)
        with self.idx_path.open("a", encoding="utf-8") as fh:
            fh.write(f"{envelope['seq']} {offset}\n")
        self.records.append(envelope)
        self._offsets.append(offset)
        return envelope["seq"]

    def record_at(self, seq: int) -> dict[str, Any] | None:
        """Fetch one record by seeking through the sidecar index."""
        if not self.idx_path.exists():
            return None
        with self.idx_path.open(encoding="utf-8") as fh:
            for line in fh:
                parts = line.split()
                if len(parts) == 2 and int(parts[0]) == seq:
                    with self.path.open("rb") as data:
                        data.seek(int(parts[1]))
                        return json.loads(data.readline().decode("utf-8"))
        return None


@dataclass
class ContactEdge:
    """Co-presence of two persons in one room over the queried range."""

    person_a: str
    person_b: str
    room: str
    overlap_ms: int
    episode_count: int

    @property
    def overlap_seconds(self) -> float:
        return self.overlap_ms / 1000.0

    def to_dict(self) -> dict[str, Any]:
        return {
            "person_a": self.person_a,
            "person_b": self.person_b,
            "room": self.room,
            "overlap_ms": self.overlap_ms,
            "overlap_seconds": self.overlap_seconds,
            "episode_count": self.episode_count,
        }


class Datastore:
    """Owns the on-disk logs, the registry, and the analytics queries."""

    def __init__(self, data_dir: str | Path, clock: Callable[[], int] | None = None):
        self.data_dir = Path(data_dir)
        self.data_dir.mkdir(parents=True, exist_ok=True)
        self.clock = clock or _wall_clock_ms
        self.logs: dict[str, LogFile] = {
            name: LogFile(self.data_dir / f"{name}.ndjson") for name in LOG_NAMES
        }
        self.registry = registry_from_records(
            rec["body"] for rec in self.logs["registry"].records
        )
        self._seen_reading_urls: set[str] = {
            rec["body"]["url"] for rec in self.logs["readings"].records
        }
        self._known_instances: set[str] = {
            rec["body"]["instance_id"] for rec in self.logs["instances"].records
        }
        self._known_violations: set[str] = {
            rec["body"]["violation_id"] for rec in self.logs["violations"].records
        }
        self.last_contact_notes: list[dict[str, Any]] = []

    def _now(self, received_at: int | None) -> int:
        return self.clock() if received_at is None else received_at

    # -- registration (validated by the live registry, then logged) ---------

    def register_room(self, room: RoomRecord, received_at: int | None = None) -> str:
        self.registry.register_room(room)
        self.logs["registry"].append({"record": "room", "body": room.to_dict()}, self._now(received_at))
        return room.room_id

    def register_person(self, person: PersonRecord, received_at: int | None = None) -> str:
        self.registry.register_person(person)
        self.logs["registry"].append({"record": "person", "body": person.to_dict()}, self._now(received_at))
        return person.person_id

    def register_user(self, user: UserRecord, received_at: int | None = None) -> str:
        self.registry.register_user(user)
        self.logs["registry"].append({"record": "user", "body": user.to_dict()}, self._now(received_at))
        return user.user_id

    def register_device(self, device: DeviceRecord, received_at: int | None = None) -> str:
        self.registry.register_device(device)
        self.logs["registry"].append({"record": "device", "body": device.to_dict()}, self._now(received_at))
        return device.sensor_id

    def add_sterilized_package(
        self, entry: SterilizationLogEntry, received_at: int | None = None
    ) -> str:
        self.registry.add_sterilized_package(entry)
        self.logs["registry"].append(
            {"record": "sterilized_package", "body": entry.to_dict()}, self._now(received_at)
        )
        return entry.package_code

    def record_package_consumed(self, package_code: str, at: int, received_at: int | None = None) -> None:
        self.logs["registry"].append(
            {"record": "package_consumed", "body": {"package_code": package_code, "consumed_at": at}},
            self._now(received_at),
        )

    # -- appends -----------------------------------------------------------

    def append_reading(self, reading: SensorReading, received_at: int | None = None) -> int | None:
        """Store a validated reading. Replays of a stored url are no-ops."""
        if reading.reading_url in self._seen_reading_urls:
            return None
        seq = self.logs["readings"].append(reading.to_wire(), self._now(received_at))
        self._seen_reading_urls.add(reading.reading_url)
        return seq

    def has_reading(self, url: str) -> bool:
        return url in self._seen_reading_urls

    def append_event(self, event: DomainEvent, received_at: int | None = None) -> int:
        for url in event.provenance:
            if url not in self._seen_reading_urls:
                raise DanglingReferenceError(f"event {event.event_id} references unstored reading {url}")
        return self.logs["events"].append(event.to_dict(), self._now(received_at))

    def append_instance_snapshot(self, snapshot: dict[str, Any], received_at: int | None = None) -> int:
        seq = self.logs["instances"].append(dict(snapshot), self._now(received_at))
        self._known_instances.add(snapshot["instance_id"])
        return seq

    def append_violation_snapshot(self, snapshot: dict[str, Any], received_at: int | None = None) -> int:
        if snapshot["instance_id"] not in self._known_instances:
            raise DanglingReferenceError(
                f"violation {snapshot['violation_id']} references unknown instance {snapshot['instance_id']}"
            )
        seq = self.logs["violations"].append(dict(snapshot), self._now(received_at))
        self._known_violations.add(snapshot["violation_id"])
        return seq

    def append_alert(self, alert: dict[str, Any], received_at: int | None = None) -> int:
        if alert["instance_id"] not in self._known_instances:
            raise DanglingReferenceError(
                f"alert {alert['alert_id']} references unknown instance {alert['instance_id']}"
            )
        if alert["violation_id"] not in self._known_violations:
            raise DanglingReferenceError(
                f"alert {alert['alert_id']} references unknown violation {alert['violation_id']}"
            )
        return self.logs["alerts"].append(dict(alert), self._now(received_at))

    def append_unattributed(self, record: dict[str, Any], received_at: int | None = None) -> int:
        return self.logs["unattributed"].append(dict(record), self._now(received_at))

    def append_audit(self, record: dict[str, Any], received_at: int | None = None) -> int:
        return self.logs["audit"].append(dict(record), self._now(received_at))

    def import_his_record(self, record: dict[str, Any], received_at: int | None = None) -> int:
        """Stub hospital-information-system import: susceptibility flags."""
        patient = record.get("patient_id")
        if patient not in self.registry.persons:
            raise DanglingReferenceError(f"HIS record references unknown patient {patient!r}")
        return self.logs["his"].append(dict(record), self._now(received_at))

    # -- reads ---------------------------------------------------------------

    def bodies(self, log_name: str) -> list[dict[str, Any]]:
        return [rec["body"] for rec in self.logs[log_name].records]

    def alerts(
        self,
        from_ms: int | None = None,
        to_ms: int | None = None,
        person: str | None = None,
        workflow: str | None = None,
        include_realerts: bool = True,
    ) -> list[dict[str, Any]]:
        out = []
        for alert in self.bodies("alerts"):
            if from_ms is not None and alert["timestamp"] < from_ms:
                continue
            if to_ms is not None and alert["timestamp"] >= to_ms:
                continue
            if person is not None and alert["person"] != person:
                continue
            if workflow is not None and alert["workflow_id"] != workflow:
                continue
            if not include_realerts and alert.get("is_realert"):
                continue
            out.append(alert)
        return out

    def latest_instances(self) -> list[dict[str, Any]]:
        latest: dict[str, dict[str, Any]] = {}
        for snapshot in self.bodies("instances"):
            latest[snapshot["instance_id"]] = snapshot
        return list(latest.values())

    def latest_violations(self) -> dict[str, dict[str, Any]]:
        latest: dict[str, dict[str, Any]] = {}
        for snapshot in self.bodies("violations"):
            latest[snapshot["violation_id"]] = snapshot
        return latest

    def events(
        self,
        from_ms: int | None = None,
        to_ms: int | None = None,
        kind: str | None = None,
        room: str | None = None,
    ) -> list[dict[str, Any]]:
        out = []
        for event in self.bodies("events"):
            if from_ms is not None and event["timestamp"] < from_ms:
                continue
            if to_ms is not None and event["timestamp"] >= to_ms:
                continue
            if kind is not None and event["kind"] != kind:
                continue
            if room is not None and event["room"] != room:
                continue
            out.append(event)
        return out

    # -- analytics -------------------------------------------------------------

    def aggregate_alert_stats(
        self,
        group_by: str,
        from_ms: int | None = None,
        to_ms: int | None = None,
    ) -> list[dict[str, Any]]:
        """Alert counts per group; equals a direct scan of the alert log.

        group_by: "user" (responsible person), "workflow", or "sensor".
        Initial alerts and re-alerts are counted separately. Mean time to
        correction averages cleared_at - opened_at over the cleared
        violations behind the group's initial alerts. For per-sensor stats,
        unattributed dispenser activations in range appear as one extra
        "(unattributed)" row counting activations, not alerts.
        """
        key_field = {"user": "person", "workflow": "workflow_id", "sensor": "device"}.get(group_by)
        if key_field is None:
            raise ValueError(f"unknown group_by: {group_by!r}")
        if from_ms is not None and to_ms is not None and from_ms >= to_ms:
            return []

        violations = self.latest_violations()
        counts: dict[str, dict[str, Any]] = {}
        for alert in self.alerts(from_ms=from_ms, to_ms=to_ms):
            key = alert[key_field]
            row = counts.setdefault(
                key, {"group": key, "alerts": 0, "realerts": 0, "corrections": []}
            )
            if alert.get("is_realert"):
                row["realerts"] += 1
            else:
                row["alerts"] += 1
                violation = violations.get(alert["violation_id"])
                if violation is not None and violation.get("cleared_at") is not None:
                    row["corrections"].append(violation["cleared_at"] - violation["opened_at"])

        rows = []
        for key in sorted(counts):
            row = counts[key]
            corrections = row.pop("corrections")
            row["mean_correction_ms"] = (
                sum(corrections) / len(corrections) if corrections else None
            )
            rows.append(row)

        if group_by == "sensor":
            unattributed = [
                rec
                for rec in self.bodies("unattributed")
                if (from_ms is None or rec["timestamp"] >= from_ms)
                and (to_ms is None or rec["timestamp"] < to_ms)
            ]
            if unattributed:
                rows.append(
                    {
                        "group": UNATTRIBUTED_ROW,
                        "alerts": len(unattributed),
                        "realerts": 0,
                        "mean_correction_ms": None,
                    }
                )
        return rows

    def _contact_note(self, note: str, key: tuple[str, str], timestamp: int) -> None:
        detail = {"note": note, "room": key[0], "person": key[1], "timestamp": timestamp}
        logger.warning("contact network: %s %s", note, detail)
        self.last_contact_notes.append(detail)

    def build_contact_network(
        self, from_ms: int | None = None, to_ms: int | None = None
    ) -> list[ContactEdge]:
        """Pairwise co-presence from the persisted occupancy events.

        Presence intervals are rebuilt per (room, person) from entry/exit
        events; intervals still open at range end are clipped there.
        Inconsistent toggles are skipped with an audit note kept on
        last_contact_notes (queries must not write to the logs). At equal
        timestamps exits sort before entries, so the result is independent
        of ingestion order.
        """
        self.last_contact_notes: list[dict[str, Any]] = []
        transits = [
            e for e in self.bodies("events") if e["kind"] in (PERSON_ENTERED, PERSON_EXITED)
        ]
        if not transits:
            return []
        horizon = to_ms if to_ms is not None else max(e["timestamp"] for e in transits)
        transits.sort(key=lambda e: (e["timestamp"], e["kind"] != PERSON_EXITED, e["subject"] or ""))

        intervals: dict[tuple[str, str], list[tuple[int, int]]] = {}
        open_since: dict[tuple[str, str], int] = {}
        for event in transits:
            key = (event["room"], event["subject"])
            if event["kind"] == PERSON_ENTERED:
                if key in open_since:
                    self._contact_note("double_entry_skipped", key, event["timestamp"])
                    continue
                open_since[key] = event["timestamp"]
            else:
                started = open_since.pop(key, None)
                if started is None:
                    self._contact_note("exit_without_entry_skipped", key, event["timestamp"])
                    continue
                intervals.setdefault(key, []).append((started, event["timestamp"]))
        for key, started in open_since.items():
            if started <= horizon:
                intervals.setdefault(key, []).append((started, horizon))

        # clip to the queried range
        lo = from_ms if from_ms is not None else 0
        hi = horizon
        clipped: dict[tuple[str, str], list[tuple[int, int]]] = {}
        for key, spans in intervals.items():
            kept = [(max(a, lo), min(b, hi)) for a, b in spans]
            kept = [(a, b) for a, b in kept if b > a]
            if kept:
                clipped[key] = kept

        by_room: dict[str, dict[str, list[tuple[int, int]]]] = {}
        for (room, person), spans in clipped.items():
            by_room.setdefault(room, {})[person] = spans

        edges: list[ContactEdge] = []
        for room in sorted(by_room):
            people = sorted(by_room[room])
            for i, person_a in enumerate(people):
                for person_b in people[i + 1 :]:
                    pieces = []
                    for a_start, a_end in by_room[room][person_a]:
                        for b_start, b_end in by_room[room][person_b]:
                            start, end = max(a_start, b_start), min(a_end, b_end)
                            if end > start:
                                pieces.append((start, end))
                    if not pieces:
                        continue
                    pieces.sort()
                    merged = [pieces[0]]
                    for start, end in pieces[1:]:
                        if start <= merged[-1][1]:
                            merged[-1] = (merged[-1][0], max(merged[-1][1], end))
                        else:
                            merged.append((start, end))
                    edges.append(
                        ContactEdge(
                            person_a=person_a,
                            person_b=person_b,
                            room=room,
                            overlap_ms=sum(end - start for start, end in merged),
                            episode_count=len(merged),
                        )
                    )
        return edges
