"""Correlation rules: readings in, domain events out."""

from __future__ import annotations

import pytest
from hypothesis import given, settings, strategies as st

from wardwatch.correlation import Correlator, CorrelationWindows
from wardwatch.events import (
    EQUIPMENT_USED,
    EXAMINATION_STARTED,
    GLOVES_EQUIPPED,
    HAND_HYGIENE_PERFORMED,
    PATIENT_ON_TABLE,
    PERSON_AT_SINK,
    PERSON_ENTERED,
    PERSON_EXITED,
    SURFACE_DISINFECTED,
)

from conftest import ReadingFactory, make_registry

S = 1000  # ms per second


def collect(correlator: Correlator, readings_list) -> list:
    events = []
    for reading in readings_list:
        events.extend(correlator.ingest_reading(reading))
    events.extend(correlator.close())
    return events


def kinds(events) -> list[str]:
    return [e.kind for e in events]


@pytest.fixture
def correlator(registry):
    return Correlator(registry=registry)


class TestValidation:
    def test_unknown_sensor_rejected(self, correlator, readings):
        reading = readings.door("gp1", "TAG-DOC", 0)
        object.__setattr__(reading, "sensor_id", "ghost-sensor")
        result = correlator.validate_reading(reading, received_at=0)
        assert not result.ok
        assert result.reason == "unknown_sensor"

    def test_payload_mismatch_rejected(self, correlator, readings):
        # a tap-use payload claiming to come from the soap dispenser
        tap_reading = readings.tap("gp1", 0)
        object.__setattr__(tap_reading, "sensor_id", "gp1-soap")
        result = correlator.validate_reading(tap_reading, received_at=0)
        assert not result.ok
        assert result.reason == "payload_mismatch"

    def test_future_timestamp_beyond_skew_rejected(self, correlator, readings):
        reading = readings.door("gp1", "TAG-DOC", 20 * S)
        result = correlator.validate_reading(reading, received_at=0)
        assert not result.ok
        assert result.reason == "timestamp_out_of_skew"

    def test_ordinary_reading_accepted(self, correlator, readings):
        reading = readings.door("gp1", "TAG-DOC", 1 * S)
        assert correlator.validate_reading(reading, received_at=1 * S).ok


class TestRoomTransit:
    def test_door_read_toggles_enter_then_exit(self, correlator, readings):
        events = collect(
            correlator,
            [readings.door("gp1", "TAG-DOC", 0), readings.door("gp1", "TAG-DOC", 300 * S)],
        )
        assert kinds(events) == [PERSON_ENTERED, PERSON_EXITED]
        assert events[0].subject == "doctor"
        assert events[0].room == "gp1"
        assert events[1].timestamp == 300 * S

    def test_unknown_badge_warns_without_event(self, correlator, readings):
        audits = []
        correlator.on_audit = audits.append
        events = collect(correlator, [readings.door("gp1", "TAG-NOBODY", 0)])
        assert events == []
        assert any(a["note"] == "unknown_badge" for a in audits)

    def test_missing_exit_is_repaired_on_next_entry(self, correlator, readings):
        audits = []
        correlator.on_audit = audits.append
        events = collect(
            correlator,
            [readings.door("gp1", "TAG-DOC", 0), readings.door("or1", "TAG-DOC", 60 * S)],
        )
        assert kinds(events) == [PERSON_ENTERED, PERSON_EXITED, PERSON_ENTERED]
        assert events[1].room == "gp1"
        assert events[2].room == "or1"
        assert any(a["note"] == "occupancy_corrected" for a in audits)

    def test_every_reading_in_provenance_exists(self, correlator, readings):
        submitted = [readings.door("gp1", "TAG-DOC", 0), readings.door("gp1", "TAG-PAT", 2 * S)]
        events = collect(correlator, submitted)
        urls = {r.reading_url for r in submitted}
        for event in events:
            assert event.provenance
            assert set(event.provenance) <= urls
            for ts in [event.timestamp]:
                assert ts <= event.timestamp


class TestHandHygiene:
    def test_sink_soap_tap_sequence_pairs(self, correlator, readings):
        t = 100 * S
        events = collect(
            correlator,
            [
                readings.sink("gp1", "TAG-DOC", t),
                readings.dispenser("gp1", "soap", t + 3 * S),
                readings.tap("gp1", t + 4 * S),
            ],
        )
        hygiene = [e for e in events if e.kind == HAND_HYGIENE_PERFORMED]
        assert len(hygiene) == 1
        event = hygiene[0]
        assert event.subject == "doctor"
        assert event.payload["method"] == "soap"
        assert event.timestamp == t + 4 * S  # completion time of the triple
        assert len(event.provenance) == 3

    def test_sink_read_alone_emits_person_at_sink_only(self, correlator, readings):
        events = collect(correlator, [readings.sink("gp1", "TAG-DOC", 0)])
        assert kinds(events) == [PERSON_AT_SINK]

    def test_soap_without_tap_never_completes(self, correlator, readings):
        unattributed = []
        correlator.on_unattributed = unattributed.append
        events = collect(
            correlator,
            [readings.sink("gp1", "TAG-DOC", 0), readings.dispenser("gp1", "soap", 3 * S)],
        )
        assert HAND_HYGIENE_PERFORMED not in kinds(events)
        assert len(unattributed) == 1
        assert unattributed[0]["reason"] == "no_tap_within_window"

    def test_gel_needs_no_tap(self, correlator, readings):
        events = collect(
            correlator,
            [readings.sink("gp1", "TAG-DOC", 0), readings.dispenser("gp1", "gel", 2 * S)],
        )
        hygiene = [e for e in events if e.kind == HAND_HYGIENE_PERFORMED]
        assert len(hygiene) == 1
        assert hygiene[0].payload["method"] == "gel"

    def test_gel_outside_window_is_unattributed(self, correlator, readings):
        unattributed = []
        correlator.on_unattributed = unattributed.append
        events = collect(
            correlator,
            [readings.dispenser("gp1", "gel", 0), readings.sink("gp1", "TAG-DOC", 40 * S)],
        )
        assert HAND_HYGIENE_PERFORMED not in kinds(events)
        assert [u["reason"] for u in unattributed] == ["no_person_in_window"]
        assert unattributed[0]["kind"] == "gel"

    def test_attribution_picks_nearest_read(self, correlator, readings):
        events = collect(
            correlator,
            [
                readings.sink("gp1", "TAG-DOC", 0),
                readings.sink("gp1", "TAG-NUR", 8 * S),
                readings.dispenser("gp1", "gel", 10 * S),
            ],
        )
        hygiene = [e for e in events if e.kind == HAND_HYGIENE_PERFORMED]
        assert [e.subject for e in hygiene] == ["nurse"]

    def test_attribution_tie_goes_to_earlier_read(self, correlator, readings):
        events = collect(
            correlator,
            [
                readings.sink("gp1", "TAG-DOC", 4 * S),
                readings.sink("gp1", "TAG-NUR", 8 * S),
                readings.dispenser("gp1", "gel", 6 * S),
            ],
        )
        hygiene = [e for e in events if e.kind == HAND_HYGIENE_PERFORMED]
        assert [e.subject for e in hygiene] == ["doctor"]

    def test_one_sink_read_serves_consecutive_activations(self, correlator, readings):
        events = collect(
            correlator,
            [
                readings.sink("or1", "TAG-NUR", 0),
                readings.dispenser("or1", "soap", 2 * S),
                readings.tap("or1", 3 * S),
                readings.dispenser("or1", "gloves", 5 * S),
            ],
        )
        assert kinds(events) == [PERSON_AT_SINK, HAND_HYGIENE_PERFORMED, GLOVES_EQUIPPED]
        assert events[2].subject == "nurse"

    def test_towel_and_trash_emit_nothing(self, correlator, readings):
        events = collect(
            correlator,
            [
                readings.sink("gp1", "TAG-DOC", 0),
                readings.dispenser("gp1", "towel", 1 * S),
                readings.dispenser("gp1", "trash", 2 * S),
            ],
        )
        assert kinds(events) == [PERSON_AT_SINK]


class TestExaminationFusion:
    def doctor_and_patient_present(self, readings):
        return [readings.door("gp1", "TAG-DOC", 0), readings.door("gp1", "TAG-PAT", 2 * S)]

    def test_thermal_then_bed_fuses_once(self, correlator, readings):
        events = collect(
            correlator,
            self.doctor_and_patient_present(readings)
            + [readings.thermal("gp1", 10 * S), readings.bed("gp1", 12 * S)],
        )
        exams = [e for e in events if e.kind == EXAMINATION_STARTED]
        assert len(exams) == 1
        assert exams[0].subject == "doctor"
        assert exams[0].secondary_subject == "patient"

    def test_presence_in_empty_room_is_ignored(self, correlator, readings):
        events = collect(correlator, [readings.thermal("gp1", 10 * S)])
        assert events == []

    def test_presence_without_patient_is_ignored(self, correlator, readings):
        events = collect(
            correlator,
            [readings.door("gp1", "TAG-DOC", 0), readings.thermal("gp1", 5 * S)],
        )
        assert EXAMINATION_STARTED not in kinds(events)

    def test_arrival_completes_pending_presence(self, correlator, readings):
        # presence fires first, then both parties arrive within the window
        events = collect(
            correlator,
            [
                readings.door("gp1", "TAG-DOC", 0),
                readings.thermal("gp1", 4 * S),
                readings.door("gp1", "TAG-PAT", 6 * S),
            ],
        )
        exams = [e for e in events if e.kind == EXAMINATION_STARTED]
        assert len(exams) == 1
        assert exams[0].timestamp == 6 * S

    def test_new_episode_after_patient_leaves(self, correlator, readings):
        events = collect(
            correlator,
            self.doctor_and_patient_present(readings)
            + [
                readings.bed("gp1", 10 * S),
                readings.bed("gp1", 20 * S),  # same episode: latched
                readings.door("gp1", "TAG-PAT", 60 * S),  # patient leaves
                readings.door("gp1", "TAG-PA2", 70 * S),
                readings.bed("gp1", 75 * S),
            ],
        )
        exams = [e for e in events if e.kind == EXAMINATION_STARTED]
        assert len(exams) == 2
        assert exams[0].secondary_subject == "patient"
        assert exams[1].secondary_subject == "patient2"


class TestTableAndEquipment:
    def test_table_presence_with_patient(self, correlator, readings):
        events = collect(
            correlator,
            [readings.door("or1", "TAG-PAT", 0), readings.table("or1", 5 * S)],
        )
        on_table = [e for e in events if e.kind == PATIENT_ON_TABLE]
        assert len(on_table) == 1
        assert on_table[0].subject == "patient"

    def test_table_presence_without_patient_ignored(self, correlator, readings):
        events = collect(
            correlator,
            [readings.door("or1", "TAG-NUR", 0), readings.table("or1", 5 * S)],
        )
        assert PATIENT_ON_TABLE not in kinds(events)

    def test_logged_barcode_is_verified_and_consumed(self, correlator, readings, registry):
        events = collect(correlator, [readings.barcode("or1", "PKG-7", 10 * S)])
        assert kinds(events) == [EQUIPMENT_USED]
        assert events[0].payload == {
            "mode": "sterilized",
            "package_code": "PKG-7",
            "verified": True,
        }
        assert registry.sterilization_log["PKG-7"].consumed_at == 10 * S

    def test_unknown_barcode_is_unverified(self, correlator, readings):
        events = collect(correlator, [readings.barcode("or1", "PKG-404", 10 * S)])
        assert events[0].payload["verified"] is False

    def test_reused_barcode_is_unverified(self, registry, readings):
        correlator = Correlator(registry=registry)
        first = collect(correlator, [readings.barcode("or1", "PKG-7", 10 * S)])
        assert first[0].payload["verified"] is True
        again = Correlator(registry=registry)
        events = collect(again, [readings.barcode("or1", "PKG-7", 500 * S)])
        assert events[0].payload["verified"] is False

    def test_spray_use_is_surface_disinfection(self, correlator, readings):
        events = collect(correlator, [readings.spray("or1", 10 * S)])
        assert kinds(events) == [SURFACE_DISINFECTED]
        assert events[0].room == "or1"


class TestDuplicateSuppression:
    def test_identical_reading_within_window_suppressed(self, correlator, readings):
        events = collect(
            correlator,
            [
                readings.sink("gp1", "TAG-DOC", 0),
                readings.dispenser("gp1", "gel", 1 * S),
                readings.dispenser("gp1", "gel", 2 * S),  # bounce, suppressed
            ],
        )
        hygiene = [e for e in events if e.kind == HAND_HYGIENE_PERFORMED]
        assert len(hygiene) == 1

    def test_same_reading_after_gap_is_distinct(self, correlator, readings):
        events = collect(
            correlator,
            [
                readings.sink("gp1", "TAG-DOC", 0),
                readings.dispenser("gp1", "gel", 1 * S),
                readings.sink("gp1", "TAG-DOC", 9 * S),
                readings.dispenser("gp1", "gel", 10 * S),
            ],
        )
        hygiene = [e for e in events if e.kind == HAND_HYGIENE_PERFORMED]
        assert len(hygiene) == 2


class TestBufferOrdering:
    def test_out_of_order_within_skew_is_resorted(self, registry):
        factory = ReadingFactory(registry)
        in_order = [
            factory.door("gp1", "TAG-DOC", 10 * S),
            factory.door("gp1", "TAG-PAT", 12 * S),
        ]
        # delivered swapped but 2 s apart (< 5 s skew bound)
        correlator = Correlator(registry=registry)
        events = collect(correlator, [in_order[1], in_order[0]])
        assert [(e.kind, e.subject) for e in events] == [
            (PERSON_ENTERED, "doctor"),
            (PERSON_ENTERED, "patient"),
        ]

    def test_late_beyond_flushed_boundary_is_dropped(self, registry):
        factory = ReadingFactory(registry)
        audits = []
        correlator = Correlator(registry=registry, on_audit=audits.append)
        events = collect(
            correlator,
            [
                factory.door("gp1", "TAG-DOC", 0),
                factory.door("gp1", "TAG-PAT", 60 * S),
                factory.door("gp1", "TAG-NUR", 10 * S),  # 50 s late
            ],
        )
        subjects = [e.subject for e in events if e.kind == PERSON_ENTERED]
        assert subjects == ["doctor", "patient"]
        assert any(a["note"] == "late_reading_dropped" for a in audits)

    def test_windows_must_be_positive(self):
        with pytest.raises(ValueError):
            CorrelationWindows(skew_bound_s=0)


# -- properties ---------------------------------------------------------------

_BADGES = ["TAG-DOC", "TAG-PAT", "TAG-PA2", "TAG-NUR"]


@st.composite
def _reading_plans(draw):
    """A mixed list of (timestamp, builder-name, args) with distinct timestamps."""
    count = draw(st.integers(min_value=1, max_value=14))
    timestamps = draw(
        st.lists(
            st.integers(min_value=0, max_value=120 * S),
            min_size=count,
            max_size=count,
            unique=True,
        )
    )
    plans = []
    for ts in sorted(timestamps):
        which = draw(
            st.sampled_from(["door", "sink", "soap", "gel", "gloves", "tap", "thermal", "bed"])
        )
        badge = draw(st.sampled_from(_BADGES))
        plans.append((ts, which, badge))
    return plans


def _build(factory: ReadingFactory, plan) -> object:
    ts, which, badge = plan
    room = "gp1"
    if which == "door":
        return factory.door(room, badge, ts)
    if which == "sink":
        return factory.sink(room, badge, ts)
    if which in ("soap", "gel", "gloves"):
        return factory.dispenser(room, which, ts)
    if which == "tap":
        return factory.tap(room, ts)
    if which == "thermal":
        return factory.thermal(room, ts)
    return factory.bed(room, ts)


@settings(deadline=None, max_examples=60)
@given(plans=_reading_plans(), data=st.data())
def test_permutation_within_skew_bound_changes_nothing(plans, data):
    registry = make_registry()
    factory = ReadingFactory(registry)
    readings_list = [_build(factory, p) for p in plans]

    baseline = collect(Correlator(registry=make_registry()), readings_list)

    jitters = data.draw(
        st.lists(
            st.integers(min_value=-2500, max_value=2500),
            min_size=len(readings_list),
            max_size=len(readings_list),
        )
    )
    shuffled = [
        r
        for r, _ in sorted(
            zip(readings_list, jitters), key=lambda pair: (pair[0].timestamp + pair[1], pair[0].reading_url)
        )
    ]
    outcome = collect(Correlator(registry=make_registry()), shuffled)
    assert [e.to_dict() for e in outcome] == [e.to_dict() for e in baseline]


@settings(deadline=None, max_examples=60)
@given(
    moves=st.lists(
        st.tuples(st.sampled_from(_BADGES), st.sampled_from(["gp1", "or1"])),
        min_size=1,
        max_size=20,
    )
)
def test_occupancy_keeps_each_person_in_at_most_one_room(moves):
    registry = make_registry()
    factory = ReadingFactory(registry)
    correlator = Correlator(registry=registry)
    readings_list = [
        factory.door(room, badge, ts * 10 * S) for ts, (badge, room) in enumerate(moves)
    ]
    events = collect(correlator, readings_list)

    # invariant on final state
    seen: dict[str, list[str]] = {}
    for room, occupants in correlator.room_occupancy.items():
        for person in occupants:
            seen.setdefault(person, []).append(room)
    for person, rooms in seen.items():
        assert len(rooms) <= 1, f"{person} in {rooms}"

    # balance invariant per (person, room): entries lead exits by at most one
    balance: dict[tuple[str, str], int] = {}
    for event in events:
        if event.kind == PERSON_ENTERED:
            balance[(event.subject, event.room)] = balance.get((event.subject, event.room), 0) + 1
        elif event.kind == PERSON_EXITED:
            balance[(event.subject, event.room)] = balance.get((event.subject, event.room), 0) - 1
    assert all(value in (0, 1) for value in balance.values())
