"""Engine semantics: spawning, guards, violations, correctives, ticks."""

from __future__ import annotations

import itertools

import pytest

from wardwatch.assets import shipped_workflow_text
from wardwatch.engine import (
    ABORTED,
    ACTIVE,
    AUX_WORKFLOW_ID,
    COMPLETED,
    VIOLATED,
    AlertRequested,
    Engine,
    EngineConfig,
    EngineConfigError,
    GuardConfigError,
    InstanceAborted,
    InstanceCompleted,
    InstanceSpawned,
    ViolationCleared,
    ViolationOpened,
    history_is_valid_path,
)
from wardwatch.events import (
    EQUIPMENT_USED,
    EXAMINATION_STARTED,
    GLOVES_EQUIPPED,
    HAND_HYGIENE_PERFORMED,
    PATIENT_ON_TABLE,
    PERSON_ENTERED,
    PERSON_EXITED,
    SURFACE_DISINFECTED,
    DomainEvent,
)
from wardwatch.workflow_dsl import parse_document
from wardwatch.workflow_model import (
    EventPattern,
    GuardSpec,
    NodeKind,
    Transition,
    ViolationPolicy,
    WorkflowDefinition,
    WorkflowNode,
    compile_definition,
)

from conftest import make_registry

S = 1000

_ids = itertools.count(1)


def ev(kind, room, ts, subject=None, secondary=None, **payload) -> DomainEvent:
    return DomainEvent(
        event_id=f"tev-{next(_ids):05d}",
        kind=kind,
        room=room,
        timestamp=ts,
        subject=subject,
        secondary_subject=secondary,
        payload=payload,
        provenance=(f"reading://test/src/{next(_ids):05d}",),
    )


def shipped_compiled():
    return [
        compile_definition(parse_document(shipped_workflow_text("gp_office"))),
        compile_definition(parse_document(shipped_workflow_text("minor_surgery"))),
    ]


def fresh_engine(config: EngineConfig | None = None) -> Engine:
    return Engine(make_registry(), shipped_compiled(), config=config)


def run(engine: Engine, events) -> list:
    effects = []
    for event in events:
        effects.extend(engine.on_event(event))
    return effects


def alerts_of(effects) -> list:
    return [e.alert for e in effects if isinstance(e, AlertRequested)]


def only_instance(engine: Engine):
    instances = list(engine.instances.values())
    assert len(instances) == 1
    return instances[0]


def gp_happy_events():
    return [
        ev(PERSON_ENTERED, "gp1", 0, subject="doctor"),
        ev(PERSON_ENTERED, "gp1", 2 * S, subject="patient"),
        ev(HAND_HYGIENE_PERFORMED, "gp1", 13 * S, subject="doctor", method="soap"),
        ev(EXAMINATION_STARTED, "gp1", 20 * S, subject="doctor", secondary="patient"),
        ev(HAND_HYGIENE_PERFORMED, "gp1", 42 * S, subject="doctor", method="gel"),
        ev(PERSON_EXITED, "gp1", 50 * S, subject="patient"),
    ]


class TestSpawning:
    def test_patient_entry_spawns_gp_instance(self):
        engine = fresh_engine()
        effects = run(engine, [ev(PERSON_ENTERED, "gp1", 0, subject="patient")])
        spawned = [e for e in effects if isinstance(e, InstanceSpawned)]
        assert len(spawned) == 1
        assert spawned[0].workflow_id == "gp_office"
        # the trigger event is offered to the fresh instance right away
        assert only_instance(engine).current_node == "examination"

    def test_nonpatient_entry_spawns_nothing(self):
        engine = fresh_engine()
        run(engine, [ev(PERSON_ENTERED, "gp1", 0, subject="doctor")])
        assert engine.instances == {}

    def test_room_kind_selects_definition(self):
        engine = fresh_engine()
        run(engine, [ev(PERSON_ENTERED, "or1", 0, subject="patient")])
        assert only_instance(engine).workflow_id == "minor_surgery"

    def test_live_instance_blocks_second_spawn(self):
        engine = fresh_engine()
        run(
            engine,
            [
                ev(PERSON_ENTERED, "gp1", 0, subject="patient"),
                ev(PERSON_ENTERED, "gp1", 60 * S, subject="patient"),
            ],
        )
        assert len(engine.instances) == 1

    def test_completed_instance_allows_fresh_spawn(self):
        engine = fresh_engine()
        run(engine, gp_happy_events())
        run(engine, [ev(PERSON_ENTERED, "gp1", 300 * S, subject="patient")])
        assert len(engine.instances) == 2

    def test_unknown_room_is_ignored(self):
        engine = fresh_engine()
        assert run(engine, [ev(PERSON_ENTERED, "icu9", 0, subject="patient")]) == []


class TestGuardArithmetic:
    """Window checks over the shipped GP examination guard (600 s)."""

    def _run_exam_after_hygiene(self, gap_ms: int):
        engine = fresh_engine()
        t_exam = 800 * S
        effects = run(
            engine,
            [
                ev(PERSON_ENTERED, "gp1", 0, subject="doctor"),
                ev(PERSON_ENTERED, "gp1", 2 * S, subject="patient"),
                ev(HAND_HYGIENE_PERFORMED, "gp1", t_exam - gap_ms, subject="doctor", method="soap"),
                ev(EXAMINATION_STARTED, "gp1", t_exam, subject="doctor", secondary="patient"),
            ],
        )
        return engine, effects

    def test_hygiene_90s_before_exam_satisfies(self):
        engine, effects = self._run_exam_after_hygiene(90 * S)
        assert alerts_of(effects) == []
        assert only_instance(engine).current_node == "departure"

    def test_hygiene_700s_before_exam_violates(self):
        engine, effects = self._run_exam_after_hygiene(700 * S)
        assert len(alerts_of(effects)) == 1
        assert only_instance(engine).state == VIOLATED

    def test_hygiene_at_exact_window_edge_satisfies(self):
        engine, effects = self._run_exam_after_hygiene(600 * S)
        assert alerts_of(effects) == []
        assert only_instance(engine).state == ACTIVE

    def test_hygiene_before_patient_contact_does_not_count(self):
        # gel done before the examination cannot cover the post-contact guard
        engine = fresh_engine()
        effects = run(
            engine,
            [
                ev(PERSON_ENTERED, "gp1", 0, subject="doctor"),
                ev(PERSON_ENTERED, "gp1", 2 * S, subject="patient"),
                ev(HAND_HYGIENE_PERFORMED, "gp1", 10 * S, subject="doctor", method="soap"),
                ev(HAND_HYGIENE_PERFORMED, "gp1", 15 * S, subject="doctor", method="gel"),
                ev(EXAMINATION_STARTED, "gp1", 20 * S, subject="doctor", secondary="patient"),
                ev(PERSON_EXITED, "gp1", 25 * S, subject="patient"),
            ],
        )
        alerts = alerts_of(effects)
        assert len(alerts) == 1
        assert alerts[0].device == "gp1-gel"  # the missing activation is the gel dispenser
        assert only_instance(engine).state == COMPLETED  # continue policy

    def test_hygiene_in_other_room_does_not_count(self):
        engine = fresh_engine()
        effects = run(
            engine,
            [
                ev(PERSON_ENTERED, "gp1", 0, subject="doctor"),
                ev(PERSON_ENTERED, "gp1", 2 * S, subject="patient"),
                ev(HAND_HYGIENE_PERFORMED, "or1", 10 * S, subject="doctor", method="soap"),
                ev(EXAMINATION_STARTED, "gp1", 20 * S, subject="doctor", secondary="patient"),
            ],
        )
        assert len(alerts_of(effects)) == 1


class TestViolationLifecycle:
    def skip_hygiene_events(self):
        return [
            ev(PERSON_ENTERED, "gp1", 0, subject="doctor"),
            ev(PERSON_ENTERED, "gp1", 2 * S, subject="patient"),
            ev(EXAMINATION_STARTED, "gp1", 5 * S, subject="doctor", secondary="patient"),
        ]

    def test_missing_hygiene_opens_violation_with_full_alert(self):
        engine = fresh_engine()
        effects = run(engine, self.skip_hygiene_events())
        assert [type(e).__name__ for e in effects if isinstance(e, (ViolationOpened, AlertRequested))] == [
            "ViolationOpened",
            "AlertRequested",
        ]
        alert = alerts_of(effects)[0]
        assert alert.workflow_id == "gp_office"
        assert alert.device == "gp1-soap"
        assert alert.person == "doctor"
        assert alert.timestamp == 5 * S
        assert alert.description
        assert "admin1" in alert.delivery_targets
        assert "doc-user" in alert.delivery_targets
        instance = only_instance(engine)
        assert instance.state == VIOLATED
        assert instance.open_violation is not None

    def test_suspended_instance_ignores_ordinary_events(self):
        engine = fresh_engine()
        run(engine, self.skip_hygiene_events())
        effects = run(engine, [ev(PERSON_EXITED, "gp1", 10 * S, subject="patient")])
        assert effects == []
        assert only_instance(engine).state == VIOLATED

    def test_corrective_by_other_person_has_no_effect(self):
        engine = fresh_engine()
        run(engine, self.skip_hygiene_events())
        effects = run(
            engine, [ev(HAND_HYGIENE_PERFORMED, "gp1", 9 * S, subject="nurse", method="soap")]
        )
        assert all(not isinstance(e, ViolationCleared) for e in effects)
        assert only_instance(engine).state == VIOLATED

    def test_corrective_clears_and_resumes(self):
        engine = fresh_engine()
        run(engine, self.skip_hygiene_events())
        effects = run(
            engine, [ev(HAND_HYGIENE_PERFORMED, "gp1", 90 * S, subject="doctor", method="soap")]
        )
        cleared = [e for e in effects if isinstance(e, ViolationCleared)]
        assert len(cleared) == 1
        instance = only_instance(engine)
        assert instance.state == ACTIVE
        assert instance.current_node == "departure"
        violation = engine.violations[cleared[0].violation_id]
        assert violation.cleared_at == 90 * S

    def test_continue_policy_completes_with_open_violation(self):
        engine = fresh_engine()
        events = gp_happy_events()
        del events[4]  # drop the gel disinfection
        effects = run(engine, events)
        assert len(alerts_of(effects)) == 1
        assert any(isinstance(e, InstanceCompleted) for e in effects)
        assert only_instance(engine).state == COMPLETED
        assert len(engine.open_violations()) == 1

    def test_late_gel_clears_violation_after_completion(self):
        engine = fresh_engine()
        events = gp_happy_events()
        del events[4]
        run(engine, events)
        effects = run(
            engine, [ev(HAND_HYGIENE_PERFORMED, "gp1", 80 * S, subject="doctor", method="gel")]
        )
        assert any(isinstance(e, ViolationCleared) for e in effects)
        assert engine.open_violations() == []


class TestTick:
    def _violated_engine(self):
        engine = fresh_engine()
        run(
            engine,
            [
                ev(PERSON_ENTERED, "gp1", 0, subject="doctor"),
                ev(PERSON_ENTERED, "gp1", 2 * S, subject="patient"),
                ev(EXAMINATION_STARTED, "gp1", 5 * S, subject="doctor", secondary="patient"),
            ],
        )
        return engine

    def test_no_open_violation_no_effects(self):
        assert fresh_engine().tick(10 * S) == []

    def test_realert_fires_on_interval_edge(self):
        engine = self._violated_engine()  # violation opened at 5 s
        assert engine.tick(64 * S) == []
        effects = engine.tick(65 * S)
        alerts = alerts_of(effects)
        assert len(alerts) == 1
        assert alerts[0].is_realert
        assert alerts[0].timestamp == 65 * S

    def test_open_130s_with_one_prior_realert_gets_one_more(self):
        engine = self._violated_engine()
        engine.tick(65 * S)
        effects = engine.tick(135 * S)  # 130 s after opening, 70 s after last alert
        assert len(alerts_of(effects)) == 1
        violation = next(iter(engine.violations.values()))
        assert violation.realert_count == 2

    def test_completed_instance_with_open_violation_still_realerts(self):
        engine = fresh_engine()
        events = gp_happy_events()
        del events[4]  # no gel; violation opens at patient exit (50 s)
        run(engine, events)
        assert engine.tick(109 * S) == []
        effects = engine.tick(110 * S)
        assert len(alerts_of(effects)) == 1
        run(engine, [ev(HAND_HYGIENE_PERFORMED, "gp1", 115 * S, subject="doctor", method="gel")])
        assert engine.tick(300 * S) == []

    def test_idle_instance_aborts_at_timeout(self):
        engine = fresh_engine()
        run(engine, [ev(PERSON_ENTERED, "gp1", 0, subject="patient")])
        assert engine.tick(7_199 * S) == []
        effects = engine.tick(7_200 * S)
        aborted = [e for e in effects if isinstance(e, InstanceAborted)]
        assert len(aborted) == 1
        assert aborted[0].reason == "idle_timeout"
        assert only_instance(engine).state == ABORTED

    def test_aborted_instance_stops_realerting(self):
        engine = self._violated_engine()
        engine.tick(5 * S + 7_200 * S)  # aborts the suspended instance
        assert only_instance(engine).state == ABORTED
        assert engine.tick(5 * S + 7_260 * S) == []

    def test_event_wait_deadline_aborts(self):
        # custom definition: patient must reach the table within 120 s
        defn = WorkflowDefinition(
            workflow_id="strict_table",
            name="Strict table deadline",
            version=1,
            location_scope="operating_room",
            role_bindings=("patient",),
            trigger=EventPattern(kind=PERSON_ENTERED, subject_role="patient"),
            nodes=(
                WorkflowNode("start", NodeKind.START),
                WorkflowNode(
                    "on_table",
                    NodeKind.EVENT_WAIT,
                    pattern=EventPattern(kind=PATIENT_ON_TABLE, subject_role="patient"),
                    deadline_s=120,
                ),
                WorkflowNode("done", NodeKind.END),
            ),
            transitions=(Transition("start", "on_table"), Transition("on_table", "done")),
        )
        engine = Engine(make_registry(), [compile_definition(defn)])
        run(engine, [ev(PERSON_ENTERED, "or1", 0, subject="patient")])
        assert engine.tick(119 * S) == []
        effects = engine.tick(120 * S)
        assert [e.reason for e in effects if isinstance(e, InstanceAborted)] == ["deadline_exceeded"]


class TestSurgeryCheckpoints:
    def surgery_prefix(self):
        return [
            ev(PERSON_ENTERED, "or1", 0, subject="nurse"),
            ev(PERSON_ENTERED, "or1", 2 * S, subject="surgeon"),
            ev(PERSON_ENTERED, "or1", 4 * S, subject="patient"),
            ev(PATIENT_ON_TABLE, "or1", 20 * S, subject="patient"),
            ev(HAND_HYGIENE_PERFORMED, "or1", 28 * S, subject="nurse", method="soap"),
            ev(GLOVES_EQUIPPED, "or1", 30 * S, subject="nurse"),
            ev(HAND_HYGIENE_PERFORMED, "or1", 35 * S, subject="surgeon", method="soap"),
            ev(GLOVES_EQUIPPED, "or1", 37 * S, subject="surgeon"),
        ]

    def test_wrong_subject_hygiene_violates_surgeon_guard(self):
        engine = fresh_engine()
        events = self.surgery_prefix()
        del events[6]  # surgeon skipped hygiene; nurse's does not cover them
        effects = run(engine, events)
        alerts = alerts_of(effects)
        assert len(alerts) == 1
        assert alerts[0].person == "surgeon"
        assert only_instance(engine).state == VIOLATED

    def test_missing_equipment_scan_alerts_barcode_reader(self):
        engine = fresh_engine()
        effects = run(
            engine,
            self.surgery_prefix()
            + [ev(PERSON_EXITED, "or1", 50 * S, subject="patient")],
        )
        alerts = alerts_of(effects)
        assert len(alerts) == 1
        assert alerts[0].device == "or1-barcode"
        assert alerts[0].person == "nurse"
        assert only_instance(engine).current_node == "suite_reset"

    def test_missing_disinfection_alerts_spray_holder(self):
        engine = fresh_engine()
        effects = run(
            engine,
            self.surgery_prefix()
            + [
                ev(
                    EQUIPMENT_USED,
                    "or1",
                    40 * S,
                    mode="sterilized",
                    package_code="PKG-7",
                    verified=True,
                ),
                ev(PERSON_EXITED, "or1", 50 * S, subject="patient"),
                ev(PERSON_EXITED, "or1", 60 * S, subject="nurse"),
            ],
        )
        alerts = alerts_of(effects)
        assert len(alerts) == 1
        assert alerts[0].device == "or1-spray"
        assert only_instance(engine).state == COMPLETED

    def test_compliant_run_completes_silently(self):
        engine = fresh_engine()
        effects = run(
            engine,
            self.surgery_prefix()
            + [
                ev(
                    EQUIPMENT_USED,
                    "or1",
                    40 * S,
                    mode="sterilized",
                    package_code="PKG-7",
                    verified=True,
                ),
                ev(PERSON_EXITED, "or1", 50 * S, subject="patient"),
                ev(SURFACE_DISINFECTED, "or1", 55 * S),
                ev(PERSON_EXITED, "or1", 60 * S, subject="nurse"),
            ],
        )
        assert alerts_of(effects) == []
        assert only_instance(engine).state == COMPLETED

    def test_unverified_equipment_does_not_satisfy_guard(self):
        engine = fresh_engine()
        effects = run(
            engine,
            self.surgery_prefix()
            + [
                ev(
                    EQUIPMENT_USED,
                    "or1",
                    40 * S,
                    mode="sterilized",
                    package_code="PKG-404",
                    verified=False,
                ),
                ev(PERSON_EXITED, "or1", 50 * S, subject="patient"),
            ],
        )
        assert len(alerts_of(effects)) == 1


class TestExternalEntry:
    def mid_exam_events(self):
        return [
            ev(PERSON_ENTERED, "gp1", 0, subject="doctor"),
            ev(PERSON_ENTERED, "gp1", 2 * S, subject="patient"),
            ev(HAND_HYGIENE_PERFORMED, "gp1", 13 * S, subject="doctor", method="soap"),
            ev(EXAMINATION_STARTED, "gp1", 20 * S, subject="doctor", secondary="patient"),
        ]

    def test_unbound_person_entering_mid_episode_gets_aux_instance(self):
        engine = fresh_engine()
        run(engine, self.mid_exam_events())
        effects = run(engine, [ev(PERSON_ENTERED, "gp1", 25 * S, subject="nurse")])
        spawned = [e for e in effects if isinstance(e, InstanceSpawned)]
        assert [s.workflow_id for s in spawned] == [AUX_WORKFLOW_ID]
        assert dict(spawned[0].bindings) == {"newcomer": "nurse", "patient": "patient"}

    def test_aux_completes_quietly_when_newcomer_sanitizes(self):
        engine = fresh_engine()
        run(engine, self.mid_exam_events())
        run(engine, [ev(PERSON_ENTERED, "gp1", 25 * S, subject="nurse")])
        effects = run(
            engine,
            [
                ev(HAND_HYGIENE_PERFORMED, "gp1", 30 * S, subject="nurse", method="gel"),
                ev(HAND_HYGIENE_PERFORMED, "gp1", 42 * S, subject="doctor", method="gel"),
                ev(PERSON_EXITED, "gp1", 50 * S, subject="patient"),
            ],
        )
        assert alerts_of(effects) == []
        assert all(i.state == COMPLETED for i in engine.instances.values())

    def test_aux_violation_names_the_newcomer(self):
        engine = fresh_engine()
        run(engine, self.mid_exam_events())
        run(engine, [ev(PERSON_ENTERED, "gp1", 25 * S, subject="nurse")])
        effects = run(
            engine,
            [
                ev(HAND_HYGIENE_PERFORMED, "gp1", 42 * S, subject="doctor", method="gel"),
                ev(PERSON_EXITED, "gp1", 50 * S, subject="patient"),
            ],
        )
        alerts = alerts_of(effects)
        assert len(alerts) == 1
        assert alerts[0].person == "nurse"
        assert alerts[0].workflow_id == AUX_WORKFLOW_ID

    def test_bound_person_reentry_spawns_nothing(self):
        engine = fresh_engine()
        run(engine, self.mid_exam_events())
        effects = run(
            engine,
            [
                ev(PERSON_EXITED, "gp1", 22 * S, subject="doctor"),
                ev(PERSON_ENTERED, "gp1", 24 * S, subject="doctor"),
            ],
        )
        assert [e for e in effects if isinstance(e, InstanceSpawned)] == []

    def test_disabled_flag_spawns_nothing(self):
        engine = fresh_engine(EngineConfig(external_person_spawn=False))
        run(engine, self.mid_exam_events())
        effects = run(engine, [ev(PERSON_ENTERED, "gp1", 25 * S, subject="nurse")])
        assert [e for e in effects if isinstance(e, InstanceSpawned)] == []

    def test_second_patient_gets_both_primary_and_aux(self):
        engine = fresh_engine()
        run(engine, self.mid_exam_events())
        effects = run(engine, [ev(PERSON_ENTERED, "gp1", 25 * S, subject="patient2")])
        spawned = sorted(e.workflow_id for e in effects if isinstance(e, InstanceSpawned))
        assert spawned == [AUX_WORKFLOW_ID, "gp_office"]

    def test_entry_before_episode_start_spawns_no_aux(self):
        engine = fresh_engine()
        run(
            engine,
            [
                ev(PERSON_ENTERED, "gp1", 0, subject="doctor"),
                ev(PERSON_ENTERED, "gp1", 2 * S, subject="patient"),
            ],
        )
        effects = run(engine, [ev(PERSON_ENTERED, "gp1", 4 * S, subject="nurse")])
        assert [e for e in effects if isinstance(e, InstanceSpawned)] == []


class TestConfigAndIntegrity:
    def test_bad_intervals_rejected(self):
        with pytest.raises(EngineConfigError):
            EngineConfig(realert_interval_s=0)
        with pytest.raises(EngineConfigError):
            EngineConfig(instance_timeout_s=-5)

    def test_empty_alert_template_rejected_at_startup(self):
        with pytest.raises(EngineConfigError):
            EngineConfig(alert_template="   ")

    def test_duplicate_workflow_keys_rejected(self):
        compiled = shipped_compiled()
        with pytest.raises(EngineConfigError):
            Engine(make_registry(), compiled + [compiled[0]])

    def test_unbound_guard_role_yields_config_error_effect(self):
        defn = WorkflowDefinition(
            workflow_id="misconfigured",
            name="Guard role never binds",
            version=1,
            location_scope="gp_office",
            role_bindings=("patient", "nurse"),
            trigger=EventPattern(kind=PERSON_ENTERED, subject_role="patient"),
            nodes=(
                WorkflowNode("start", NodeKind.START),
                WorkflowNode(
                    "checkpoint",
                    NodeKind.GUARDED,
                    pattern=EventPattern(kind=PERSON_EXITED, subject_role="patient"),
                    guard=GuardSpec(
                        required_event=EventPattern(kind=SURFACE_DISINFECTED),
                        by_role="nurse",
                        window_s=60,
                        on_violation=ViolationPolicy.CONTINUE,
                    ),
                ),
                WorkflowNode("done", NodeKind.END),
            ),
            transitions=(Transition("start", "checkpoint"), Transition("checkpoint", "done")),
        )
        engine = Engine(make_registry(), [compile_definition(defn)])
        effects = run(
            engine,
            [
                ev(PERSON_ENTERED, "gp1", 0, subject="patient"),
                ev(PERSON_EXITED, "gp1", 5 * S, subject="patient"),
            ],
        )
        assert any(isinstance(e, GuardConfigError) for e in effects)
        assert engine.violations == {}

    def test_every_alert_carries_all_mandatory_fields(self):
        engine = fresh_engine()
        events = gp_happy_events()
        del events[2]  # no pre-exam hygiene
        effects = run(engine, events)
        effects += engine.tick(65 * S)
        for alert in alerts_of(effects):
            assert alert.workflow_id and alert.instance_id
            assert alert.device
            assert alert.person
            assert alert.timestamp >= 0
            assert alert.description

    def test_completed_history_is_a_valid_path(self):
        engine = fresh_engine()
        run(engine, gp_happy_events())
        instance = only_instance(engine)
        assert instance.state == COMPLETED
        compiled = engine.workflows[instance.workflow_key]
        assert history_is_valid_path(instance, compiled)

    def test_effect_stream_is_deterministic(self):
        first = fresh_engine()
        second = fresh_engine()
        events = gp_happy_events()
        a = [e.to_dict() for e in run(first, events)] + [e.to_dict() for e in first.tick(60 * S)]
        b = [e.to_dict() for e in run(second, events)] + [e.to_dict() for e in second.tick(60 * S)]
        assert a == b
