"""Shared fixtures: a standard facility registry, reading builders, live server."""

from __future__ import annotations

import itertools
import socket
import threading
import time

import pytest
import uvicorn

from wardwatch.events import (
    AntennaKind,
    BarcodeScanned,
    DispenserActivated,
    DispenserKind,
    Presence,
    RfidTag,
    SensorReading,
    SprayUsed,
    TapUsed,
    ThermalPresence,
)
from wardwatch.registry import (
    DEVICE_KINDS,
    DeviceRecord,
    PersonRecord,
    Registry,
    RoomRecord,
    SterilizationLogEntry,
    UserRecord,
)

GP_KIT = (
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
)

SURGERY_KIT = (
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
)

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

PEOPLE = (
    ("doctor", "Dr. Imre Varga", "practitioner", "TAG-DOC"),
    ("patient", "Pat Kovacs", "patient", "TAG-PAT"),
    ("patient2", "Sam Molnar", "patient", "TAG-PA2"),
    ("nurse", "Nia Szabo", "nurse", "TAG-NUR"),
    ("surgeon", "Sol Farkas", "surgeon", "TAG-SUR"),
)

# (user_id, display_name, access role, linked person)
USERS = (
    ("admin1", "Ada Officer", "administrator", None),
    ("epi1", "Evi Graph", "epidemiologist", None),
    ("doc-user", "Dr. Imre Varga", "clinical", "doctor"),
    ("nurse-user", "Nia Szabo", "clinical", "nurse"),
)


def sensor_id(room: str, device_kind: str) -> str:
    return f"{room}-{SENSOR_SUFFIX[device_kind]}"


def add_room_with_kit(reg: Registry, room_id: str, kind: str, kit=GP_KIT) -> None:
    reg.register_room(RoomRecord(room_id=room_id, kind=kind))
    node = f"{room_id}-node"
    ordered = sorted(kit, key=lambda k: (DEVICE_KINDS[k] != "smart", k))
    for device_kind in ordered:
        reg.register_device(
            DeviceRecord(
                sensor_id=sensor_id(room_id, device_kind),
                node_id=node,
                device_kind=device_kind,
                room=room_id,
                node_class=DEVICE_KINDS[device_kind],
            )
        )


def make_registry() -> Registry:
    reg = Registry()
    add_room_with_kit(reg, "gp1", "gp_office", GP_KIT)
    add_room_with_kit(reg, "or1", "operating_room", SURGERY_KIT)
    for pid, name, role, badge in PEOPLE:
        reg.register_person(PersonRecord(pid, name, role, badge))
    for uid, name, role, person in USERS:
        reg.register_user(UserRecord(user_id=uid, display_name=name, role=role, person_id=person))
    reg.add_sterilized_package(
        SterilizationLogEntry(package_code="PKG-7", sterilized_at=0, autoclave_id="autoclave-1")
    )
    return reg


@pytest.fixture
def registry() -> Registry:
    return make_registry()


class ReadingFactory:
    """Builds wire-plausible readings with unique urls."""

    def __init__(self, registry: Registry):
        self.registry = registry
        self._seq = itertools.count(1)

    def _build(self, sensor: str, ts: int, payload) -> SensorReading:
        device = self.registry.device(sensor)
        assert device is not None, f"unknown test sensor {sensor}"
        return SensorReading(
            reading_url=f"reading://{device.node_id}/{sensor}/{next(self._seq):05d}",
            sensor_id=sensor,
            node_id=device.node_id,
            timestamp=ts,
            payload=payload,
        )

    def door(self, room: str, badge: str, ts: int) -> SensorReading:
        return self._build(sensor_id(room, "door_antenna"), ts, RfidTag(badge, AntennaKind.DOOR))

    def sink(self, room: str, badge: str, ts: int) -> SensorReading:
        return self._build(sensor_id(room, "sink_antenna"), ts, RfidTag(badge, AntennaKind.SINK))

    def dispenser(self, room: str, kind: str, ts: int) -> SensorReading:
        device_kind = {
            "soap": "soap_dispenser",
            "gel": "gel_dispenser",
            "gloves": "glove_dispenser",
            "towel": "towel_dispenser",
            "trash": "trash_can",
        }[kind]
        return self._build(sensor_id(room, device_kind), ts, DispenserActivated(DispenserKind(kind)))

    def tap(self, room: str, ts: int) -> SensorReading:
        return self._build(sensor_id(room, "tap"), ts, TapUsed())

    def thermal(self, room: str, ts: int, value: bool = True) -> SensorReading:
        return self._build(sensor_id(room, "thermal_array"), ts, ThermalPresence(value))

    def bed(self, room: str, ts: int, value: bool = True) -> SensorReading:
        return self._build(sensor_id(room, "bed_proximity"), ts, Presence(value))

    def table(self, room: str, ts: int, value: bool = True) -> SensorReading:
        return self._build(sensor_id(room, "table_infrared"), ts, Presence(value))

    def barcode(self, room: str, code: str, ts: int) -> SensorReading:
        return self._build(sensor_id(room, "barcode_reader"), ts, BarcodeScanned(code))

    def spray(self, room: str, ts: int) -> SensorReading:
        return self._build(sensor_id(room, "spray_holder"), ts, SprayUsed())


@pytest.fixture
def readings(registry) -> ReadingFactory:
    return ReadingFactory(registry)


class LiveServer:
    """Uvicorn on a loopback port in a daemon thread.

    The in-process test client cannot abort an unfinished streaming
    response, so anything exercising the live feed talks to a real socket.
    """

    def __init__(self, app):
        self.port = self._free_port()
        config = uvicorn.Config(
            app, host="127.0.0.1", port=self.port, log_level="warning", lifespan="off"
        )
        self.server = uvicorn.Server(config)
        self.thread = threading.Thread(target=self.server.run, daemon=True)
        self.thread.start()
        deadline = time.monotonic() + 10
        while not self.server.started:
            if time.monotonic() > deadline:
                raise RuntimeError("gateway server did not start")
            time.sleep(0.01)
        self.base_url = f"http://127.0.0.1:{self.port}"

    @staticmethod
    def _free_port() -> int:
        with socket.socket() as sock:
            sock.bind(("127.0.0.1", 0))
            return sock.getsockname()[1]

    def stop(self) -> None:
        self.server.should_exit = True
        self.thread.join(timeout=5)

    def __enter__(self) -> "LiveServer":
        return self

    def __exit__(self, *exc) -> None:
        self.stop()
