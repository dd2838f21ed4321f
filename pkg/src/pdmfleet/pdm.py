"""Register-level model of the propagation delay measurement (PDM) block.

A control unit enables one RO at a time for the configured gate time, latches
its counter into the result SRAM and moves on to the next RO. The block is
driven over a 32-bit register interface whose layout is in
``register_map.json`` next to this module.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from fractions import Fraction
from importlib import resources
from typing import NamedTuple, Optional

import numpy as np

from .core import COUNTER_MAX, InvalidArgument, PdmError
from .silicon import OperatingPoint

NS_PER_US = 1000
NS_PER_S = 1_000_000_000


def _load_map() -> dict:
    return json.loads(resources.files(__package__).joinpath("register_map.json").read_text())


REGISTER_MAP = _load_map()
_OFFSETS = {r["name"]: r["offset"] for r in REGISTER_MAP["registers"]}

CTRL = _OFFSETS["CTRL"]
STATUS = _OFFSETS["STATUS"]
CFG_GATE_TIME = _OFFSETS["CFG_GATE_TIME"]
CFG_N_RO = _OFFSETS["CFG_N_RO"]
SENSOR_TEMP = _OFFSETS["SENSOR_TEMP"]
SENSOR_VCC = _OFFSETS["SENSOR_VCC"]
RESULT_BASE = _OFFSETS["RESULT"]

CTRL_START = 1 << 0
CTRL_ABORT = 1 << 1
STATUS_BUSY = 1 << 0
STATUS_DONE = 1 << 1
STATUS_ERROR = 1 << 2

GATE_TIME_RESET_US = 500_000


def result_addr(ro_index: int) -> int:
    return RESULT_BASE + 4 * ro_index


class BusError(PdmError):
    """Access to an address that is not decoded."""


class Ack(enum.Enum):
    OK = "ok"
    REJECTED = "rejected"


class Firmware(str, enum.Enum):
    APPLICATION = "Application"
    TEST = "Test"


class Phase(str, enum.Enum):
    IDLE = "Idle"
    MEASURING = "Measuring"
    STORING = "Storing"
    DONE = "Done"


@dataclass(frozen=True)
class PdmState:
    phase: Phase
    ro_index: Optional[int]
    elapsed_in_phase_s: float
    firmware: Firmware


class PdmEvent(NamedTuple):
    kind: str  # "latched" | "done"
    ro_index: Optional[int]
    count: Optional[int]
    time_s: float


def latch_count(frequency_hz: float, gate_us: int) -> tuple[int, bool]:
    """floor(f * gate) exactly, saturated to the 32-bit counter. Returns (count, saturated)."""
    if frequency_hz < 0 or not math.isfinite(frequency_hz):
        raise InvalidArgument(f"invalid oscillator frequency {frequency_hz}")
    x = frequency_hz * (gate_us / 1e6)
    c = math.floor(x)
    frac = x - c
    if frac < 1e-6 or frac > 1 - 1e-6:
        # float rounding may sit on the wrong side of an integer; settle it exactly
        c = math.floor(Fraction(frequency_hz) * Fraction(gate_us, 1_000_000))
    if c > COUNTER_MAX:
        return COUNTER_MAX, True
    return c, False


class PdmDevice:
    """One simulated board: firmware image, PDM control unit, counters and registers.

    ``oscillators`` is any object with ``n_ro`` and
    ``frequency(ro_index, op, gen) -> Hz`` (see ``silicon.DeviceModel``).
    Not thread-safe; serialize access per device.
    """

    def __init__(self, oscillators, *, op: OperatingPoint = OperatingPoint(),
                 gen: Optional[np.random.Generator] = None,
                 firmware: Firmware = Firmware.APPLICATION):
        self.oscillators = oscillators
        self.n_ro = oscillators.n_ro
        self.op = op
        self.gen = gen
        self.firmware = firmware
        self.time_ns = 0
        self._reset_pdm()

    def _reset_pdm(self) -> None:
        self.phase = Phase.IDLE
        self.ro_index: Optional[int] = None
        self.elapsed_ns = 0
        self.gate_us = GATE_TIME_RESET_US
        self.results = [0] * self.n_ro
        self.error = False

    # ---------------------------------------------------------------- state

    @property
    def busy(self) -> bool:
        return self.phase in (Phase.MEASURING, Phase.STORING)

    @property
    def enabled_ro(self) -> Optional[int]:
        return self.ro_index if self.phase is Phase.MEASURING else None

    @property
    def state(self) -> PdmState:
        return PdmState(self.phase, self.ro_index, self.elapsed_ns / NS_PER_S, self.firmware)

    @property
    def gate_time_s(self) -> float:
        return self.gate_us / 1e6

    def set_operating_point(self, op: OperatingPoint) -> None:
        self.op = op

    # ------------------------------------------------------------- firmware

    def program_firmware(self, image: Firmware) -> Ack:
        if self.busy:
            return Ack.REJECTED
        self.firmware = Firmware(image)
        self._reset_pdm()
        return Ack.OK

    # ------------------------------------------------------------------ bus

    def _decode(self, addr: int) -> str:
        if self.firmware is not Firmware.TEST:
            raise BusError(f"address {addr:#x} not decoded under {self.firmware.value} firmware")
        if addr in (CTRL, STATUS, CFG_GATE_TIME, CFG_N_RO, SENSOR_TEMP, SENSOR_VCC):
            return "reg"
        if RESULT_BASE <= addr < RESULT_BASE + 4 * self.n_ro and addr % 4 == 0:
            return "result"
        raise BusError(f"unknown address {addr:#x}")

    def read_register(self, addr: int) -> int:
        kind = self._decode(addr)
        if kind == "result":
            return self.results[(addr - RESULT_BASE) // 4]
        if addr == CTRL:
            return 0
        if addr == STATUS:
            return ((STATUS_BUSY if self.busy else 0) | (STATUS_DONE if self.phase is Phase.DONE else 0)
                    | (STATUS_ERROR if self.error else 0))
        if addr == CFG_GATE_TIME:
            return self.gate_us
        if addr == CFG_N_RO:
            return self.n_ro
        if addr == SENSOR_TEMP:
            return round(self.op.die_temp_c * 100) & 0xFFFFFFFF
        return round(self.op.core_voltage_v * 1000)  # SENSOR_VCC

    def write_register(self, addr: int, value: int) -> Ack:
        kind = self._decode(addr)
        if not 0 <= value <= 0xFFFFFFFF:
            raise InvalidArgument(f"value {value} does not fit a 32-bit register")
        if kind == "result" or addr in (STATUS, CFG_N_RO, SENSOR_TEMP, SENSOR_VCC):
            return Ack.REJECTED
        if addr == CFG_GATE_TIME:
            if self.busy or value == 0:
                return Ack.REJECTED
            self.gate_us = value
            return Ack.OK
        # CTRL
        if value & CTRL_ABORT:
            if self.busy:
                self.phase, self.ro_index, self.elapsed_ns = Phase.IDLE, None, 0
            return Ack.OK
        if value & CTRL_START:
            if self.busy:
                return Ack.REJECTED
            self.results = [0] * self.n_ro
            self.error = False
            self.phase, self.ro_index, self.elapsed_ns = Phase.MEASURING, 0, 0
        return Ack.OK

    # ----------------------------------------------------------------- time

    def advance(self, dt: float) -> list[PdmEvent]:
        """Advance simulated time by ``dt`` seconds and run the control unit."""
        if not dt > 0:
            raise InvalidArgument("dt must be positive")
        return self.advance_ns(round(dt * NS_PER_S))

    def advance_ns(self, dt_ns: int) -> list[PdmEvent]:
        events: list[PdmEvent] = []
        gate_ns = self.gate_us * NS_PER_US
        while dt_ns > 0 and self.phase is Phase.MEASURING:
            step = gate_ns - self.elapsed_ns
            if dt_ns < step:
                self.elapsed_ns += dt_ns
                self.time_ns += dt_ns
                return events
            dt_ns -= step
            self.time_ns += step
            i = self.ro_index
            f = self.oscillators.frequency(i, self.op, self.gen)
            count, saturated = latch_count(f, self.gate_us)
            self.error |= saturated
            # Storing: SRAM copy modeled as zero-time
            self.phase, self.elapsed_ns = Phase.STORING, 0
            self.results[i] = count
            events.append(PdmEvent("latched", i, count, self.time_ns / NS_PER_S))
            if i + 1 < self.n_ro:
                self.phase, self.ro_index = Phase.MEASURING, i + 1
            else:
                self.phase, self.ro_index = Phase.DONE, None
                events.append(PdmEvent("done", None, None, self.time_ns / NS_PER_S))
        if dt_ns > 0:
            self.time_ns += dt_ns
            if self.phase is not Phase.MEASURING:
                self.elapsed_ns += dt_ns
        return events

    def pass_duration_s(self) -> float:
        return self.n_ro * self.gate_us / 1e6


def decode_temp(raw: int) -> float:
    if raw & 0x80000000:
        raw -= 1 << 32
    return raw / 100.0


def decode_vcc(raw: int) -> float:
    return raw / 1000.0
