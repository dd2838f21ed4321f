from __future__ import annotations

import json
import math
from fractions import Fraction
from importlib import resources

import numpy as np
import pytest
from hypothesis import given, strategies as st

from pdmfleet import pdm
from pdmfleet.core import COUNTER_MAX, InvalidArgument
from pdmfleet.pdm import (CFG_GATE_TIME, CFG_N_RO, CTRL, CTRL_ABORT, CTRL_START, SENSOR_TEMP,
                          SENSOR_VCC, STATUS, STATUS_BUSY, STATUS_DONE, STATUS_ERROR, Ack,
                          BusError, Firmware, PdmDevice, Phase, decode_temp, decode_vcc,
                          latch_count, result_addr)
from pdmfleet.silicon import (AgingState, ConstantOscillators, DeviceModel, OperatingPoint,
                              RoProfile)


def device(freqs=(313e6,) * 100, **kw) -> PdmDevice:
    return PdmDevice(ConstantOscillators(list(freqs)), firmware=Firmware.TEST, **kw)


def test_reset_status():
    assert device().read_register(STATUS) == 0


def test_default_build_reports_100_ros():
    assert device().read_register(CFG_N_RO) == 100


def test_start_enters_measuring_zero():
    d = device()
    assert d.write_register(CTRL, CTRL_START) is Ack.OK
    assert d.read_register(STATUS) & STATUS_BUSY
    assert d.state.phase is Phase.MEASURING and d.state.ro_index == 0


def test_gate_time_register_sets_gate():
    d = device([313e6])
    assert d.write_register(CFG_GATE_TIME, 500_000) is Ack.OK
    d.write_register(CTRL, CTRL_START)
    d.advance(0.5)
    assert d.read_register(result_addr(0)) == 156_500_000


def test_gate_write_while_busy_rejected():
    d = device()
    d.write_register(CTRL, CTRL_START)
    before = d.read_register(STATUS)
    assert d.write_register(CFG_GATE_TIME, 1000) is Ack.REJECTED
    assert d.read_register(STATUS) == before
    assert d.read_register(CFG_GATE_TIME) == 500_000


def test_result_from_zero_noise_oracle():
    # base delay chosen so the noise-free oracle runs at exactly 313 MHz
    prof = RoProfile(0, 1 / (2 * 5 * 313e6), 0.0, 5)
    model = DeviceModel([prof], AgingState(), noise_rel=0.0)
    f = model.frequency(0, OperatingPoint())
    d = PdmDevice(model, firmware=Firmware.TEST)
    d.write_register(CTRL, CTRL_START)
    d.advance(0.5)
    assert d.read_register(result_addr(0)) == math.floor(Fraction(f) * Fraction(1, 2))
    assert abs(d.read_register(result_addr(0)) - 156_500_000) <= 1


def test_full_pass_populates_all_results():
    freqs = [300e6 + 1e6 * i for i in range(100)]
    d = device(freqs)
    d.write_register(CTRL, CTRL_START)
    events = d.advance_ns(100 * 500_000_000)
    assert d.read_register(STATUS) == STATUS_DONE
    assert [d.read_register(result_addr(i)) for i in range(100)] == [int(f // 2) for f in freqs]
    assert events[-1].kind == "done"
    assert events[-1].time_s == pytest.approx(50.0)


def test_mid_gate_nothing_latched():
    d = device()
    d.write_register(CTRL, CTRL_START)
    d.advance(0.25)
    assert d.state.phase is Phase.MEASURING and d.state.ro_index == 0
    assert d.read_register(result_addr(0)) == 0


def test_400mhz_fits_counter():
    assert latch_count(400e6, 500_000) == (200_000_000, False)


def test_counter_saturates_and_sets_error():
    d = device([1e10])
    d.write_register(CTRL, CTRL_START)
    d.advance(0.5)
    assert d.read_register(result_addr(0)) == COUNTER_MAX
    assert d.read_register(STATUS) & STATUS_ERROR


def test_firmware_controls_decode():
    d = PdmDevice(ConstantOscillators([1e6] * 100))
    with pytest.raises(BusError):
        d.read_register(CFG_N_RO)
    assert d.program_firmware(Firmware.TEST) is Ack.OK
    assert d.read_register(CFG_N_RO) == 100
    assert d.program_firmware(Firmware.APPLICATION) is Ack.OK
    with pytest.raises(BusError):
        d.read_register(CFG_N_RO)


def test_program_while_measuring_rejected():
    d = device()
    d.write_register(CTRL, CTRL_START)
    assert d.program_firmware(Firmware.APPLICATION) is Ack.REJECTED
    assert d.firmware is Firmware.TEST


def test_unknown_address_is_bus_error():
    d = device([1.0])
    for addr in (0x18, 0x104, 0x101, 0xFFFF):
        with pytest.raises(BusError):
            d.read_register(addr)
        with pytest.raises(BusError):
            d.write_register(addr, 0)


def test_read_only_registers_reject_writes():
    d = device()
    for addr in (STATUS, CFG_N_RO, SENSOR_TEMP, SENSOR_VCC, result_addr(3)):
        assert d.write_register(addr, 1) is Ack.REJECTED


def test_abort_returns_to_idle():
    d = device()
    d.write_register(CTRL, CTRL_START)
    d.advance(1.2)
    assert d.write_register(CTRL, CTRL_ABORT) is Ack.OK
    assert d.state.phase is Phase.IDLE and d.read_register(STATUS) == 0


def test_start_while_busy_rejected():
    d = device()
    d.write_register(CTRL, CTRL_START)
    assert d.write_register(CTRL, CTRL_START) is Ack.REJECTED


def test_sensors_quantized():
    d = device(op=OperatingPoint(-12.345, 1.0234))
    assert decode_temp(d.read_register(SENSOR_TEMP)) in (-12.35, -12.34)
    assert decode_vcc(d.read_register(SENSOR_VCC)) == 1.023


def test_register_map_table_matches_constants():
    table = json.loads(resources.files("pdmfleet").joinpath("register_map.json").read_text())
    offsets = {r["name"]: r["offset"] for r in table["registers"]}
    assert offsets["CTRL"] == CTRL and offsets["STATUS"] == STATUS
    assert offsets["RESULT"] == pdm.RESULT_BASE


def test_exactly_one_ro_enabled_and_indices_increase():
    d = device([1e6] * 7)
    d.write_register(CFG_GATE_TIME, 10)
    d.write_register(CTRL, CTRL_START)
    seen = []
    while d.busy:
        assert d.enabled_ro is not None
        seen.append(d.enabled_ro)
        d.advance_ns(3_000)
    assert seen == sorted(seen) and set(seen) == set(range(7))
    assert d.enabled_ro is None


def test_results_stable_while_done():
    d = device([5e6] * 3)
    d.write_register(CTRL, CTRL_START)
    d.advance(1.5)
    snap = [d.read_register(result_addr(i)) for i in range(3)]
    d.advance(10.0)
    assert [d.read_register(result_addr(i)) for i in range(3)] == snap


def test_zero_noise_passes_repeat():
    prof = [RoProfile(i, 2.8e-10 + 1e-12 * i, 3e-11, 5) for i in range(5)]
    model = DeviceModel(prof, AgingState(0.03, 1, 1, 7), noise_rel=0.0)
    d = PdmDevice(model, firmware=Firmware.TEST, gen=np.random.default_rng(1))
    out = []
    for _ in range(2):
        d.write_register(CTRL, CTRL_START)
        d.advance(2.5)
        out.append([d.read_register(result_addr(i)) for i in range(5)])
    assert out[0] == out[1]


@given(st.floats(0, 8e9, allow_nan=False), st.integers(1, 2_000_000))
def test_latch_is_exact_floor(f, gate_us):
    count, sat = latch_count(f, gate_us)
    exact = math.floor(Fraction(f) * Fraction(gate_us, 1_000_000))
    assert count == min(exact, COUNTER_MAX)
    assert sat == (exact > COUNTER_MAX)


@given(st.lists(st.integers(1, 10_000_000), min_size=1, max_size=40))
def test_pass_duration_is_sum_of_gates(steps):
    d = device([1e6] * 4)
    d.write_register(CFG_GATE_TIME, 1000)
    d.write_register(CTRL, CTRL_START)
    done_at = None
    t = 0
    for s in steps:
        for ev in d.advance_ns(s):
            if ev.kind == "done":
                done_at = ev.time_s
        t += s
    if t >= 4 * 1_000_000:
        assert done_at == pytest.approx(0.004)
    else:
        assert done_at is None


def test_latch_rejects_negative_frequency():
    with pytest.raises(InvalidArgument):
        latch_count(-1.0, 10)
