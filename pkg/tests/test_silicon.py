from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, strategies as st

from pdmfleet.core import InvalidArgument
from pdmfleet.silicon import (AgingCoefficients, AgingState, DeviceModel, FleetConfig,
                              OperatingPoint, RoProfile, aging_fraction, effective_delay,
                              generate_fleet, load_fleet, ro_frequency, save_fleet,
                              synth_radiation_scans)


def test_ro_frequency_three_stages():
    assert ro_frequency(3, 1e-9) == pytest.approx(1e9 / 6, rel=1e-15)


def test_ro_frequency_fresh_fleet_mean():
    # t_p solved from f = 1 / (2 n t_p) at 330 MHz, n = 5
    assert ro_frequency(5, 3.0303e-10) == pytest.approx(330e6, rel=1e-5)


def test_ro_frequency_halves_with_doubled_delay():
    assert ro_frequency(5, 4e-10) == pytest.approx(2 * ro_frequency(5, 8e-10), rel=1e-15)


@pytest.mark.parametrize("n", [0, 2, 4, -3, 1])
def test_ro_frequency_rejects_bad_stage_count(n):
    with pytest.raises(InvalidArgument):
        ro_frequency(n, 1e-9)


@given(st.floats(1.0, 1e9), st.sampled_from([3, 5, 7, 9, 21]))
def test_ro_frequency_round_trip(f, n):
    got = ro_frequency(n, 1 / (2 * n * f))
    assert abs(got - f) <= 2 * np.spacing(f)


def test_aging_zero_for_fresh_device():
    assert aging_fraction(5.0, 3.0, 0.0) == 0.0


def test_aging_at_median_dose_after_seven_years():
    assert 0.03 <= aging_fraction(1.0, 0.5, 7.0) <= 0.05


def test_aging_monotone_in_gamma():
    c = AgingCoefficients(k_neutron=0.0)
    assert aging_fraction(2.0, 1.0, 7.0, c) > aging_fraction(1.0, 1.0, 7.0, c)


def test_aging_rejects_negative_inputs():
    with pytest.raises(InvalidArgument):
        aging_fraction(-1.0, 0.0, 1.0)


PROFILE = RoProfile(0, 2.5e-10, 0.5e-10, 5)


def test_effective_delay_neutral():
    d = effective_delay(PROFILE, AgingState(), OperatingPoint(50.0, 1.0), None)
    assert d == PROFILE.base_delay_s + PROFILE.routing_offset_s


def test_effective_delay_aging_only():
    aged = AgingState(0.04, 1.0, 1.0, 7.0)
    d = effective_delay(PROFILE, aged, OperatingPoint(50.0, 1.0), None)
    assert d == pytest.approx(1.04 * PROFILE.nominal_delay_s, rel=1e-15)


def test_effective_delay_temperature():
    d = effective_delay(PROFILE, AgingState(), OperatingPoint(60.0, 1.0), None,
                        temp_coeff_per_c=0.001)
    assert d == pytest.approx(1.01 * PROFILE.nominal_delay_s, rel=1e-14)


@given(st.floats(0, 0.5), st.floats(1e-6, 0.5))
def test_delay_increasing_in_aging(a, step):
    op = OperatingPoint(55.0, 0.98)
    lo = effective_delay(PROFILE, AgingState(a, 0, 0, 1.0), op, None)
    hi = effective_delay(PROFILE, AgingState(a + step, 0, 0, 1.0), op, None)
    assert hi > lo


def test_noise_free_delay_is_pure():
    op = OperatingPoint(70.0, 1.02)
    a = AgingState(0.03, 1, 1, 7)
    assert effective_delay(PROFILE, a, op, None) == effective_delay(PROFILE, a, op, None)


def test_operating_point_clamps():
    with pytest.raises(InvalidArgument):
        OperatingPoint(130.0, 1.0)
    with pytest.raises(InvalidArgument):
        OperatingPoint(50.0, 0.8)


def test_noise_is_bounded():
    m = DeviceModel([PROFILE], AgingState(), noise_rel=0.01)
    gen = np.random.default_rng(0)
    f0 = ro_frequency(5, PROFILE.nominal_delay_s)
    fs = np.array([m.frequency(0, OperatingPoint(), gen) for _ in range(2000)])
    assert np.all(np.abs(fs / f0 - 1) < 0.06)
    assert 0.005 < np.std(fs / f0) < 0.015


def test_config_text_round_trip():
    cfg = FleetConfig(n_deployed=10, noise_rel=0.002, seed=5)
    assert FleetConfig.from_text(cfg.to_text()) == cfg


@pytest.mark.parametrize("text", ["bogus = 1", "n_ro = x", "n_ro 3", "n_ro = 0"])
def test_config_rejects_bad_text(text):
    with pytest.raises(InvalidArgument):
        FleetConfig.from_text(text)


@pytest.fixture(scope="module")
def default_fleet():
    cfg = FleetConfig()
    return generate_fleet(cfg, synth_radiation_scans(cfg))


def test_default_fleet_shape(default_fleet):
    devs = default_fleet.devices
    assert sum(d.deployed for d in devs) == 298
    assert sum(not d.deployed for d in devs) == 7
    assert all(len(default_fleet.profiles[d.device_id]) == 100 for d in devs)
    assert len({d.device_id for d in devs}) == 305


def test_default_fleet_frequency_ranges(default_fleet):
    fresh = np.concatenate([default_fleet.fresh_frequencies(d.device_id)
                            for d in default_fleet.devices])
    aged = np.concatenate([default_fleet.nominal_frequencies(d.device_id)
                           for d in default_fleet.devices])
    assert 313e6 <= fresh.mean() <= 345e6
    assert aged.min() >= 270e6 and aged.max() <= 400e6


def test_unused_faster_than_used(default_fleet):
    used = [default_fleet.nominal_frequencies(d.device_id) for d in default_fleet.devices
            if d.deployed]
    unused = [default_fleet.nominal_frequencies(d.device_id) for d in default_fleet.devices
              if not d.deployed]
    assert np.median(np.concatenate(unused)) > np.median(np.concatenate(used))


def test_fleet_generation_deterministic(small_config, small_scans, small_fleet):
    again = generate_fleet(small_config, synth_radiation_scans(small_config))
    assert again == small_fleet


def test_fleet_save_load_round_trip(tmp_path, small_fleet):
    save_fleet(small_fleet, tmp_path)
    assert load_fleet(tmp_path) == small_fleet


def test_deployed_devices_aged_unused_fresh(small_fleet):
    for d in small_fleet.devices:
        a = small_fleet.aging[d.device_id].aging_fraction
        assert (a > 0) if d.deployed else (a == 0)
