from __future__ import annotations

import pytest

from pdmfleet.silicon import FleetConfig, generate_fleet, synth_radiation_scans

_ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_acceptance(number: int, ok: bool, detail: str) -> None:
    _ACCEPTANCE[number] = (bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")


@pytest.fixture(scope="session")
def small_config() -> FleetConfig:
    return FleetConfig(n_deployed=24, n_unused=4, n_ro=8, n_scans=3, tunnel_length_m=300.0, seed=11)


@pytest.fixture(scope="session")
def small_scans(small_config):
    return synth_radiation_scans(small_config)


@pytest.fixture(scope="session")
def small_fleet(small_config, small_scans):
    return generate_fleet(small_config, small_scans)
