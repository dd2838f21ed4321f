"""Fleet-wide self-test campaign.

Every device goes through the same session: program the test image, set the
gate time, run ``n_iterations`` measurement passes (sensors sampled once per
pass), then restore the application image. Sessions of different devices run
in parallel worker processes; each session is strictly sequential.
"""

from __future__ import annotations

import enum
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import pandas as pd

from .core import MEASUREMENT_FIELDS, InvalidArgument, MeasurementSet, PdmError, Rng, device_key
from .pdm import (
    CFG_GATE_TIME,
    CFG_N_RO,
    CTRL,
    CTRL_ABORT,
    CTRL_START,
    NS_PER_US,
    SENSOR_TEMP,
    SENSOR_VCC,
    STATUS,
    STATUS_DONE,
    STATUS_ERROR,
    Ack,
    BusError,
    Firmware,
    PdmDevice,
    decode_temp,
    decode_vcc,
    result_addr,
)
from .silicon import DeviceModel, Fleet, OperatingPoint

log = logging.getLogger(__name__)

CAMPAIGN_START = 1703462400  # 2023-12-25T00:00:00Z, winter shutdown
TEMP_WALK_LIMIT_C = 2.0
VOLT_WALK_LIMIT_V = 0.010
RESTORE_ATTEMPTS = 1000


class SessionError(PdmError):
    pass


class Outcome(str, enum.Enum):
    COMPLETE = "Complete"
    PARTIAL = "Partial"
    FAILED = "Failed"


@dataclass(frozen=True)
class CampaignConfig:
    n_iterations: int = 100
    gate_time_s: float = 0.5
    n_ro: int = 100
    retry_limit: int = 3
    workers: Optional[int] = None
    seed: Optional[int] = None
    start_timestamp: int = CAMPAIGN_START
    output_dir: Optional[str] = None

    def __post_init__(self):
        if self.n_iterations < 1:
            raise InvalidArgument("n_iterations must be >= 1")
        if not self.gate_time_s > 0:
            raise InvalidArgument("gate_time_s must be > 0")
        if self.retry_limit < 0:
            raise InvalidArgument("retry_limit must be >= 0")
        if self.gate_us < 1 or self.gate_us > 0xFFFFFFFF:
            raise InvalidArgument("gate time must be within 1 us .. 2^32 us")

    @property
    def gate_us(self) -> int:
        return round(self.gate_time_s * 1e6)


@dataclass
class DeviceOutcome:
    device_id: str
    outcome: Outcome
    iterations_done: int
    reason: Optional[str] = None
    final_firmware: Firmware = Firmware.APPLICATION
    retries: int = 0


@dataclass
class CampaignReport:
    outcomes: dict[str, DeviceOutcome]
    total_measurements: int
    n_iterations: int
    # simulated duration of the campaign (devices run in parallel), seconds
    wall_clock_s: float
    host_seconds: float = field(default=0.0, compare=False)

    def to_json(self) -> str:
        """Deterministic JSON; host compute time is deliberately left out."""
        body = {
            "n_iterations": self.n_iterations,
            "total_measurements": self.total_measurements,
            "wall_clock_s": self.wall_clock_s,
            "counts": {o.value: sum(1 for d in self.outcomes.values() if d.outcome is o)
                       for o in Outcome},
            "devices": [
                {"device_id": d.device_id, "outcome": d.outcome.value,
                 "iterations_done": d.iterations_done, "reason": d.reason,
                 "final_firmware": d.final_firmware.value, "retries": d.retries}
                for d in sorted(self.outcomes.values(), key=lambda d: d.device_id)],
        }
        return json.dumps(body, indent=2, sort_keys=True) + "\n"


# ------------------------------------------------------------ fault harness

@dataclass(frozen=True)
class FaultPlan:
    """Transient or permanent faults injected on one device's bus.

    kind: "read" | "write" (BusError on register access), "program"
    (programming attempts are rejected; must be transient), "stall" (start
    commands are swallowed so passes never complete).
    """

    kind: str
    probability: float = 1.0
    after_ops: int = 0
    max_faults: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("read", "write", "program", "stall"):
            raise InvalidArgument(f"unknown fault kind {self.kind!r}")
        if not 0 <= self.probability <= 1:
            raise InvalidArgument("probability must be in [0, 1]")
        # programming goes through the crate management path; only transient failures there
        if self.kind == "program" and self.max_faults is None and self.probability >= 1:
            raise InvalidArgument("programming faults must be transient (max_faults or probability < 1)")


class FaultyBus:
    def __init__(self, device: PdmDevice, plan: FaultPlan):
        self.device = device
        self.plan = plan
        self.ops = 0
        self.faults = 0
        self._gen = np.random.default_rng(plan.seed)

    def _fire(self, kind: str) -> bool:
        p = self.plan
        if p.kind != kind or self.ops <= p.after_ops:
            return False
        if p.max_faults is not None and self.faults >= p.max_faults:
            return False
        if p.probability < 1.0 and self._gen.random() >= p.probability:
            return False
        self.faults += 1
        return True

    def read_register(self, addr):
        self.ops += 1
        if self._fire("read"):
            raise BusError(f"injected read fault at {addr:#x}")
        return self.device.read_register(addr)

    def write_register(self, addr, value):
        self.ops += 1
        if self._fire("write"):
            raise BusError(f"injected write fault at {addr:#x}")
        if addr == CTRL and value & CTRL_START and self._fire("stall"):
            return Ack.OK
        return self.device.write_register(addr, value)

    def program_firmware(self, image):
        self.ops += 1
        if self._fire("program"):
            return Ack.REJECTED
        return self.device.program_firmware(image)


# ------------------------------------------------------------ device session

@dataclass
class _SessionResult:
    device_id: str
    iterations: list[int]
    counts: np.ndarray
    temps: np.ndarray
    volts: np.ndarray
    outcome: DeviceOutcome
    sim_seconds: float


def operating_walk(base: OperatingPoint, n_iterations: int, gen: np.random.Generator
                   ) -> list[OperatingPoint]:
    """Bounded random walk of the operating point, one step per iteration."""
    dt = np.clip(np.cumsum(gen.normal(0.0, 0.4, n_iterations)), -TEMP_WALK_LIMIT_C, TEMP_WALK_LIMIT_C)
    dv = np.clip(np.cumsum(gen.normal(0.0, 0.002, n_iterations)), -VOLT_WALK_LIMIT_V, VOLT_WALK_LIMIT_V)
    return [OperatingPoint(base.die_temp_c + float(a), base.core_voltage_v + float(b))
            for a, b in zip(dt, dv)]


def _restore(bus, dev: PdmDevice) -> None:
    for _ in range(RESTORE_ATTEMPTS):
        if dev.busy:
            try:
                bus.write_register(CTRL, CTRL_ABORT)
            except BusError:
                pass
        if dev.busy:
            # the control unit always finishes its pass on its own
            dev.advance_ns(dev.n_ro * dev.gate_us * NS_PER_US)
        if bus.program_firmware(Firmware.APPLICATION) is Ack.OK:
            return
    raise SessionError(f"could not restore application firmware after {RESTORE_ATTEMPTS} attempts")


def _one_pass(bus, dev: PdmDevice, n_ro: int) -> tuple[list[int], float, float]:
    temp = decode_temp(bus.read_register(SENSOR_TEMP))
    vcc = decode_vcc(bus.read_register(SENSOR_VCC))
    if bus.write_register(CTRL, CTRL_START) is not Ack.OK:
        raise SessionError("start rejected")
    dev.advance_ns(n_ro * dev.gate_us * NS_PER_US)
    status = bus.read_register(STATUS)
    if not status & STATUS_DONE:
        raise SessionError("pass did not complete within its nominal duration")
    if status & STATUS_ERROR:
        log.warning("counter saturation reported during pass")
    counts = [bus.read_register(result_addr(i)) for i in range(n_ro)]
    return counts, temp, vcc


def run_device_session(device_id: str, model, base_op: OperatingPoint, config: CampaignConfig,
                       iterations: Sequence[int], seed: int,
                       fault: Optional[FaultPlan] = None) -> _SessionResult:
    dev = PdmDevice(model, op=base_op)
    bus = FaultyBus(dev, fault) if fault is not None else dev
    key = device_key(device_id)
    root = Rng(seed)
    walk = operating_walk(base_op, config.n_iterations, root.child(4, key).generator())
    n_ro = config.n_ro
    done: list[int] = []
    counts, temps, volts = [], [], []
    reason: Optional[str] = None
    retries = 0
    try:
        if bus.program_firmware(Firmware.TEST) is not Ack.OK:
            raise SessionError("test firmware programming rejected")
        if bus.write_register(CFG_GATE_TIME, config.gate_us) is not Ack.OK:
            raise SessionError("gate time write rejected")
        built = bus.read_register(CFG_N_RO)
        if built != n_ro:
            raise SessionError(f"device reports {built} ROs, campaign expects {n_ro}")
        for it in iterations:
            dev.set_operating_point(walk[it])
            last: Optional[Exception] = None
            for attempt in range(config.retry_limit + 1):
                # the same stream on every attempt: a retried pass reproduces the clean one
                dev.gen = root.child(5, key, it).generator()
                try:
                    c, t, v = _one_pass(bus, dev, n_ro)
                    break
                except (BusError, SessionError) as exc:
                    last = exc
                    if attempt < config.retry_limit:
                        retries += 1
                    if dev.busy:
                        try:
                            bus.write_register(CTRL, CTRL_ABORT)
                        except BusError:
                            pass
            else:
                raise SessionError(f"iteration {it}: retry limit exceeded ({last})")
            done.append(it)
            counts.append(c)
            temps.append(t)
            volts.append(v)
    except (BusError, SessionError) as exc:
        reason = str(exc)
    finally:
        if dev.firmware is Firmware.TEST:
            _restore(bus, dev)
    if reason is None:
        state = Outcome.COMPLETE
    elif done:
        state = Outcome.PARTIAL
    else:
        state = Outcome.FAILED
    outcome = DeviceOutcome(device_id, state, len(done), reason, dev.firmware, retries)
    if reason:
        log.warning("%s: %s after %d iterations: %s", device_id, state.value, len(done), reason)
    return _SessionResult(device_id, done,
                          np.asarray(counts, dtype=np.int64).reshape(len(done), n_ro),
                          np.asarray(temps, dtype=float), np.asarray(volts, dtype=float),
                          outcome, dev.time_ns / 1e9)


def _session_task(args):
    device_id, profiles, aging, op, cfg_params, config, iterations, seed, fault = args
    model = DeviceModel(profiles, aging, **cfg_params)
    return run_device_session(device_id, model, op, config, iterations, seed, fault)


def _frame(results: Iterable[_SessionResult], config: CampaignConfig) -> pd.DataFrame:
    n_ro = config.n_ro
    pass_s = n_ro * config.gate_time_s
    parts = []
    for r in results:
        k = len(r.iterations)
        if not k:
            continue
        its = np.repeat(np.asarray(r.iterations, dtype=np.int64), n_ro)
        ros = np.tile(np.arange(n_ro, dtype=np.int64), k)
        # nominal schedule: iteration i starts at i * pass duration
        ts = config.start_timestamp + np.floor(its * pass_s + (ros + 1) * config.gate_time_s)
        parts.append(pd.DataFrame({
            "device_id": np.full(k * n_ro, r.device_id, dtype=object),
            "ro_index": ros,
            "iteration": its,
            "count": r.counts.reshape(-1),
            "gate_time_s": np.full(k * n_ro, config.gate_us / 1e6),
            "die_temp_c": np.repeat(r.temps, n_ro),
            "core_voltage_v": np.repeat(r.volts, n_ro),
            "timestamp": ts.astype(np.int64),
        }))
    if not parts:
        return MeasurementSet().frame
    return pd.concat(parts, ignore_index=True)[MEASUREMENT_FIELDS]


def default_workers() -> int:
    return os.cpu_count() or 1


def _execute(fleet: Fleet, config: CampaignConfig, plan: dict[str, list[int]],
             faults: Optional[dict[str, FaultPlan]]) -> list[_SessionResult]:
    seed = fleet.config.seed if config.seed is None else config.seed
    cfg = fleet.config
    cfg_params = dict(temp_coeff_per_c=cfg.temp_coeff_per_c,
                      volt_coeff_per_v=cfg.volt_coeff_per_v, noise_rel=cfg.noise_rel)
    tasks = [(d.device_id, fleet.profiles[d.device_id], fleet.aging[d.device_id],
              fleet.operating_points[d.device_id], cfg_params, config, plan[d.device_id], seed,
              (faults or {}).get(d.device_id))
             for d in fleet.devices if d.device_id in plan]
    workers = config.workers or default_workers()
    if workers <= 1 or len(tasks) <= 1:
        return [_session_task(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        chunk = max(1, len(tasks) // (workers * 4))
        return list(pool.map(_session_task, tasks, chunksize=chunk))


def _write_outputs(ms: MeasurementSet, report: CampaignReport, config: CampaignConfig) -> None:
    from .ingest import save_measurements

    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_measurements(ms, out / "measurements.csv")
    (out / "campaign_report.json").write_text(report.to_json())


def run_campaign(fleet: Fleet, config: CampaignConfig = CampaignConfig(), *,
                 faults: Optional[dict[str, FaultPlan]] = None
                 ) -> tuple[MeasurementSet, CampaignReport]:
    if not fleet.devices:
        raise InvalidArgument("fleet is empty")
    plan = {d.device_id: list(range(config.n_iterations)) for d in fleet.devices}
    t0 = time.perf_counter()
    results = _execute(fleet, config, plan, faults)
    ms = MeasurementSet(_frame(results, config)).sorted()
    report = CampaignReport({r.device_id: r.outcome for r in results}, len(ms),
                            config.n_iterations, max(r.sim_seconds for r in results),
                            time.perf_counter() - t0)
    if config.output_dir:
        _write_outputs(ms, report, config)
    return ms, report


def completed_iterations(partial: MeasurementSet, n_ro: int) -> dict[str, set[int]]:
    """Iterations for which every RO of a device has a record."""
    f = partial.frame
    if not len(f):
        return {}
    sizes = f.groupby(["device_id", "iteration"], sort=True).size()
    full = sizes[sizes == n_ro]
    out: dict[str, set[int]] = {}
    for dev, it in full.index:
        out.setdefault(dev, set()).add(int(it))
    return out


def resume_campaign(partial: MeasurementSet, fleet: Fleet, config: CampaignConfig = CampaignConfig(),
                    *, faults: Optional[dict[str, FaultPlan]] = None
                    ) -> tuple[MeasurementSet, CampaignReport]:
    """Run only the (device, iteration) pairs missing from ``partial`` and merge."""
    f = partial.frame
    if len(f):
        if int(f["ro_index"].max()) >= config.n_ro:
            raise InvalidArgument(
                f"partial data has RO index {int(f['ro_index'].max())} but the campaign expects "
                f"{config.n_ro} ROs")
        per_it = f.groupby(["device_id", "iteration"])["ro_index"].nunique()
        if len(per_it) and int(per_it.max()) != config.n_ro and int(f["ro_index"].max()) + 1 != config.n_ro:
            raise InvalidArgument("partial data RO count does not match the campaign configuration")
        gates = np.unique(f["gate_time_s"].to_numpy())
        if len(gates) != 1 or round(gates[0] * 1e6) != config.gate_us:
            raise InvalidArgument("partial data gate time does not match the campaign configuration")
        unknown = set(f["device_id"].unique()) - {d.device_id for d in fleet.devices}
        if unknown:
            raise InvalidArgument(f"partial data names devices outside the fleet: {sorted(unknown)[:5]}")
        if partial.duplicated_keys().any():
            raise InvalidArgument("partial data has duplicate measurement keys")
    have = completed_iterations(partial, config.n_ro)
    plan = {}
    for d in fleet.devices:
        missing = [i for i in range(config.n_iterations) if i not in have.get(d.device_id, ())]
        if missing:
            plan[d.device_id] = missing
    # drop rows of incomplete iterations; they are re-measured in full
    if len(f):
        keep = np.fromiter(((dev in have and int(it) in have[dev])
                            for dev, it in zip(f["device_id"], f["iteration"])), bool, len(f))
        kept = MeasurementSet(f[keep])
    else:
        kept = partial
    t0 = time.perf_counter()
    results = _execute(fleet, config, plan, faults) if plan else []
    new = MeasurementSet(_frame(results, config))
    ms = MeasurementSet.concat([kept, new]).sorted()
    if ms.duplicated_keys().any():
        raise PdmError("resume produced duplicate measurement keys")
    outcomes = {}
    by_dev = {r.device_id: r for r in results}
    for d in fleet.devices:
        n_have = len(have.get(d.device_id, ()))
        if d.device_id in by_dev:
            o = by_dev[d.device_id].outcome
            total = n_have + o.iterations_done
            state = (Outcome.COMPLETE if total == config.n_iterations
                     else Outcome.PARTIAL if total else Outcome.FAILED)
            outcomes[d.device_id] = DeviceOutcome(d.device_id, state, total, o.reason,
                                                  o.final_firmware, o.retries)
        else:
            outcomes[d.device_id] = DeviceOutcome(d.device_id, Outcome.COMPLETE, n_have)
    sim = max((r.sim_seconds for r in results), default=0.0)
    report = CampaignReport(outcomes, len(ms), config.n_iterations, sim, time.perf_counter() - t0)
    if config.output_dir:
        _write_outputs(ms, report, config)
    return ms, report


def new_measurement_count(report_before: CampaignReport, report_after: CampaignReport) -> int:
    return report_after.total_measurements - report_before.total_measurements
