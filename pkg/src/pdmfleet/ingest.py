"""Interchange file formats, dose assignment and dose-rate quartiles.

CSV schemas (exact headers, in this column order):

measurements
    device_id, ro_index, iteration, count, gate_time_s, frequency_hz,
    die_temp_c, core_voltage_v, timestamp
scans
    scan_timestamp, position_m, gamma_rate, neutron_rate, unit
roster
    device_id, status, tunnel_position_m, crate_id, slot_index, deployed_since
doses
    device_id, gamma_rate_avg, neutron_rate_avg, n_scans_used, n_samples_used
quartiles
    device_id, gamma_quartile, neutron_quartile

Floats are written with 9 significant digits.
"""

from __future__ import annotations

import csv
import enum
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import pandas as pd

from .core import (
    COUNTER_MAX,
    DEFAULT_DOSE_UNIT,
    MEASUREMENT_FIELDS,
    MEASUREMENT_KEY,
    DeviceRecord,
    DeviceStatus,
    InvalidArgument,
    MeasurementSet,
    PdmError,
    RadiationScan,
)

MEASUREMENT_HEADER = ["device_id", "ro_index", "iteration", "count", "gate_time_s",
                      "frequency_hz", "die_temp_c", "core_voltage_v", "timestamp"]
SCAN_HEADER = ["scan_timestamp", "position_m", "gamma_rate", "neutron_rate", "unit"]
ROSTER_HEADER = ["device_id", "status", "tunnel_position_m", "crate_id", "slot_index",
                 "deployed_since"]
DOSE_HEADER = ["device_id", "gamma_rate_avg", "neutron_rate_avg", "n_scans_used",
               "n_samples_used"]
QUARTILE_HEADER = ["device_id", "gamma_quartile", "neutron_quartile"]

FLOAT_FORMAT = "%.9g"
FREQ_REL_TOL = 1e-6
# absolute slack on the inclusive window edge so that shifting every position
# by a constant cannot flip a boundary sample in or out through rounding
WINDOW_EPS_M = 1e-7


class FileFormatError(PdmError, ValueError):
    """A file violated its schema. ``problems`` holds (line number, message) pairs."""

    def __init__(self, path, problems: Sequence[tuple[int, str]]):
        self.path = str(path)
        self.problems = list(problems)
        shown = "; ".join(f"line {ln}: {msg}" for ln, msg in self.problems[:10])
        more = f" (+{len(self.problems) - 10} more)" if len(self.problems) > 10 else ""
        super().__init__(f"{self.path}: {shown}{more}")


class NoCoverageError(PdmError, ValueError):
    pass


class Quartile(str, enum.Enum):
    Q1 = "Q1"
    Q2 = "Q2"
    Q3 = "Q3"
    Q4 = "Q4"


@dataclass(frozen=True)
class DeviceDose:
    device_id: str
    gamma_rate_avg: float
    neutron_rate_avg: float
    n_scans_used: int
    n_samples_used: int

    def rate(self, kind: str) -> float:
        if kind == "gamma":
            return self.gamma_rate_avg
        if kind == "neutron":
            return self.neutron_rate_avg
        raise InvalidArgument(f"unknown radiation kind {kind!r}")


# ------------------------------------------------------------ dose assignment

def dose_at(position_m: float, scans: Sequence[RadiationScan], window_m: float = 5.0,
            device_id: str = "") -> DeviceDose:
    """Average per scan over samples within +-window_m, then average the scan means."""
    gammas, neutrons = [], []
    n_samples = 0
    for scan in scans:
        pos, g, n = scan.arrays()
        if pos.size == 0:
            continue
        sel = np.abs(pos - position_m) <= window_m + WINDOW_EPS_M
        k = int(sel.sum())
        if k:
            gammas.append(g[sel].mean())
            neutrons.append(n[sel].mean())
            n_samples += k
    if not gammas:
        raise NoCoverageError(
            f"{device_id or position_m}: no radiation samples within {window_m} m of "
            f"{position_m} m in any scan")
    return DeviceDose(device_id, float(np.mean(gammas)), float(np.mean(neutrons)),
                      len(gammas), n_samples)


def assign_dose(device: DeviceRecord, scans: Sequence[RadiationScan],
                window_m: float = 5.0) -> DeviceDose:
    if not device.deployed or device.tunnel_position_m is None:
        raise InvalidArgument(f"{device.device_id}: only deployed devices have a dose")
    return dose_at(device.tunnel_position_m, scans, window_m, device.device_id)


def crate_positions(devices: Iterable[DeviceRecord]) -> dict[str, float]:
    """Crate midpoint: mean tunnel position of the crate's deployed boards."""
    acc: dict[str, list[float]] = {}
    for d in devices:
        if d.deployed:
            acc.setdefault(d.crate_id or d.device_id, []).append(d.tunnel_position_m)
    return {c: float(np.mean(p)) for c, p in acc.items()}


def assign_doses(devices: Sequence[DeviceRecord], scans: Sequence[RadiationScan],
                 window_m: float = 5.0) -> list[DeviceDose]:
    """Dose for every deployed device; boards of one crate share the crate's dose."""
    mids = crate_positions(devices)
    by_crate: dict[str, DeviceDose] = {}
    out = []
    for d in devices:
        if not d.deployed:
            continue
        crate = d.crate_id or d.device_id
        if crate not in by_crate:
            by_crate[crate] = dose_at(mids[crate], scans, window_m, d.device_id)
        c = by_crate[crate]
        out.append(DeviceDose(d.device_id, c.gamma_rate_avg, c.neutron_rate_avg,
                              c.n_scans_used, c.n_samples_used))
    return out


def quartiles(doses: Sequence[DeviceDose], kind: str) -> dict[str, Quartile]:
    if len(doses) < 4:
        raise InvalidArgument(f"need at least 4 devices for quartiles, got {len(doses)}")
    ordered = sorted(doses, key=lambda d: (d.rate(kind), d.device_id))
    base, extra = divmod(len(ordered), 4)
    out: dict[str, Quartile] = {}
    start = 0
    for q, label in enumerate(Quartile):
        size = base + (1 if q < extra else 0)
        for d in ordered[start:start + size]:
            out[d.device_id] = label
        start += size
    return out


# ------------------------------------------------------------------ CSV I/O

def _fmt(x: Optional[float]) -> str:
    return "" if x is None else FLOAT_FORMAT % x


def _check_header(path, got: list[str], expected: list[str]) -> None:
    if got != expected:
        raise FileFormatError(path, [(1, f"expected header {','.join(expected)}, "
                                        f"got {','.join(got)}")])


def measurement_frame_for_output(ms: MeasurementSet) -> pd.DataFrame:
    f = ms.frame.copy()
    f.insert(5, "frequency_hz", ms.frequency_hz)
    return f[MEASUREMENT_HEADER]


def save_measurements(ms: MeasurementSet, path) -> None:
    frame = measurement_frame_for_output(ms)
    buf = io.StringIO()
    frame.to_csv(buf, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    Path(path).write_text(buf.getvalue())


_TYPED = {"device_id": str, "ro_index": np.int64, "iteration": np.int64, "count": np.int64,
          "gate_time_s": float, "frequency_hz": float, "die_temp_c": float,
          "core_voltage_v": float, "timestamp": np.int64}


def _load_measurements_typed(path) -> Optional[pd.DataFrame]:
    """Strictly typed read; None when anything looks off so the slow path can report it."""
    try:
        f = pd.read_csv(path, dtype=_TYPED, keep_default_na=False, na_filter=False)
    except (ValueError, OverflowError, pd.errors.ParserError):
        return None
    if list(f.columns) != MEASUREMENT_HEADER or not len(f):
        return None if list(f.columns) != MEASUREMENT_HEADER else f
    ints = f[["ro_index", "iteration", "count"]].to_numpy()
    gate = f["gate_time_s"].to_numpy()
    if (ints < 0).any() or (f["count"].to_numpy() > COUNTER_MAX).any() or not (gate > 0).all():
        return None
    if (f["device_id"].str.len() == 0).any() or (f["device_id"] != f["device_id"].str.strip()).any():
        return None
    expect = f["count"].to_numpy() / gate
    if not (np.abs(f["frequency_hz"].to_numpy() - expect) <= FREQ_REL_TOL * np.abs(expect)).all():
        return None
    f["device_id"] = f["device_id"].astype(object)
    return f


def load_measurements(path, *, check_duplicates: bool = True) -> MeasurementSet:
    path = Path(path)
    with open(path, newline="") as fh:
        header = next(csv.reader(fh), [])
    _check_header(path, header, MEASUREMENT_HEADER)
    fast = _load_measurements_typed(path)
    if fast is not None:
        ms = MeasurementSet(fast[MEASUREMENT_FIELDS])
        if check_duplicates:
            dup = ms.duplicated_keys().to_numpy()
            if dup.any():
                lines = np.arange(len(ms)) + 2
                raise FileFormatError(path, [(int(ln), "duplicate (device_id, ro_index, iteration)")
                                             for ln in lines[dup][:50]])
        return ms
    # slow path: per-cell diagnostics
    raw = pd.read_csv(path, dtype=str, keep_default_na=False)
    problems: list[tuple[int, str]] = []
    lines = np.arange(len(raw)) + 2
    cols = {}
    for c in MEASUREMENT_HEADER[1:]:
        col = pd.to_numeric(raw[c].str.strip(), errors="coerce")
        bad = col.isna().to_numpy()
        for ln in lines[bad][:50]:
            problems.append((int(ln), f"{c} is not a number: {raw[c].iloc[ln - 2]!r}"))
        cols[c] = col.to_numpy(dtype=float)
    if problems:
        raise FileFormatError(path, sorted(problems))
    empty_id = (raw["device_id"].str.len() == 0).to_numpy()
    for ln in lines[empty_id][:50]:
        problems.append((int(ln), "empty device_id"))
    for c in ("ro_index", "iteration", "count", "timestamp"):
        v = cols[c]
        bad = v != np.floor(v)
        if c != "timestamp":
            bad |= v < 0
        for ln in lines[bad][:50]:
            problems.append((int(ln), f"{c} must be a non-negative integer"))
    bad = cols["count"] > COUNTER_MAX
    for ln in lines[bad][:50]:
        problems.append((int(ln), "count exceeds 32-bit counter range"))
    gate = cols["gate_time_s"]
    bad = ~(gate > 0)
    for ln in lines[bad][:50]:
        problems.append((int(ln), "gate_time_s must be > 0"))
    with np.errstate(divide="ignore", invalid="ignore"):
        expect = cols["count"] / gate
        err = np.abs(cols["frequency_hz"] - expect)
        bad = ~(err <= FREQ_REL_TOL * np.abs(expect)) & (gate > 0)
    for ln in lines[bad][:50]:
        problems.append((int(ln), "frequency_hz does not equal count/gate_time_s"))
    if problems:
        raise FileFormatError(path, sorted(problems))
    frame = pd.DataFrame({
        "device_id": raw["device_id"].to_numpy(dtype=object),
        "ro_index": cols["ro_index"].astype(np.int64),
        "iteration": cols["iteration"].astype(np.int64),
        "count": cols["count"].astype(np.int64),
        "gate_time_s": gate,
        "die_temp_c": cols["die_temp_c"],
        "core_voltage_v": cols["core_voltage_v"],
        "timestamp": cols["timestamp"].astype(np.int64),
    })[MEASUREMENT_FIELDS]
    ms = MeasurementSet(frame)
    if check_duplicates:
        dup = ms.duplicated_keys().to_numpy()
        if dup.any():
            raise FileFormatError(path, [(int(ln), "duplicate (device_id, ro_index, iteration)")
                                         for ln in lines[dup][:50]])
    return ms


def save_scans(scans: Sequence[RadiationScan], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SCAN_HEADER)
        for scan in scans:
            for pos, g, n in scan.samples:
                w.writerow([scan.timestamp, _fmt(pos), _fmt(g), _fmt(n), scan.unit])


def load_scans(path) -> list[RadiationScan]:
    problems = []
    groups: dict[int, list] = {}
    units: dict[int, str] = {}
    last_pos: dict[int, float] = {}
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        _check_header(path, next(r, []), SCAN_HEADER)
        for lineno, row in enumerate(r, 2):
            if len(row) != len(SCAN_HEADER):
                problems.append((lineno, f"expected {len(SCAN_HEADER)} fields, got {len(row)}"))
                continue
            try:
                ts = int(row[0])
                pos, g, n = float(row[1]), float(row[2]), float(row[3])
            except ValueError:
                problems.append((lineno, "non-numeric field"))
                continue
            if g < 0 or n < 0:
                problems.append((lineno, "negative dose rate"))
                continue
            if ts in last_pos and not pos > last_pos[ts]:
                problems.append((lineno, f"scan {ts}: position {pos} not strictly increasing"))
                continue
            last_pos[ts] = pos
            groups.setdefault(ts, []).append((pos, g, n))
            units[ts] = row[4] or DEFAULT_DOSE_UNIT
    if problems:
        raise FileFormatError(path, problems)
    return [RadiationScan(ts, tuple(groups[ts]), units[ts]) for ts in groups]


def save_roster(devices: Sequence[DeviceRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ROSTER_HEADER)
        for d in devices:
            w.writerow([d.device_id, d.status.value, _fmt(d.tunnel_position_m), d.crate_id,
                        d.slot_index, "" if d.deployed_since is None else d.deployed_since])


def load_roster(path) -> list[DeviceRecord]:
    problems = []
    out: list[DeviceRecord] = []
    seen: set[str] = set()
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        _check_header(path, next(r, []), ROSTER_HEADER)
        for lineno, row in enumerate(r, 2):
            if len(row) != len(ROSTER_HEADER):
                problems.append((lineno, f"expected {len(ROSTER_HEADER)} fields, got {len(row)}"))
                continue
            try:
                rec = DeviceRecord(row[0], DeviceStatus(row[1]),
                                   float(row[2]) if row[2] else None, row[3], int(row[4]),
                                   int(row[5]) if row[5] else None)
            except ValueError as exc:
                problems.append((lineno, str(exc)))
                continue
            if rec.device_id in seen:
                problems.append((lineno, f"duplicate device_id {rec.device_id}"))
                continue
            seen.add(rec.device_id)
            out.append(rec)
    if problems:
        raise FileFormatError(path, problems)
    return out


def save_doses(doses: Sequence[DeviceDose], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DOSE_HEADER)
        for d in doses:
            w.writerow([d.device_id, _fmt(d.gamma_rate_avg), _fmt(d.neutron_rate_avg),
                        d.n_scans_used, d.n_samples_used])


def load_doses(path) -> list[DeviceDose]:
    problems, out = [], []
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        _check_header(path, next(r, []), DOSE_HEADER)
        for lineno, row in enumerate(r, 2):
            try:
                d = DeviceDose(row[0], float(row[1]), float(row[2]), int(row[3]), int(row[4]))
            except (ValueError, IndexError):
                problems.append((lineno, "malformed dose row"))
                continue
            if d.gamma_rate_avg < 0 or d.neutron_rate_avg < 0 or d.n_samples_used < 1:
                problems.append((lineno, "dose averages must be >= 0 with >= 1 sample"))
                continue
            out.append(d)
    if problems:
        raise FileFormatError(path, problems)
    return out


def save_quartiles(gamma: dict[str, Quartile], neutron: dict[str, Quartile], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(QUARTILE_HEADER)
        for dev in sorted(gamma):
            w.writerow([dev, gamma[dev].value, neutron[dev].value])


def load_quartiles(path) -> tuple[dict[str, Quartile], dict[str, Quartile]]:
    """Read quartiles.csv into (gamma, neutron) assignments."""
    problems = []
    gamma: dict[str, Quartile] = {}
    neutron: dict[str, Quartile] = {}
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        _check_header(path, next(r, []), QUARTILE_HEADER)
        for lineno, row in enumerate(r, 2):
            try:
                dev, g, n = row
                gq, nq = Quartile(g), Quartile(n)
            except ValueError:
                problems.append((lineno, "malformed quartile row"))
                continue
            if dev in gamma:
                problems.append((lineno, f"duplicate device_id {dev}"))
                continue
            gamma[dev], neutron[dev] = gq, nq
    if problems:
        raise FileFormatError(path, problems)
    return gamma, neutron
