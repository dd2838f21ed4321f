"""Shared domain types, identifiers and deterministic randomness."""

from __future__ import annotations

import enum
import hashlib
import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np
import pandas as pd

COUNTER_MAX = 2**32 - 1
DEFAULT_DOSE_UNIT = "a.u./h"


class PdmError(Exception):
    """Base class for toolkit errors."""


class InvalidArgument(PdmError, ValueError):
    pass


class DeviceStatus(str, enum.Enum):
    DEPLOYED = "Deployed"
    UNUSED = "Unused"


@dataclass(frozen=True)
class DeviceRecord:
    device_id: str
    status: DeviceStatus
    tunnel_position_m: Optional[float] = None
    crate_id: str = ""
    slot_index: int = 0
    deployed_since: Optional[int] = None

    def __post_init__(self):
        if self.slot_index < 0:
            raise InvalidArgument(f"{self.device_id}: negative slot index")
        if self.status is DeviceStatus.UNUSED:
            if self.tunnel_position_m is not None or self.deployed_since is not None:
                raise InvalidArgument(
                    f"{self.device_id}: unused devices carry no position or deployment date")
        elif self.tunnel_position_m is None:
            raise InvalidArgument(f"{self.device_id}: deployed device without tunnel position")

    @property
    def deployed(self) -> bool:
        return self.status is DeviceStatus.DEPLOYED


@dataclass(frozen=True)
class RoMeasurement:
    device_id: str
    ro_index: int
    iteration: int
    count: int
    gate_time_s: float
    die_temp_c: float
    core_voltage_v: float
    timestamp: int

    def __post_init__(self):
        if not 0 <= self.count <= COUNTER_MAX:
            raise InvalidArgument(f"count {self.count} outside 32-bit counter range")
        if not self.gate_time_s > 0:
            raise InvalidArgument("gate time must be positive")

    @property
    def frequency_hz(self) -> float:
        return frequency_from_count(self.count, self.gate_time_s)

    @property
    def key(self) -> tuple[str, int, int]:
        return (self.device_id, self.ro_index, self.iteration)


@dataclass(frozen=True)
class RadiationScan:
    """One robot pass: (position_m, gamma_rate, neutron_rate) samples ordered by position."""

    timestamp: int
    samples: tuple[tuple[float, float, float], ...]
    unit: str = DEFAULT_DOSE_UNIT

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(tuple(map(float, s)) for s in self.samples))
        prev = -math.inf
        for pos, gamma, neutron in self.samples:
            if not pos > prev:
                raise InvalidArgument(
                    f"scan {self.timestamp}: positions must be strictly increasing (at {pos} m)")
            if gamma < 0 or neutron < 0:
                raise InvalidArgument(f"scan {self.timestamp}: negative dose rate at {pos} m")
            prev = pos

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        if not self.samples:
            empty = np.empty(0)
            return empty, empty, empty
        a = np.asarray(self.samples, dtype=float)
        return a[:, 0], a[:, 1], a[:, 2]


def frequency_from_count(count: int, gate_time_s: float) -> float:
    if not gate_time_s > 0:
        raise InvalidArgument(f"gate time must be positive, got {gate_time_s}")
    return count / gate_time_s


def device_key(device_id: str) -> int:
    """Stable 64-bit integer derived from a device id, used to key random streams."""
    digest = hashlib.blake2b(device_id.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def synth_device_id(crate_id: str, slot_index: int) -> str:
    return f"{crate_id}:{slot_index}"


@dataclass(frozen=True)
class Rng:
    """Seeded PCG64 stream. ``child`` derives independent, order-free substreams."""

    seed: int
    path: tuple[int, ...] = field(default=())

    def __post_init__(self):
        if not 0 <= self.seed < 2**64:
            raise InvalidArgument("seed must fit in 64 unsigned bits")

    def child(self, *keys: int) -> "Rng":
        return Rng(self.seed, self.path + tuple(int(k) % 2**64 for k in keys))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        return np.random.Generator(np.random.PCG64(ss))


def stratified_normal(n: int) -> np.ndarray:
    """Normal quantiles at the n mid-probabilities (i + 0.5) / n."""
    from scipy.special import ndtri

    return ndtri((np.arange(n) + 0.5) / n)


MEASUREMENT_KEY = ["device_id", "ro_index", "iteration"]
MEASUREMENT_FIELDS = ["device_id", "ro_index", "iteration", "count", "gate_time_s",
                      "die_temp_c", "core_voltage_v", "timestamp"]
_INT_FIELDS = ("ro_index", "iteration", "count", "timestamp")


class MeasurementSet:
    """Column-oriented collection of RoMeasurement records.

    A campaign over the default fleet yields ~3M records, so records are held
    as a DataFrame and materialized as RoMeasurement objects only on iteration.
    """

    def __init__(self, frame: Optional[pd.DataFrame] = None):
        if frame is None:
            frame = pd.DataFrame({c: pd.Series(dtype=object if c == "device_id" else
                                               ("int64" if c in _INT_FIELDS else "float64"))
                                  for c in MEASUREMENT_FIELDS})
        missing = [c for c in MEASUREMENT_FIELDS if c not in frame.columns]
        if missing:
            raise InvalidArgument(f"measurement frame lacks columns {missing}")
        self.frame = frame[MEASUREMENT_FIELDS].reset_index(drop=True)

    @classmethod
    def from_records(cls, records: Iterable[RoMeasurement]) -> "MeasurementSet":
        rows = [(r.device_id, r.ro_index, r.iteration, r.count, r.gate_time_s,
                 r.die_temp_c, r.core_voltage_v, r.timestamp) for r in records]
        if not rows:
            return cls()
        frame = pd.DataFrame(rows, columns=MEASUREMENT_FIELDS)
        return cls(frame.astype({c: "int64" for c in _INT_FIELDS}))

    @classmethod
    def concat(cls, parts: Sequence["MeasurementSet"]) -> "MeasurementSet":
        frames = [p.frame for p in parts if len(p)]
        if not frames:
            return cls()
        return cls(pd.concat(frames, ignore_index=True))

    def __len__(self) -> int:
        return len(self.frame)

    def __iter__(self) -> Iterator[RoMeasurement]:
        for row in self.frame.itertuples(index=False, name=None):
            yield RoMeasurement(row[0], int(row[1]), int(row[2]), int(row[3]), float(row[4]),
                                float(row[5]), float(row[6]), int(row[7]))

    def __eq__(self, other) -> bool:
        if not isinstance(other, MeasurementSet):
            return NotImplemented
        return (len(self) == len(other)
                and self.frame.reset_index(drop=True).equals(other.frame.reset_index(drop=True)))

    @property
    def frequency_hz(self) -> np.ndarray:
        return self.frame["count"].to_numpy(dtype=float) / self.frame["gate_time_s"].to_numpy()

    @property
    def device_ids(self) -> list[str]:
        return sorted(self.frame["device_id"].unique())

    def sorted(self) -> "MeasurementSet":
        order = ["device_id", "iteration", "ro_index"]
        return MeasurementSet(self.frame.sort_values(order, kind="mergesort"))

    def select_devices(self, device_ids: Iterable[str]) -> "MeasurementSet":
        mask = self.frame["device_id"].isin(set(device_ids))
        return MeasurementSet(self.frame[mask.to_numpy()])

    def duplicated_keys(self) -> pd.Series:
        return self.frame.duplicated(subset=MEASUREMENT_KEY, keep="first")
