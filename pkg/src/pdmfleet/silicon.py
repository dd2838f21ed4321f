"""Synthetic silicon: ring-oscillator delay oracle and fleet generator.

The oracle is the ground truth the rest of the toolkit measures. Per-stage
delay of an RO is

    (base_delay + routing_offset) * (1 + aging) * (1 + kT (T - 50 C))
        * (1 + kV (1.0 V - V)) * (1 + eps)

and its frequency follows 1 / (2 n t_p).  Aging grows with sqrt(service
years) and linearly with the device's average gamma and neutron dose rates.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import (
    DEFAULT_DOSE_UNIT,
    DeviceRecord,
    DeviceStatus,
    InvalidArgument,
    RadiationScan,
    Rng,
    stratified_normal,
    synth_device_id,
)

REF_TEMP_C = 50.0
REF_VOLTAGE_V = 1.0
NOISE_TRUNCATION_SIGMA = 5.0
DEPLOYED_SINCE = 1483228800  # 2017-01-01T00:00:00Z


@dataclass(frozen=True)
class RoProfile:
    ro_index: int
    base_delay_s: float
    routing_offset_s: float
    n_stages: int = 5

    def __post_init__(self):
        _check_stages(self.n_stages)
        if not self.base_delay_s > 0:
            raise InvalidArgument("base delay must be positive")
        if self.routing_offset_s < 0:
            raise InvalidArgument("routing offset must be non-negative")

    @property
    def nominal_delay_s(self) -> float:
        return self.base_delay_s + self.routing_offset_s


@dataclass(frozen=True)
class AgingState:
    aging_fraction: float = 0.0
    gamma_rate_avg: float = 0.0
    neutron_rate_avg: float = 0.0
    service_years: float = 0.0

    def __post_init__(self):
        if self.aging_fraction < 0 or self.service_years < 0:
            raise InvalidArgument("aging fraction and service years must be >= 0")
        if self.service_years == 0 and self.aging_fraction != 0:
            raise InvalidArgument("a device with zero service time cannot be aged")


@dataclass(frozen=True)
class OperatingPoint:
    die_temp_c: float = REF_TEMP_C
    core_voltage_v: float = REF_VOLTAGE_V

    def __post_init__(self):
        if not -40.0 <= self.die_temp_c <= 125.0:
            raise InvalidArgument(f"die temperature {self.die_temp_c} C outside [-40, 125]")
        if not 0.85 <= self.core_voltage_v <= 1.15:
            raise InvalidArgument(f"core voltage {self.core_voltage_v} V outside [0.85, 1.15]")


@dataclass(frozen=True)
class AgingCoefficients:
    k_time: float = 0.003
    k_gamma: float = 2.4
    k_neutron: float = 3.3


@dataclass(frozen=True)
class FleetConfig:
    n_deployed: int = 298
    n_unused: int = 7
    n_ro: int = 100
    n_stages: int = 5
    mean_fresh_freq_hz: float = 330e6
    # log-normal sigma of the per-device delay factor
    device_spread_rel: float = 0.02
    # per-location routing offsets span [0, location_spread_rel] * reference delay
    location_spread_rel: float = 0.2
    # per-RO within-die variation (log-normal sigma)
    intra_die_rel: float = 0.003
    noise_rel: float = 0.001
    k_time: float = 0.003
    k_gamma: float = 2.4
    k_neutron: float = 3.3
    service_years: float = 7.0
    temp_coeff_per_c: float = 0.0008
    volt_coeff_per_v: float = 0.5
    slots_per_crate: int = 6
    tunnel_length_m: float = 1700.0
    n_scans: int = 12
    scan_step_m: float = 1.0
    seed: int = 2024

    def __post_init__(self):
        for name in ("n_deployed", "n_ro", "slots_per_crate", "n_scans"):
            if getattr(self, name) <= 0:
                raise InvalidArgument(f"{name} must be > 0")
        if self.n_unused < 0:
            raise InvalidArgument("n_unused must be >= 0")
        _check_stages(self.n_stages)
        for name in ("device_spread_rel", "location_spread_rel", "intra_die_rel", "noise_rel",
                     "k_time", "k_gamma", "k_neutron", "service_years"):
            if getattr(self, name) < 0:
                raise InvalidArgument(f"{name} must be >= 0")
        if not self.mean_fresh_freq_hz > 0:
            raise InvalidArgument("mean_fresh_freq_hz must be > 0")

    @property
    def coefficients(self) -> AgingCoefficients:
        return AgingCoefficients(self.k_time, self.k_gamma, self.k_neutron)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)!r}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str) -> "FleetConfig":
        """Parse ``key = value`` lines; ``#`` starts a comment, unknown keys are rejected."""
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InvalidArgument(f"line {lineno}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise InvalidArgument(f"line {lineno}: unknown key {key!r}")
            try:
                values[key] = int(value) if types[key] == "int" else float(value)
            except ValueError:
                raise InvalidArgument(f"line {lineno}: bad value for {key}: {value!r}") from None
        return cls(**values)

    @classmethod
    def load(cls, path) -> "FleetConfig":
        return cls.from_text(Path(path).read_text())


def _check_stages(n_stages: int) -> None:
    if n_stages < 3 or n_stages % 2 == 0:
        raise InvalidArgument(f"RO stage count must be odd and >= 3, got {n_stages}")


def ro_frequency(n_stages: int, t_p: float) -> float:
    _check_stages(n_stages)
    if not t_p > 0:
        raise InvalidArgument("propagation delay must be positive")
    return 1.0 / (2 * n_stages * t_p)


def aging_fraction(gamma_rate: float, neutron_rate: float, service_years: float,
                   coeffs: AgingCoefficients = AgingCoefficients()) -> float:
    if gamma_rate < 0 or neutron_rate < 0 or service_years < 0:
        raise InvalidArgument("dose rates and service time must be non-negative")
    return (coeffs.k_time * math.sqrt(service_years)
            * (1.0 + coeffs.k_gamma * gamma_rate + coeffs.k_neutron * neutron_rate))


def draw_noise(gen: Optional[np.random.Generator], noise_rel: float) -> float:
    if gen is None or noise_rel == 0:
        return 0.0
    z = gen.standard_normal()
    while abs(z) > NOISE_TRUNCATION_SIGMA:
        z = gen.standard_normal()
    return noise_rel * z


def _modulated(nominal: float, aging: float, op: OperatingPoint, temp_coeff: float,
               volt_coeff: float, eps: float) -> float:
    return (nominal * (1.0 + aging)
            * (1.0 + temp_coeff * (op.die_temp_c - REF_TEMP_C))
            * (1.0 + volt_coeff * (REF_VOLTAGE_V - op.core_voltage_v))
            * (1.0 + eps))


def effective_delay(profile: RoProfile, aging: AgingState, op: OperatingPoint,
                    rng: Optional[np.random.Generator] = None, *,
                    temp_coeff_per_c: float = FleetConfig.temp_coeff_per_c,
                    volt_coeff_per_v: float = FleetConfig.volt_coeff_per_v,
                    noise_rel: float = FleetConfig.noise_rel) -> float:
    eps = draw_noise(rng, noise_rel)
    return _modulated(profile.nominal_delay_s, aging.aging_fraction, op,
                      temp_coeff_per_c, volt_coeff_per_v, eps)


class DeviceModel:
    """Per-device oracle: frequency of each RO at an operating point."""

    def __init__(self, profiles: Sequence[RoProfile], aging: AgingState, *,
                 temp_coeff_per_c: float = FleetConfig.temp_coeff_per_c,
                 volt_coeff_per_v: float = FleetConfig.volt_coeff_per_v,
                 noise_rel: float = FleetConfig.noise_rel):
        self.profiles = list(profiles)
        self.aging = aging
        self.temp_coeff = temp_coeff_per_c
        self.volt_coeff = volt_coeff_per_v
        self.noise_rel = noise_rel
        self._nominal = [p.nominal_delay_s for p in self.profiles]
        self._two_n = [2 * p.n_stages for p in self.profiles]

    @property
    def n_ro(self) -> int:
        return len(self.profiles)

    def frequency(self, ro_index: int, op: OperatingPoint,
                  gen: Optional[np.random.Generator] = None) -> float:
        eps = draw_noise(gen, self.noise_rel)
        t_p = _modulated(self._nominal[ro_index], self.aging.aging_fraction, op,
                         self.temp_coeff, self.volt_coeff, eps)
        return 1.0 / (self._two_n[ro_index] * t_p)


class ConstantOscillators:
    """Oracle stand-in returning fixed frequencies; used for counter checks."""

    def __init__(self, frequencies: Sequence[float]):
        self.frequencies = list(frequencies)

    @property
    def n_ro(self) -> int:
        return len(self.frequencies)

    def frequency(self, ro_index, op, gen=None):
        return self.frequencies[ro_index]


@dataclass
class Fleet:
    devices: list[DeviceRecord]
    profiles: dict[str, list[RoProfile]]
    aging: dict[str, AgingState]
    operating_points: dict[str, OperatingPoint]
    config: FleetConfig = field(default_factory=FleetConfig)

    def device(self, device_id: str) -> DeviceRecord:
        for d in self.devices:
            if d.device_id == device_id:
                return d
        raise KeyError(device_id)

    def model(self, device_id: str, *, noise_rel: Optional[float] = None) -> DeviceModel:
        cfg = self.config
        return DeviceModel(self.profiles[device_id], self.aging[device_id],
                           temp_coeff_per_c=cfg.temp_coeff_per_c,
                           volt_coeff_per_v=cfg.volt_coeff_per_v,
                           noise_rel=cfg.noise_rel if noise_rel is None else noise_rel)

    def subset(self, device_ids: Sequence[str]) -> "Fleet":
        keep = set(device_ids)
        return Fleet([d for d in self.devices if d.device_id in keep],
                     {k: v for k, v in self.profiles.items() if k in keep},
                     {k: v for k, v in self.aging.items() if k in keep},
                     {k: v for k, v in self.operating_points.items() if k in keep},
                     self.config)

    def fresh_frequencies(self, device_id: str) -> np.ndarray:
        """Noise-free frequencies at the reference operating point, ignoring aging."""
        return np.array([ro_frequency(p.n_stages, p.nominal_delay_s)
                         for p in self.profiles[device_id]])

    def nominal_frequencies(self, device_id: str) -> np.ndarray:
        """Noise-free frequencies at the device's own operating point, with aging."""
        m = self.model(device_id, noise_rel=0.0)
        op = self.operating_points[device_id]
        return np.array([m.frequency(i, op) for i in range(m.n_ro)])


def _smooth_field(gen: np.random.Generator, x: np.ndarray, n_bumps: int = 30) -> np.ndarray:
    centers = gen.uniform(x[0], x[-1], n_bumps)
    widths = gen.uniform(15.0, 120.0, n_bumps)
    heights = gen.standard_normal(n_bumps)
    f = (heights[:, None] * np.exp(-0.5 * ((x[None, :] - centers[:, None]) / widths[:, None]) ** 2)).sum(0)
    # rank-gaussianize so the marginal distribution does not depend on the seed
    ranks = np.argsort(np.argsort(f, kind="stable"), kind="stable")
    return stratified_normal(f.size)[ranks]


def synth_radiation_scans(config: FleetConfig = FleetConfig(), *,
                          start_timestamp: int = 1672531200,
                          gamma_median: float = 1.0, neutron_median: float = 0.5,
                          log_sigma: float = 0.6, clip_sigma: float = 1.6,
                          gamma_neutron_corr: float = 0.9,
                          unit: str = DEFAULT_DOSE_UNIT) -> list[RadiationScan]:
    """Weekly robot passes over a static, spatially smooth dose-rate landscape."""
    gen = Rng(config.seed).child(1).generator()
    x = np.arange(0.0, config.tunnel_length_m + config.scan_step_m / 2, config.scan_step_m)
    base_g = _smooth_field(gen, x)
    indep = _smooth_field(gen, x)
    rho = gamma_neutron_corr
    base_n = rho * base_g + math.sqrt(1 - rho * rho) * indep
    log_g = np.log(gamma_median) + log_sigma * np.clip(base_g, -clip_sigma, clip_sigma)
    log_n = np.log(neutron_median) + log_sigma * np.clip(base_n, -clip_sigma, clip_sigma)
    scans = []
    week = 7 * 24 * 3600
    for s in range(config.n_scans):
        g_scale = math.exp(0.05 * gen.standard_normal())
        n_scale = math.exp(0.05 * gen.standard_normal())
        g = np.exp(log_g + 0.1 * gen.standard_normal(x.size)) * g_scale
        n = np.exp(log_n + 0.1 * gen.standard_normal(x.size)) * n_scale
        samples = tuple(zip(x.tolist(), g.tolist(), n.tolist()))
        scans.append(RadiationScan(start_timestamp + s * week, samples, unit))
    return scans


def generate_fleet(config: FleetConfig = FleetConfig(),
                   radiation: Sequence[RadiationScan] = (), *,
                   window_m: float = 5.0) -> Fleet:
    from .ingest import assign_dose

    root = Rng(config.seed)
    gen = root.child(2).generator()
    n_ro, n_stages = config.n_ro, config.n_stages

    # shared routing pattern: dense towards slow locations, sparse fast tail
    u = config.location_spread_rel * np.sqrt(gen.uniform(size=n_ro))
    z_dep = gen.permutation(stratified_normal(config.n_deployed))
    z_unused = gen.permutation(stratified_normal(config.n_unused)) if config.n_unused else np.empty(0)

    sigma = config.device_spread_rel
    t_ref = (np.mean(np.exp(-sigma * z_dep)) * np.mean(1.0 / (1.0 + u))
             / (2 * n_stages * config.mean_fresh_freq_hz))

    lo, hi = 0.0, config.tunnel_length_m
    positions_all = [p for scan in radiation for p in scan.arrays()[0]]
    if positions_all:
        lo, hi = float(min(positions_all)), float(max(positions_all))
    margin = min(window_m, (hi - lo) / 4)
    n_crates = math.ceil(config.n_deployed / config.slots_per_crate)
    spacing = (hi - lo - 2 * margin) / n_crates
    crate_pos = lo + margin + spacing * (np.arange(n_crates) + 0.5)
    crate_pos = crate_pos + gen.uniform(-0.25, 0.25, n_crates) * spacing
    crate_pos = np.round(crate_pos, 1)

    devices: list[DeviceRecord] = []
    for k in range(config.n_deployed):
        c, slot = divmod(k, config.slots_per_crate)
        crate_id = f"C{c + 1:03d}"
        devices.append(DeviceRecord(synth_device_id(crate_id, slot + 1), DeviceStatus.DEPLOYED,
                                    float(crate_pos[c]), crate_id, slot + 1, DEPLOYED_SINCE))
    for k in range(config.n_unused):
        devices.append(DeviceRecord(synth_device_id("SPARE", k + 1), DeviceStatus.UNUSED,
                                    None, "SPARE", k + 1, None))

    profiles, aging, ops = {}, {}, {}
    dose_cache: dict[float, tuple[float, float]] = {}
    for k, dev in enumerate(devices):
        z = z_dep[k] if dev.deployed else z_unused[k - config.n_deployed]
        dgen = root.child(3, k).generator()
        t_dev = t_ref * math.exp(sigma * z)
        intra = np.exp(config.intra_die_rel * dgen.standard_normal(n_ro))
        profiles[dev.device_id] = [
            RoProfile(i, float(t_dev * intra[i]), float(t_ref * u[i]), n_stages)
            for i in range(n_ro)]
        if dev.deployed:
            pos = dev.tunnel_position_m
            if pos not in dose_cache:
                if radiation:
                    dd = assign_dose(dev, radiation, window_m)
                    dose_cache[pos] = (dd.gamma_rate_avg, dd.neutron_rate_avg)
                else:
                    dose_cache[pos] = (0.0, 0.0)
            g, n = dose_cache[pos]
            years = config.service_years
            aging[dev.device_id] = AgingState(aging_fraction(g, n, years, config.coefficients),
                                              g, n, years)
        else:
            aging[dev.device_id] = AgingState()
        temp = 47.0 + 0.8 * dev.slot_index + 1.5 * dgen.standard_normal()
        volt = 1.0 + 0.005 * dgen.standard_normal()
        ops[dev.device_id] = OperatingPoint(round(float(np.clip(temp, 20, 85)), 2),
                                            round(float(np.clip(volt, 0.95, 1.05)), 3))
    return Fleet(devices, profiles, aging, ops, config)


# ---------------------------------------------------------------- persistence

PROFILE_HEADER = ["device_id", "ro_index", "base_delay_s", "routing_offset_s", "n_stages"]
TRUTH_HEADER = ["device_id", "aging_fraction", "gamma_rate_avg", "neutron_rate_avg",
                "service_years", "die_temp_c", "core_voltage_v"]


def _g(x: float, digits: int = 17) -> str:
    return format(x, f".{digits}g")


def save_fleet(fleet: Fleet, directory) -> dict[str, Path]:
    """Write roster.csv, profiles.csv, truth.csv and fleet.cfg into ``directory``."""
    from .ingest import save_roster

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = {"roster": d / "roster.csv", "profiles": d / "profiles.csv",
             "truth": d / "truth.csv", "config": d / "fleet.cfg"}
    save_roster(fleet.devices, paths["roster"])
    with open(paths["profiles"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PROFILE_HEADER)
        for dev in fleet.devices:
            for p in fleet.profiles[dev.device_id]:
                w.writerow([dev.device_id, p.ro_index, _g(p.base_delay_s),
                            _g(p.routing_offset_s), p.n_stages])
    with open(paths["truth"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRUTH_HEADER)
        for dev in fleet.devices:
            a, op = fleet.aging[dev.device_id], fleet.operating_points[dev.device_id]
            w.writerow([dev.device_id, _g(a.aging_fraction), _g(a.gamma_rate_avg),
                        _g(a.neutron_rate_avg), _g(a.service_years),
                        _g(op.die_temp_c), _g(op.core_voltage_v)])
    paths["config"].write_text(fleet.config.to_text())
    return paths


def load_fleet(directory) -> Fleet:
    from .ingest import load_roster

    d = Path(directory)
    config = FleetConfig.load(d / "fleet.cfg")
    devices = load_roster(d / "roster.csv")
    profiles: dict[str, list[RoProfile]] = {dev.device_id: [] for dev in devices}
    with open(d / "profiles.csv", newline="") as fh:
        r = csv.reader(fh)
        if next(r) != PROFILE_HEADER:
            raise InvalidArgument("profiles.csv: unexpected header")
        for row in r:
            profiles[row[0]].append(RoProfile(int(row[1]), float(row[2]), float(row[3]), int(row[4])))
    aging, ops = {}, {}
    with open(d / "truth.csv", newline="") as fh:
        r = csv.reader(fh)
        if next(r) != TRUTH_HEADER:
            raise InvalidArgument("truth.csv: unexpected header")
        for row in r:
            aging[row[0]] = AgingState(*(float(v) for v in row[1:5]))
            ops[row[0]] = OperatingPoint(float(row[5]), float(row[6]))
    return Fleet(devices, profiles, aging, ops, config)


def with_overrides(config: FleetConfig, **overrides) -> FleetConfig:
    return replace(config, **overrides)
