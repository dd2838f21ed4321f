"""Rank statistics, the Brunner-Munzel test, distribution summaries and relative degradation."""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass
from typing import Iterable, Optional, Union

import numpy as np
import pandas as pd

from .core import InvalidArgument, MeasurementSet, PdmError

log = logging.getLogger(__name__)

BETA_EPS = 1e-15
BETA_MAXITER = 200_000
MIN_SAMPLES = 10
KDE_POINTS = 512
KDE_EXACT_LIMIT = 20_000
KDE_GRID = 16_384


class DegenerateSampleError(PdmError, ValueError):
    pass


# ------------------------------------------------------------------ ranks

def _as_finite(values, name: str = "values") -> np.ndarray:
    v = np.asarray(values, dtype=float).ravel()
    if v.size == 0:
        raise InvalidArgument(f"{name} must be non-empty")
    if np.isnan(v).any():
        raise InvalidArgument(f"{name} contain NaN")
    return v


def midranks(values) -> np.ndarray:
    """1-based ranks; tied values share the mean of the positions they cover."""
    v = _as_finite(values)
    order = np.argsort(v, kind="mergesort")
    s = v[order]
    n = len(s)
    starts = np.flatnonzero(np.r_[True, s[1:] != s[:-1]])
    ends = np.r_[starts[1:], n]
    avg = (starts + ends + 1) / 2.0
    ranks = np.empty(n)
    ranks[order] = np.repeat(avg, ends - starts)
    return ranks


# ------------------------------------------------------- t distribution

def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for I_x(a, b) (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, BETA_MAXITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < BETA_EPS:
            return h
    raise PdmError(f"incomplete beta did not converge (a={a}, b={b}, x={x})")


_STIRLING = (1 / 12, -1 / 360, 1 / 1260, -1 / 1680, 1 / 1188, -691 / 360360, 1 / 156)
_HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)


def _lgamma_corr(x: float) -> float:
    """lgamma(x) - ((x - 0.5) log x - x + log(2 pi) / 2), for x >= 10."""
    inv2 = 1.0 / (x * x)
    acc = 0.0
    for c in reversed(_STIRLING):
        acc = acc * inv2 + c
    return acc / x


def _log_beta(a: float, b: float) -> float:
    """log B(a, b) without the cancellation of lgamma differences at large arguments."""
    small, big = min(a, b), max(a, b)
    if big < 10:
        return math.lgamma(a) + math.lgamma(b) - math.lgamma(a + b)
    h = small / big
    if small < 10:
        # lgamma(big) - lgamma(big + small) by the Stirling difference
        diff = (-(big - 0.5) * math.log1p(h) - small * math.log(big + small) + small
                + _lgamma_corr(big) - _lgamma_corr(big + small))
        return math.lgamma(small) + diff
    corr = _lgamma_corr(small) + _lgamma_corr(big) - _lgamma_corr(small + big)
    return (_HALF_LOG_2PI - 0.5 * math.log(big) + corr
            - (small - 0.5) * math.log1p(1.0 / h) - big * math.log1p(h))


def betainc(a: float, b: float, x: float, y: Optional[float] = None) -> float:
    """Regularized incomplete beta I_x(a, b); ``y`` = 1 - x when known more precisely."""
    if a <= 0 or b <= 0:
        raise InvalidArgument("a and b must be positive")
    if y is None:
        y = 1.0 - x
    if not 0.0 <= x <= 1.0:
        raise InvalidArgument("x must lie in [0, 1]")
    if x == 0.0:
        return 0.0
    if y == 0.0:
        return 1.0
    log_x = math.log1p(-y) if y < 0.5 else math.log(x)
    log_y = math.log1p(-x) if x < 0.5 else math.log(y)
    log_front = a * log_x + b * log_y - _log_beta(a, b)
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(log_front) * _betacf(a, b, x) / a
    return 1.0 - math.exp(log_front) * _betacf(b, a, y) / b


def t_sf(t: float, df: float) -> float:
    """Survival function of Student's t: P(T > t)."""
    if not df > 0:
        raise InvalidArgument("df must be positive")
    if math.isnan(t):
        raise InvalidArgument("t is NaN")
    if t == 0:
        return 0.5
    if math.isinf(t):
        return 0.0 if t > 0 else 1.0
    t2 = t * t
    # P(|T| > |t|) = I_{df/(df+t^2)}(df/2, 1/2)
    tail = 0.5 * betainc(df / 2.0, 0.5, df / (df + t2), t2 / (df + t2))
    return tail if t > 0 else 1.0 - tail


# ------------------------------------------------------- Brunner-Munzel

class Alternative(str, enum.Enum):
    GROUP_TWO_GREATER = "GroupTwoGreater"
    TWO_SIDED = "TwoSided"


@dataclass(frozen=True)
class BmTestResult:
    statistic_B: float
    df: float
    p_value: float
    alternative: Alternative
    n1: int
    n2: int
    mean_midrank_1: float
    mean_midrank_2: float
    var1: float
    var2: float
    low_sample_size: bool = False
    separated: bool = False

    @property
    def direction(self) -> str:
        if self.mean_midrank_2 > self.mean_midrank_1:
            return "group2 greater"
        if self.mean_midrank_2 < self.mean_midrank_1:
            return "group1 greater"
        return "equal"

    def to_dict(self) -> dict:
        return {"statistic_B": self.statistic_B, "df": self.df, "p_value": self.p_value,
                "alternative": self.alternative.value, "n1": self.n1, "n2": self.n2,
                "mean_midrank_1": self.mean_midrank_1, "mean_midrank_2": self.mean_midrank_2,
                "var1": self.var1, "var2": self.var2, "direction": self.direction,
                "low_sample_size": self.low_sample_size, "separated": self.separated}


def brunner_munzel(x, y, alternative: Union[Alternative, str] = Alternative.GROUP_TWO_GREATER
                   ) -> BmTestResult:
    """Brunner-Munzel test of group 1 (``x``) against group 2 (``y``).

    B = (R2 - R1) / ((n1 + n2) * sqrt(s1/n1 + s2/n2)) with R_i the mean pooled
    midrank of group i and s_i = S_i^2 / (N - n_i)^2, where
    S_i^2 = sum_k (R_ik - W_ik - R_i + (n_i + 1)/2)^2 / (n_i - 1) and W_ik the
    within-group midranks. Degrees of freedom (Welch-type):
    df = (n1 S1^2 + n2 S2^2)^2 / ((n1 S1^2)^2/(n1 - 1) + (n2 S2^2)^2/(n2 - 1)).
    """
    alternative = Alternative(alternative)
    a = _as_finite(x, "x")
    b = _as_finite(y, "y")
    n1, n2 = len(a), len(b)
    if n1 < 2 or n2 < 2:
        raise InvalidArgument("each group needs at least 2 samples")
    n = n1 + n2
    pooled = midranks(np.concatenate([a, b]))
    r1, r2 = pooled[:n1], pooled[n1:]
    m1, m2 = r1.mean(), r2.mean()
    s1 = np.sum((r1 - midranks(a) - m1 + (n1 + 1) / 2.0) ** 2) / (n1 - 1)
    s2 = np.sum((r2 - midranks(b) - m2 + (n2 + 1) / 2.0) ** 2) / (n2 - 1)
    var1 = s1 / (n - n1) ** 2
    var2 = s2 / (n - n2) ** 2
    low = n1 < MIN_SAMPLES or n2 < MIN_SAMPLES
    if s1 == 0 and s2 == 0:
        if m1 == m2:
            raise DegenerateSampleError("all pooled values are tied")
        # complete separation: the variance estimate vanishes
        stat = math.copysign(math.inf, m2 - m1)
        p = (0.0 if stat > 0 else 1.0) if alternative is Alternative.GROUP_TWO_GREATER else 0.0
        return BmTestResult(stat, float(n - 2), p, alternative, n1, n2, m1, m2, var1, var2, low, True)
    stat = (m2 - m1) / (n * math.sqrt(var1 / n1 + var2 / n2))
    v1, v2 = n1 * s1, n2 * s2
    df = (v1 + v2) ** 2 / (v1 ** 2 / (n1 - 1) + v2 ** 2 / (n2 - 1))
    if alternative is Alternative.GROUP_TWO_GREATER:
        p = t_sf(stat, df)
    else:
        p = min(1.0, 2.0 * t_sf(abs(stat), df))
    return BmTestResult(float(stat), float(df), float(p), alternative, n1, n2, m1, m2, var1, var2, low)


# ---------------------------------------------------------- distributions

def ecdf(values) -> list[tuple[float, float]]:
    v = np.sort(_as_finite(values))
    n = len(v)
    last = np.r_[v[1:] != v[:-1], True]
    idx = np.flatnonzero(last)
    fr = (idx + 1) / n
    fr[-1] = 1.0
    return list(zip(v[idx].tolist(), fr.tolist()))


def quantiles(values, probs=(0.25, 0.5, 0.75)) -> np.ndarray:
    """Linear-interpolation (type 7) quantiles."""
    return np.quantile(_as_finite(values), probs, method="linear")


@dataclass(frozen=True)
class Histogram:
    edges: np.ndarray
    counts: np.ndarray

    def rows(self) -> list[tuple[float, float, int]]:
        return [(float(lo), float(hi), int(c))
                for lo, hi, c in zip(self.edges[:-1], self.edges[1:], self.counts)]


def histogram(values, n_bins: int = 100) -> Histogram:
    if n_bins < 1:
        raise InvalidArgument("n_bins must be >= 1")
    counts, edges = np.histogram(_as_finite(values), bins=n_bins)
    return Histogram(edges, counts)


@dataclass(frozen=True)
class KdeCurve:
    x: np.ndarray
    density: np.ndarray
    bandwidth: float
    n: int


def silverman_bandwidth(v: np.ndarray) -> float:
    n = len(v)
    sd = np.std(v, ddof=1) if n > 1 else 0.0
    q1, q3 = np.quantile(v, [0.25, 0.75])
    spread = min(sd, (q3 - q1) / 1.34) if q3 > q1 else sd
    return 0.9 * spread * n ** (-0.2)


def kde(values, bandwidth: Union[str, float] = "auto", n_points: int = KDE_POINTS) -> KdeCurve:
    """Gaussian KDE on ``n_points`` evenly spaced points over [min - 4h, max + 4h].

    Large samples are linearly binned onto a fine grid and convolved with the
    kernel; the grid is fine enough that the result matches direct evaluation
    to well below plotting resolution.
    """
    v = _as_finite(values)
    h = silverman_bandwidth(v) if bandwidth == "auto" else float(bandwidth)
    if not h > 0 or not math.isfinite(h):
        raise DegenerateSampleError("KDE bandwidth is zero (sample has a single distinct value)")
    lo, hi = v.min() - 4 * h, v.max() + 4 * h
    xs = np.linspace(lo, hi, n_points)
    n = len(v)
    norm = 1.0 / (n * h * math.sqrt(2 * math.pi))
    if n <= KDE_EXACT_LIMIT:
        dens = np.empty(n_points)
        for s in range(0, n_points, 64):
            z = (xs[s:s + 64, None] - v[None, :]) / h
            dens[s:s + 64] = np.exp(-0.5 * z * z).sum(axis=1) * norm
        return KdeCurve(xs, dens, h, n)
    grid = np.linspace(lo, hi, KDE_GRID)
    step = grid[1] - grid[0]
    pos = (v - lo) / step
    i = np.clip(np.floor(pos).astype(np.int64), 0, KDE_GRID - 2)
    w = pos - i
    weights = np.bincount(i, 1 - w, KDE_GRID) + np.bincount(i + 1, w, KDE_GRID)
    half = int(math.ceil(6 * h / step))
    k = np.exp(-0.5 * (np.arange(-half, half + 1) * step / h) ** 2)
    from scipy.signal import fftconvolve

    smooth = fftconvolve(weights, k, mode="same") if half < KDE_GRID else np.convolve(weights, k, "same")
    dens = np.interp(xs, grid, np.maximum(smooth, 0.0)) * norm
    return KdeCurve(xs, dens, h, n)


# ------------------------------------------------------- location analyses

@dataclass(frozen=True)
class LocationSummary:
    ro_index: int
    median_hz: float
    q1_hz: float
    q3_hz: float
    n: int


@dataclass(frozen=True)
class DeltaRecord:
    device_id: str
    ro_index: int
    iteration: int
    delta_percent: float


def _frame_with_freq(ms: MeasurementSet) -> pd.DataFrame:
    f = ms.frame[["device_id", "ro_index", "iteration"]].copy()
    f["frequency_hz"] = ms.frequency_hz
    return f


def location_summaries(ms: MeasurementSet) -> list[LocationSummary]:
    if not len(ms):
        raise InvalidArgument("measurements must be non-empty")
    f = _frame_with_freq(ms)
    out = []
    for ro, grp in f.groupby("ro_index", sort=True):
        q1, med, q3 = np.quantile(grp["frequency_hz"].to_numpy(), [0.25, 0.5, 0.75])
        out.append(LocationSummary(int(ro), float(med), float(q1), float(q3), len(grp)))
    return out


def reference_medians(unused: MeasurementSet) -> dict[int, float]:
    return {s.ro_index: s.median_hz for s in location_summaries(unused)}


def delta(used: MeasurementSet, reference: dict[int, float]) -> pd.DataFrame:
    """Per-measurement relative difference to the reference location median, in percent.

    Columns: device_id, ro_index, iteration, delta_percent.
    """
    f = _frame_with_freq(used)
    ref = f["ro_index"].map(reference)
    missing = ref.isna()
    if missing.any():
        skipped = sorted(f.loc[missing, "ro_index"].unique().tolist())
        log.warning("no reference median for RO locations %s; skipped", skipped)
        f, ref = f[~missing], ref[~missing]
    refv = ref.to_numpy(dtype=float)
    if (refv == 0).any():
        raise InvalidArgument("reference median is zero")
    out = f[["device_id", "ro_index", "iteration"]].copy()
    out["delta_percent"] = (f["frequency_hz"].to_numpy() - refv) / refv * 100.0
    return out.reset_index(drop=True)


def delta_records(frame: pd.DataFrame) -> Iterable[DeltaRecord]:
    for d, l, i, v in frame.itertuples(index=False, name=None):
        yield DeltaRecord(d, int(l), int(i), float(v))


def delta_by_location(frame: pd.DataFrame) -> pd.DataFrame:
    """Median and quartiles of delta per RO location."""
    g = frame.groupby("ro_index", sort=True)["delta_percent"]
    return pd.DataFrame({
        "median_delta": g.median(),
        "q1_delta": g.quantile(0.25),
        "q3_delta": g.quantile(0.75),
        "n": g.size(),
    }).reset_index()


def split_by_status(ms: MeasurementSet, used_ids: Iterable[str]) -> tuple[MeasurementSet, MeasurementSet]:
    used_ids = set(used_ids)
    mask = ms.frame["device_id"].isin(used_ids).to_numpy()
    return MeasurementSet(ms.frame[mask]), MeasurementSet(ms.frame[~mask])


def group_medians(ms: MeasurementSet, groups: dict[str, object]) -> dict[object, float]:
    """Median frequency of the measurements of each device group."""
    f = _frame_with_freq(ms)
    lab = f["device_id"].map(groups)
    return {k: float(np.median(g.to_numpy())) for k, g in f["frequency_hz"].groupby(lab, sort=True)}


# ---------------------------------------------------------------- plot data

PLOT_FLOAT_FORMAT = "%.10g"


def write_csv(frame: pd.DataFrame, path) -> None:
    frame.to_csv(path, index=False, float_format=PLOT_FLOAT_FORMAT, lineterminator="\n")


def histogram_frame(groups: dict[str, MeasurementSet], n_bins: int = 100) -> pd.DataFrame:
    parts = []
    for name, ms in groups.items():
        if not len(ms):
            continue
        h = histogram(ms.frequency_hz, n_bins)
        parts.append(pd.DataFrame({"group": name, "bin_lo_hz": h.edges[:-1], "bin_hi_hz": h.edges[1:],
                                   "count": h.counts}))
    return pd.concat(parts, ignore_index=True)


def ecdf_frame(groups: dict[str, MeasurementSet], max_points: Optional[int] = 4096) -> pd.DataFrame:
    """ECDF steps per group; with ``max_points`` a subset of the exact steps, last one included."""
    parts = []
    for name, ms in groups.items():
        if not len(ms):
            continue
        steps = np.asarray(ecdf(ms.frequency_hz))
        if max_points and len(steps) > max_points:
            idx = np.searchsorted(steps[:, 1], np.linspace(0, 1, max_points + 1)[1:])
            steps = steps[np.unique(np.minimum(idx, len(steps) - 1))]
        parts.append(pd.DataFrame({"group": name, "frequency_hz": steps[:, 0],
                                   "cumulative_fraction": steps[:, 1]}))
    return pd.concat(parts, ignore_index=True)


def locations_frame(groups: dict[str, MeasurementSet]) -> pd.DataFrame:
    rows = [(name, s.ro_index, s.median_hz, s.q1_hz, s.q3_hz, s.n)
            for name, ms in groups.items() if len(ms) for s in location_summaries(ms)]
    return pd.DataFrame(rows, columns=["group", "ro_index", "median_hz", "q1_hz", "q3_hz", "n"])


def bm_report(used: MeasurementSet, unused: MeasurementSet, alpha: float = 0.01,
              alternative: Union[Alternative, str] = Alternative.GROUP_TWO_GREATER) -> dict:
    """Test used (group 1) against unused (group 2) measurements."""
    r = brunner_munzel(used.frequency_hz, unused.frequency_hz, alternative)
    out = r.to_dict()
    out.update(alpha=alpha, reject_h0=bool(r.p_value < alpha), group1="used", group2="unused")
    return out


def kde_frame(ms: MeasurementSet, labels: dict[str, object], kind: str) -> pd.DataFrame:
    """KDE curve of the frequencies of each labelled device group."""
    f = _frame_with_freq(ms)
    lab = f["device_id"].map(labels)
    parts = []
    for q, g in f["frequency_hz"].groupby(lab, sort=True):
        c = kde(g.to_numpy())
        parts.append(pd.DataFrame({"kind": kind, "quartile": str(q), "frequency_hz": c.x,
                                   "density": c.density, "bandwidth_hz": c.bandwidth}))
    return pd.concat(parts, ignore_index=True)


def group_median_frame(ms: MeasurementSet, labels: dict[str, object], kind: str) -> pd.DataFrame:
    f = _frame_with_freq(ms)
    lab = f["device_id"].map(labels)
    rows = []
    for q, g in f.groupby(lab, sort=True):
        v = g["frequency_hz"].to_numpy()
        q1, med, q3 = np.quantile(v, [0.25, 0.5, 0.75])
        rows.append((kind, str(q), g["device_id"].nunique(), len(v), med, q1, q3))
    return pd.DataFrame(rows, columns=["kind", "quartile", "n_devices", "n_measurements",
                                       "median_hz", "q1_hz", "q3_hz"])
