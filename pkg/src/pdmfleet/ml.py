"""Frequency estimation from operating conditions, dose rates and location.

Rows are grouped by device: train/test and cross-validation splits never put
measurements of one device on both sides.
"""

from __future__ import annotations

import enum
import itertools
import json
import logging
from dataclasses import dataclass
from typing import Any, Iterator, Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd
from sklearn.compose import TransformedTargetRegressor
from sklearn.ensemble import (
    BaggingRegressor,
    ExtraTreesRegressor,
    GradientBoostingRegressor,
    RandomForestRegressor,
)
from sklearn.linear_model import SGDRegressor
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler
from sklearn.tree import DecisionTreeRegressor

from .core import DeviceRecord, InvalidArgument, MeasurementSet
from .ingest import DeviceDose

log = logging.getLogger(__name__)

FEATURES = ["die_temp_c", "core_voltage_v", "gamma_rate_avg", "neutron_rate_avg",
            "tunnel_position_m", "slot_index", "ro_index"]
TARGET = "target_frequency_hz"
GROUP = "device_id"


@dataclass(frozen=True)
class FeatureRow:
    die_temp_c: float
    core_voltage_v: float
    gamma_rate_avg: float
    neutron_rate_avg: float
    tunnel_position_m: float
    slot_index: int
    ro_index: int
    target_frequency_hz: float
    group_key: str


class Dataset:
    """Columnar feature table: ``FEATURES`` + target + device group key."""

    def __init__(self, frame: pd.DataFrame):
        missing = [c for c in FEATURES + [TARGET, GROUP] if c not in frame.columns]
        if missing:
            raise InvalidArgument(f"dataset lacks columns {missing}")
        if frame[FEATURES + [TARGET]].isna().to_numpy().any():
            raise InvalidArgument("dataset has missing feature values")
        self.frame = frame.reset_index(drop=True)

    def __len__(self) -> int:
        return len(self.frame)

    @property
    def X(self) -> np.ndarray:
        return self.frame[FEATURES].to_numpy(dtype=float)

    @property
    def y(self) -> np.ndarray:
        return self.frame[TARGET].to_numpy(dtype=float)

    @property
    def groups(self) -> np.ndarray:
        return self.frame[GROUP].to_numpy()

    @property
    def devices(self) -> list[str]:
        return sorted(self.frame[GROUP].unique().tolist())

    def select_devices(self, ids) -> "Dataset":
        return Dataset(self.frame[self.frame[GROUP].isin(set(ids))])

    def subsample(self, max_rows: Optional[int], seed: int) -> "Dataset":
        if max_rows is None or len(self) <= max_rows:
            return self
        idx = np.sort(np.random.default_rng(seed).choice(len(self), max_rows, replace=False))
        return Dataset(self.frame.iloc[idx])

    def rows(self) -> Iterator[FeatureRow]:
        cols = FEATURES + [TARGET, GROUP]
        for t in self.frame[cols].itertuples(index=False, name=None):
            yield FeatureRow(float(t[0]), float(t[1]), float(t[2]), float(t[3]), float(t[4]),
                             int(t[5]), int(t[6]), float(t[7]), t[8])


def build_dataset(ms: MeasurementSet, doses: Union[Sequence[DeviceDose], Mapping[str, DeviceDose]],
                  roster: Sequence[DeviceRecord], *, operational_only: bool = True) -> Dataset:
    dose_map = doses if isinstance(doses, Mapping) else {d.device_id: d for d in doses}
    info = {d.device_id: d for d in roster}
    f = ms.frame
    if operational_only:
        keep = {d.device_id for d in roster if d.deployed}
        f = f[f["device_id"].isin(keep)]
    present = f["device_id"].unique().tolist()
    no_roster = sorted(d for d in present if d not in info)
    if no_roster:
        raise InvalidArgument(f"devices without roster entry: {no_roster}")
    no_dose = sorted(d for d in present if d not in dose_map)
    if no_dose:
        raise InvalidArgument(f"devices without dose: {no_dose}")
    no_pos = sorted(d for d in present if info[d].tunnel_position_m is None)
    if no_pos:
        raise InvalidArgument(f"devices without tunnel position: {no_pos}")
    dev = pd.DataFrame({
        GROUP: present,
        "gamma_rate_avg": [dose_map[d].gamma_rate_avg for d in present],
        "neutron_rate_avg": [dose_map[d].neutron_rate_avg for d in present],
        "tunnel_position_m": [info[d].tunnel_position_m for d in present],
        "slot_index": [info[d].slot_index for d in present],
    })
    freq = f["count"].to_numpy(dtype=float) / f["gate_time_s"].to_numpy(dtype=float)
    rows = f[[GROUP, "ro_index", "die_temp_c", "core_voltage_v"]].assign(**{TARGET: freq})
    out = rows.merge(dev, on=GROUP, how="left", sort=False)
    return Dataset(out[FEATURES + [TARGET, GROUP]])


# ------------------------------------------------------------------ splits

def split_by_device(ds: Dataset, train_fraction: float = 0.7, seed: int = 0
                    ) -> tuple[Dataset, Dataset]:
    devices = ds.devices
    if len(devices) < 2:
        raise InvalidArgument("need at least 2 devices to split")
    if not 0 < train_fraction < 1:
        raise InvalidArgument("train_fraction must be in (0, 1)")
    n_train = min(max(int(round(train_fraction * len(devices))), 1), len(devices) - 1)
    perm = np.random.default_rng(seed).permutation(len(devices))
    train = {devices[i] for i in perm[:n_train]}
    mask = ds.frame[GROUP].isin(train).to_numpy()
    return Dataset(ds.frame[mask]), Dataset(ds.frame[~mask])


def group_kfold(ds: Dataset, k: int = 5, seed: Optional[int] = 0) -> list[list[str]]:
    """Partition the devices of ``ds`` into ``k`` disjoint folds of near-equal size."""
    devices = ds.devices
    if k < 2:
        raise InvalidArgument("k must be >= 2")
    if k > len(devices):
        raise InvalidArgument(f"k = {k} exceeds the number of devices ({len(devices)})")
    order = np.arange(len(devices))
    if seed is not None:
        order = np.random.default_rng(seed).permutation(len(devices))
    return [sorted(devices[i] for i in part) for part in np.array_split(order, k)]


def fold_datasets(ds: Dataset, folds: list[list[str]]) -> Iterator[tuple[Dataset, Dataset]]:
    g = ds.frame[GROUP]
    for fold in folds:
        m = g.isin(set(fold)).to_numpy()
        yield Dataset(ds.frame[~m]), Dataset(ds.frame[m])


# ------------------------------------------------------------------ models

class Family(str, enum.Enum):
    LINEAR_SGD = "LinearSgd"
    TREE = "Tree"
    BAGGING = "Bagging"
    RANDOM_FOREST = "RandomForest"
    EXTRA_TREES = "ExtraTrees"
    GRADIENT_BOOSTING = "GradientBoosting"


_TREE_KEYS = {"max_depth", "min_samples_leaf", "seed"}
ALLOWED_KEYS = {
    Family.LINEAR_SGD: {"learning_rate", "epochs", "alpha", "seed"},
    Family.TREE: _TREE_KEYS,
    Family.BAGGING: _TREE_KEYS | {"n_estimators"},
    Family.RANDOM_FOREST: _TREE_KEYS | {"n_estimators", "feature_fraction"},
    Family.EXTRA_TREES: _TREE_KEYS | {"n_estimators", "feature_fraction"},
    Family.GRADIENT_BOOSTING: _TREE_KEYS | {"n_estimators", "learning_rate"},
}
DEFAULTS: dict[str, Any] = {"max_depth": None, "min_samples_leaf": 1, "seed": 0, "n_estimators": 50,
                            "feature_fraction": 1.0, "learning_rate": 0.1, "epochs": 20,
                            "alpha": 0.0}


@dataclass(frozen=True)
class ModelSpec:
    family: Family
    params: tuple[tuple[str, Any], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        p = dict(self.params)
        bad = set(p) - ALLOWED_KEYS[self.family]
        if bad:
            raise InvalidArgument(f"{self.family.value} does not accept {sorted(bad)}")
        _check_values(p)
        object.__setattr__(self, "params", tuple(sorted(p.items())))

    @classmethod
    def of(cls, family, **params) -> "ModelSpec":
        return cls(Family(family), tuple(params.items()))

    def get(self, key: str):
        return dict(self.params).get(key, DEFAULTS[key])

    def to_dict(self) -> dict:
        return {"family": self.family.value, "params": dict(self.params)}


def _check_values(p: dict) -> None:
    def positive_int(k):
        if k in p and (not isinstance(p[k], (int, np.integer)) or p[k] < 1):
            raise InvalidArgument(f"{k} must be a positive integer")

    for k in ("n_estimators", "min_samples_leaf", "epochs"):
        positive_int(k)
    if p.get("max_depth") is not None:
        positive_int("max_depth")
    if "learning_rate" in p and not p["learning_rate"] > 0:
        raise InvalidArgument("learning_rate must be > 0")
    if "feature_fraction" in p and not 0 < p["feature_fraction"] <= 1:
        raise InvalidArgument("feature_fraction must be in (0, 1]")
    if "alpha" in p and p["alpha"] < 0:
        raise InvalidArgument("alpha must be >= 0")


def _estimator(spec: ModelSpec):
    g = spec.get
    seed = g("seed")
    if spec.family is Family.LINEAR_SGD:
        # target standardized as well: raw frequencies (~3e8 Hz) stall SGD's intercept
        return TransformedTargetRegressor(
            regressor=make_pipeline(StandardScaler(), SGDRegressor(
                loss="squared_error", penalty="l2", alpha=g("alpha"), learning_rate="invscaling",
                eta0=g("learning_rate") if "learning_rate" in dict(spec.params) else 0.01,
                max_iter=g("epochs"), tol=None, shuffle=True, random_state=seed)),
            transformer=StandardScaler())
    tree = dict(max_depth=g("max_depth"), min_samples_leaf=g("min_samples_leaf"))
    if spec.family is Family.TREE:
        return DecisionTreeRegressor(criterion="squared_error", random_state=seed, **tree)
    if spec.family is Family.BAGGING:
        return BaggingRegressor(DecisionTreeRegressor(**tree), n_estimators=g("n_estimators"),
                                bootstrap=True, random_state=seed, n_jobs=1)
    if spec.family is Family.RANDOM_FOREST:
        return RandomForestRegressor(n_estimators=g("n_estimators"), max_features=g("feature_fraction"),
                                     bootstrap=True, random_state=seed, n_jobs=1, **tree)
    if spec.family is Family.EXTRA_TREES:
        return ExtraTreesRegressor(n_estimators=g("n_estimators"), max_features=g("feature_fraction"),
                                   bootstrap=True, random_state=seed, n_jobs=1, **tree)
    return GradientBoostingRegressor(loss="squared_error", criterion="squared_error",
                                     n_estimators=g("n_estimators"), learning_rate=g("learning_rate"),
                                     random_state=seed, **tree)


@dataclass
class Model:
    spec: ModelSpec
    estimator: Any

    def predict(self, data: Union[Dataset, np.ndarray]) -> np.ndarray:
        return predict(self, data)


def fit(spec: ModelSpec, train: Dataset) -> Model:
    if not len(train):
        raise InvalidArgument("training data is empty")
    est = _estimator(spec)
    est.fit(train.X, train.y)
    return Model(spec, est)


def predict(model: Model, data: Union[Dataset, np.ndarray]) -> np.ndarray:
    X = data.X if isinstance(data, Dataset) else np.asarray(data, dtype=float)
    return np.asarray(model.estimator.predict(X), dtype=float)


# ----------------------------------------------------------------- metrics

def mape(y, y_hat) -> float:
    y = np.asarray(y, dtype=float)
    y_hat = np.asarray(y_hat, dtype=float)
    if y.shape != y_hat.shape or y.size == 0:
        raise InvalidArgument("y and y_hat must have equal non-zero length")
    if (y == 0).any():
        raise InvalidArgument("MAPE undefined for zero targets")
    return float(100.0 * np.mean(np.abs(y - y_hat) / np.abs(y)))


def r2(y, y_hat) -> float:
    y = np.asarray(y, dtype=float)
    y_hat = np.asarray(y_hat, dtype=float)
    if y.shape != y_hat.shape or y.size < 2:
        raise InvalidArgument("r2 needs equal lengths >= 2")
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0:
        raise InvalidArgument("r2 undefined for constant targets")
    return 1.0 - float(np.sum((y - y_hat) ** 2)) / ss_tot


# ------------------------------------------------------------ grid search

# value sets: depth {4,6,8}, n_estimators {50,200}, learning_rate {0.05,0.1,0.3},
# min_samples_leaf {1,20}; each family searches a subset sized for a desk-scale run
DEFAULT_GRIDS: dict[Family, dict[str, list]] = {
    Family.LINEAR_SGD: {"learning_rate": [0.001, 0.01], "epochs": [20]},
    Family.TREE: {"max_depth": [4, 6, 8], "min_samples_leaf": [1, 20]},
    Family.BAGGING: {"max_depth": [6, 8], "n_estimators": [50], "min_samples_leaf": [20]},
    Family.RANDOM_FOREST: {"max_depth": [6, 8], "n_estimators": [50], "min_samples_leaf": [20],
                           "feature_fraction": [0.6]},
    Family.EXTRA_TREES: {"max_depth": [6, 8], "n_estimators": [50], "min_samples_leaf": [20],
                         "feature_fraction": [1.0]},
    Family.GRADIENT_BOOSTING: {"max_depth": [4, 6, 8], "n_estimators": [50, 200],
                               "learning_rate": [0.1], "min_samples_leaf": [20]},
}
FULL_GRID = {"max_depth": [4, 6, 8], "n_estimators": [50, 200], "learning_rate": [0.05, 0.1, 0.3],
             "min_samples_leaf": [1, 20]}
MAX_TUNE_ROWS = 10_000
MAX_FIT_ROWS = 100_000


def full_grid(family) -> dict[str, list]:
    """The complete value-set product restricted to the keys ``family`` accepts."""
    family = Family(family)
    if family is Family.LINEAR_SGD:
        return {"learning_rate": [0.001, 0.01, 0.1], "epochs": [20, 50]}
    return {k: v for k, v in FULL_GRID.items() if k in ALLOWED_KEYS[family]}


def expand_grid(family, grid: Union[Mapping[str, Sequence], Sequence[Mapping[str, Any]]],
                seed: int = 0) -> list[ModelSpec]:
    """Grid points in order: a list of dicts as given, or the product of a dict of lists."""
    family = Family(family)
    if isinstance(grid, Mapping):
        keys = list(grid)
        points = [dict(zip(keys, vals)) for vals in itertools.product(*(grid[k] for k in keys))]
    else:
        points = [dict(p) for p in grid]
    if not points:
        raise InvalidArgument("grid is empty")
    out = []
    for p in points:
        if "seed" in ALLOWED_KEYS[family]:
            p.setdefault("seed", seed)
        out.append(ModelSpec(family, tuple(p.items())))
    return out


@dataclass
class GridResult:
    spec: ModelSpec
    fold_mape: list[float]

    @property
    def mean_mape(self) -> float:
        return float(np.mean(self.fold_mape))


def _fold_score(args) -> float:
    spec, tr, va = args
    return mape(va.y, predict(fit(spec, tr), va))


def _map(fn, items: list, workers: int) -> list:
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def grid_search(family, grid, train: Dataset, k: int = 5, *, seed: int = 0,
                max_fit_rows: Optional[int] = None, workers: int = 1
                ) -> tuple[ModelSpec, list[GridResult]]:
    """Average validation MAPE over ``k`` device-grouped folds per grid point; returns the argmin.

    ``max_fit_rows`` caps the rows used per fold fit and validation (random
    subsample, devices stay disjoint). Ties go to the earlier grid point.
    """
    specs = expand_grid(family, grid, seed)
    folds = group_kfold(train, k, seed)
    pairs = []
    for j, (tr, va) in enumerate(fold_datasets(train, folds)):
        pairs.append((tr.subsample(max_fit_rows, seed + j), va.subsample(max_fit_rows, seed + 1000 + j)))
    scores = _map(_fold_score, [(s, tr, va) for s in specs for tr, va in pairs], workers)
    results = [GridResult(s, scores[i * len(pairs):(i + 1) * len(pairs)]) for i, s in enumerate(specs)]
    for r in results:
        log.info("%s %s: mean MAPE %.4f", r.spec.family.value, dict(r.spec.params), r.mean_mape)
    best = min(range(len(results)), key=lambda i: (results[i].mean_mape, i))
    return results[best].spec, results


# ------------------------------------------------------------- evaluation

@dataclass
class TuneResult:
    family: Family
    best: ModelSpec
    results: list[GridResult]

    @property
    def fold_scores(self) -> list[float]:
        return next(r.fold_mape for r in self.results if r.spec == self.best)


@dataclass
class TrainReport:
    """Outcome of tuning: the device split and the selected spec per family."""

    train_devices: list[str]
    test_devices: list[str]
    tuned: list[TuneResult]
    seed: int
    k: int

    def to_json(self) -> str:
        body = {"seed": self.seed, "k": self.k, "train_devices": self.train_devices,
                "test_devices": self.test_devices,
                "models": [{"family": t.family.value, "best_params": dict(t.best.params),
                            "fold_scores": t.fold_scores,
                            "grid": [{"params": dict(r.spec.params), "fold_mape": r.fold_mape,
                                      "mean_mape": r.mean_mape} for r in t.results]}
                           for t in self.tuned]}
        return json.dumps(body, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "TrainReport":
        d = json.loads(text)
        tuned = []
        for m in d["models"]:
            fam = Family(m["family"])
            results = [GridResult(ModelSpec(fam, tuple(g["params"].items())), g["fold_mape"])
                       for g in m["grid"]]
            tuned.append(TuneResult(fam, ModelSpec(fam, tuple(m["best_params"].items())), results))
        return cls(d["train_devices"], d["test_devices"], tuned, d["seed"], d["k"])


@dataclass
class ModelEval:
    family: Family
    mape: float
    r2: float
    best_params: dict
    fold_scores: list[float]


@dataclass
class EvalReport:
    models: list[ModelEval]
    n_train_devices: int
    n_test_devices: int
    n_train_rows: int
    n_test_rows: int
    seed: int

    def by_family(self, family) -> ModelEval:
        family = Family(family)
        for m in self.models:
            if m.family is family:
                return m
        raise KeyError(family)

    def to_json(self) -> str:
        body = {
            "seed": self.seed,
            "n_train_devices": self.n_train_devices, "n_test_devices": self.n_test_devices,
            "n_train_rows": self.n_train_rows, "n_test_rows": self.n_test_rows,
            "models": [{"family": m.family.value, "mape_percent": m.mape, "r2": m.r2,
                        "best_params": m.best_params, "fold_scores": m.fold_scores}
                       for m in self.models],
        }
        return json.dumps(body, indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        lines = ["model,mape_percent,r2"]
        lines += [f"{m.family.value},{m.mape:.6f},{m.r2:.6f}" for m in self.models]
        return "\n".join(lines) + "\n"


def tune(ds: Dataset, families: Sequence = tuple(Family), *, grids: Optional[Mapping] = None,
         k: int = 5, seed: int = 0, train_fraction: float = 0.7,
         max_tune_rows: Optional[int] = MAX_TUNE_ROWS, workers: int = 1) -> TrainReport:
    """Device split, then a grouped-fold grid search per family on the training devices."""
    train, test = split_by_device(ds, train_fraction, seed)
    grids = dict(grids or {})
    tuned = []
    for fam in families:
        fam = Family(fam)
        grid = grids.get(fam, grids.get(fam.value, DEFAULT_GRIDS[fam]))
        best, results = grid_search(fam, grid, train, k, seed=seed, max_fit_rows=max_tune_rows,
                                    workers=workers)
        tuned.append(TuneResult(fam, best, results))
    return TrainReport(train.devices, test.devices, tuned, seed, k)


def _refit_score(args):
    spec, fit_set, test = args
    pred = predict(fit(spec, fit_set), test)
    return mape(test.y, pred), r2(test.y, pred)


def score(ds: Dataset, report: TrainReport, *, max_fit_rows: Optional[int] = MAX_FIT_ROWS,
          workers: int = 1) -> EvalReport:
    """Refit each selected spec on the training devices and score it on the test devices."""
    if set(report.train_devices) & set(report.test_devices):
        raise InvalidArgument("train and test device sets overlap")
    train = ds.select_devices(report.train_devices)
    test = ds.select_devices(report.test_devices)
    if not len(train) or not len(test):
        raise InvalidArgument("dataset has no rows for the train or test devices of the report")
    fit_set = train.subsample(max_fit_rows, report.seed)
    scores = _map(_refit_score, [(t.best, fit_set, test) for t in report.tuned], workers)
    models = []
    for t, (m, r) in zip(report.tuned, scores):
        models.append(ModelEval(t.family, m, r, dict(t.best.params), t.fold_scores))
        log.info("%s: test MAPE %.3f%%, R2 %.3f", t.family.value, m, r)
    return EvalReport(models, len(report.train_devices), len(report.test_devices),
                      len(train), len(test), report.seed)


def evaluate(ds: Dataset, families: Sequence = tuple(Family), *, grids: Optional[Mapping] = None,
             k: int = 5, seed: int = 0, train_fraction: float = 0.7,
             max_tune_rows: Optional[int] = MAX_TUNE_ROWS, max_fit_rows: Optional[int] = MAX_FIT_ROWS,
             workers: int = 1) -> EvalReport:
    report = tune(ds, families, grids=grids, k=k, seed=seed, train_fraction=train_fraction,
                  max_tune_rows=max_tune_rows, workers=workers)
    return score(ds, report, max_fit_rows=max_fit_rows, workers=workers)
