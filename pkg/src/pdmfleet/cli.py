"""Command-line driver: ``pdmfleet <subcommand> ...``.

Exit codes: 0 success, 1 invalid input or arguments, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import campaign as cp
from . import ingest, ml, place, stats
from .core import InvalidArgument, PdmError
from .silicon import FleetConfig, generate_fleet, load_fleet, save_fleet, synth_radiation_scans

log = logging.getLogger("pdmfleet")

ANALYSES = ("hist", "ecdf", "bm-test", "locations", "delta", "quartiles")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common(p: argparse.ArgumentParser, top: bool) -> None:
    d = {} if top else {"default": argparse.SUPPRESS}
    p.add_argument("--seed", type=int, help="seed for every stochastic step", **({"default": None} if top else d))
    p.add_argument("--workers", type=int, help="worker processes (default: CPU count)",
                   **({"default": None} if top else d))
    p.add_argument("-v", "--verbose", action="count", help="more logging", **({"default": 0} if top else d))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pdmfleet", description=__doc__.splitlines()[0])
    _common(parser, True)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-fleet", help="generate a synthetic fleet and radiation scans")
    _common(p, False)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--config", type=Path, help="fleet config file (key = value lines)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a fleet config key")

    p = sub.add_parser("run-campaign", help="run the self-test campaign on a fleet")
    _common(p, False)
    p.add_argument("--fleet", required=True, type=Path, help="directory written by gen-fleet")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--iterations", type=int, default=100)
    p.add_argument("--gate-time", type=float, default=0.5, help="seconds per RO")
    p.add_argument("--n-ro", type=int, help="expected RO count (default: fleet's)")
    p.add_argument("--retry-limit", type=int, default=3)
    p.add_argument("--resume", type=Path, help="partial measurement CSV to complete")

    p = sub.add_parser("assign-dose", help="assign dose rates and quartiles to deployed devices")
    _common(p, False)
    p.add_argument("--roster", required=True, type=Path)
    p.add_argument("--scans", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--window", type=float, default=5.0, help="half-width in meters")

    p = sub.add_parser("analyze", help="statistical analyses, emitted as plot-ready data")
    _common(p, False)
    p.add_argument("what", choices=ANALYSES + ("all",))
    p.add_argument("--measurements", required=True, type=Path)
    p.add_argument("--roster", required=True, type=Path)
    p.add_argument("--quartiles", type=Path, help="quartiles.csv (for 'quartiles')")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--bins", type=int, default=100)
    p.add_argument("--alpha", type=float, default=0.01)
    p.add_argument("--two-sided", action="store_true")
    p.add_argument("--per-measurement", action="store_true",
                   help="also write the delta of every measurement")
    p.add_argument("--ecdf-points", type=int, default=4096,
                   help="ECDF steps kept per group (0: all)")

    for name, helptext in (("train", "device split and grouped-fold grid search"),
                           ("evaluate", "refit tuned models and score on test devices")):
        p = sub.add_parser(name, help=helptext)
        _common(p, False)
        p.add_argument("--measurements", required=True, type=Path)
        p.add_argument("--roster", required=True, type=Path)
        p.add_argument("--doses", required=True, type=Path)
        p.add_argument("--out", required=True, type=Path)
        if name == "train":
            p.add_argument("--families", default=",".join(f.value for f in ml.Family))
            p.add_argument("--k", type=int, default=5)
            p.add_argument("--train-fraction", type=float, default=0.7)
            p.add_argument("--grid", choices=("default", "full"), default="default")
            p.add_argument("--grid-file", type=Path, help="JSON {family: {param: [values]}}")
            p.add_argument("--tune-rows", type=int, default=ml.MAX_TUNE_ROWS)
        else:
            p.add_argument("--train-report", required=True, type=Path)
            p.add_argument("--fit-rows", type=int, default=ml.MAX_FIT_ROWS)

    p = sub.add_parser("place", help="place RO footprints and emit a constraints file")
    _common(p, False)
    p.add_argument("--spec", required=True, type=Path, help="placement spec JSON")
    p.add_argument("--out", required=True, type=Path, help="constraints file to write")
    return parser


# ------------------------------------------------------------- subcommands

def _require(*paths: Path) -> None:
    for p in paths:
        if not p.exists():
            raise InvalidArgument(f"{p}: no such file or directory")


def _workers(args) -> int:
    w = args.workers if args.workers is not None else cp.default_workers()
    if w < 1:
        raise InvalidArgument("--workers must be >= 1")
    return w


def cmd_gen_fleet(args) -> dict:
    cfg = FleetConfig.load(args.config) if args.config else FleetConfig()
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise InvalidArgument(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if overrides:
        text = cfg.to_text() + "".join(f"{k} = {v}\n" for k, v in overrides.items())
        cfg = FleetConfig.from_text(text)
    _announce(args, fleet_config=cfg.__dict__)
    scans = synth_radiation_scans(cfg)
    fleet = generate_fleet(cfg, scans)
    paths = save_fleet(fleet, args.out)
    ingest.save_scans(scans, args.out / "scans.csv")
    return {"files": sorted(str(p) for p in list(paths.values()) + [args.out / "scans.csv"])}


def cmd_run_campaign(args) -> dict:
    _require(args.fleet / "fleet.cfg")
    fleet = load_fleet(args.fleet)
    config = cp.CampaignConfig(n_iterations=args.iterations, gate_time_s=args.gate_time,
                               n_ro=args.n_ro or fleet.config.n_ro, retry_limit=args.retry_limit,
                               workers=_workers(args), seed=args.seed, output_dir=str(args.out))
    _announce(args, campaign={k: v for k, v in config.__dict__.items()},
              resume=str(args.resume) if args.resume else None)
    if args.resume:
        _require(args.resume)
        partial = ingest.load_measurements(args.resume)
        ms, report = cp.resume_campaign(partial, fleet, config)
    else:
        ms, report = cp.run_campaign(fleet, config)
    counts = {o.value: sum(1 for d in report.outcomes.values() if d.outcome is o) for o in cp.Outcome}
    if counts[cp.Outcome.COMPLETE.value] == 0 and counts[cp.Outcome.PARTIAL.value] == 0:
        raise PdmError("every device failed")
    return {"measurements": len(ms), "outcomes": counts,
            "host_seconds": round(report.host_seconds, 2)}


def cmd_assign_dose(args) -> dict:
    _require(args.roster, args.scans)
    _announce(args, window_m=args.window)
    devices = ingest.load_roster(args.roster)
    scans = ingest.load_scans(args.scans)
    deployed = [d for d in devices if d.deployed]
    doses = ingest.assign_doses(deployed, scans, args.window)
    args.out.mkdir(parents=True, exist_ok=True)
    ingest.save_doses(doses, args.out / "doses.csv")
    gq, nq = ingest.quartiles(doses, "gamma"), ingest.quartiles(doses, "neutron")
    ingest.save_quartiles(gq, nq, args.out / "quartiles.csv")
    sizes = {q.value: sum(1 for v in gq.values() if v is q) for q in ingest.Quartile}
    return {"devices": len(doses), "quartile_sizes": sizes}


def _load_quartiles(path: Path) -> tuple[dict[str, str], dict[str, str]]:
    gamma, neutron = ingest.load_quartiles(path)
    return ({k: v.value for k, v in gamma.items()}, {k: v.value for k, v in neutron.items()})


def cmd_analyze(args) -> dict:
    _require(args.measurements, args.roster)
    todo = ANALYSES if args.what == "all" else (args.what,)
    if "quartiles" in todo:
        if args.quartiles is None:
            raise InvalidArgument("quartile analysis needs --quartiles")
        _require(args.quartiles)
    _announce(args, analyses=list(todo))
    ms = ingest.load_measurements(args.measurements)
    roster = ingest.load_roster(args.roster)
    used, unused = stats.split_by_status(ms, [d.device_id for d in roster if d.deployed])
    groups = {"all": ms, "used": used, "unused": unused}
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    summary: dict = {}
    if "hist" in todo:
        stats.write_csv(stats.histogram_frame(groups, args.bins), out / "histogram.csv")
        f = used.frequency_hz
        summary["used_mean_hz"] = float(f.mean()) if len(f) else None
    if "ecdf" in todo:
        stats.write_csv(stats.ecdf_frame({"used": used, "unused": unused}, args.ecdf_points), out / "ecdf.csv")
    if "bm-test" in todo:
        alt = stats.Alternative.TWO_SIDED if args.two_sided else stats.Alternative.GROUP_TWO_GREATER
        rep = stats.bm_report(used, unused, args.alpha, alt)
        (out / "bm_test.json").write_text(json.dumps(rep, indent=2, sort_keys=True) + "\n")
        summary["bm_test"] = {k: rep[k] for k in ("statistic_B", "df", "p_value", "reject_h0")}
    if "locations" in todo:
        stats.write_csv(stats.locations_frame({"used": used, "unused": unused}), out / "locations.csv")
    if "delta" in todo:
        d = stats.delta(used, stats.reference_medians(unused))
        by_loc = stats.delta_by_location(d)
        stats.write_csv(by_loc, out / "delta_locations.csv")
        if args.per_measurement:
            stats.write_csv(d, out / "delta.csv")
        med = by_loc["median_delta"]
        summary["delta_location_median_range"] = [float(med.min()), float(med.max())]
    if "quartiles" in todo:
        gq, nq = _load_quartiles(args.quartiles)
        medians = [stats.group_median_frame(used, gq, "gamma"), stats.group_median_frame(used, nq, "neutron")]
        curves = [stats.kde_frame(used, gq, "gamma"), stats.kde_frame(used, nq, "neutron")]
        import pandas as pd

        qm = pd.concat(medians, ignore_index=True)
        stats.write_csv(qm, out / "quartile_medians.csv")
        stats.write_csv(pd.concat(curves, ignore_index=True), out / "quartile_kde.csv")
        summary["quartile_medians_hz"] = {f"{k}:{q}": float(v) for k, q, v in
                                          zip(qm["kind"], qm["quartile"], qm["median_hz"])}
    return summary


def _dataset(args) -> ml.Dataset:
    _require(args.measurements, args.roster, args.doses)
    ms = ingest.load_measurements(args.measurements)
    return ml.build_dataset(ms, ingest.load_doses(args.doses), ingest.load_roster(args.roster))


def _family(name: str) -> ml.Family:
    try:
        return ml.Family(name)
    except ValueError:
        raise InvalidArgument(f"unknown model family {name!r}; choose from "
                              f"{', '.join(f.value for f in ml.Family)}") from None


def cmd_train(args) -> dict:
    families = [_family(f.strip()) for f in args.families.split(",") if f.strip()]
    if not families:
        raise InvalidArgument("--families is empty")
    grids = {}
    if args.grid == "full":
        grids = {f: ml.full_grid(f) for f in families}
    if args.grid_file:
        _require(args.grid_file)
        try:
            extra = json.loads(args.grid_file.read_text())
        except json.JSONDecodeError as exc:
            raise InvalidArgument(f"{args.grid_file}: not valid JSON ({exc})") from None
        if not isinstance(extra, dict):
            raise InvalidArgument(f"{args.grid_file}: expected an object of family grids")
        grids.update({_family(k): v for k, v in extra.items()})
    seed = 0 if args.seed is None else args.seed
    workers = _workers(args)
    _announce(args, families=[f.value for f in families], k=args.k, seed=seed,
              train_fraction=args.train_fraction, grid=args.grid, tune_rows=args.tune_rows,
              grids={f.value: grids.get(f, ml.DEFAULT_GRIDS[f]) for f in families})
    ds = _dataset(args)
    report = ml.tune(ds, families, grids=grids, k=args.k, seed=seed,
                     train_fraction=args.train_fraction, max_tune_rows=args.tune_rows, workers=workers)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "train_report.json").write_text(report.to_json())
    return {t.family.value: dict(t.best.params) for t in report.tuned}


def cmd_evaluate(args) -> dict:
    _require(args.train_report)
    report = ml.TrainReport.from_json(args.train_report.read_text())
    _announce(args, fit_rows=args.fit_rows, train_report=str(args.train_report))
    ds = _dataset(args)
    ev = ml.score(ds, report, max_fit_rows=args.fit_rows, workers=_workers(args))
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "eval_report.json").write_text(ev.to_json())
    (args.out / "fig6_models.csv").write_text(ev.to_csv())
    return {m.family.value: {"mape_percent": round(m.mape, 4), "r2": round(m.r2, 4)} for m in ev.models}


def cmd_place(args) -> dict:
    _require(args.spec)
    spec = place.PlacementSpec.load(args.spec)
    _announce(args, spec=spec.to_dict())
    placement = place.place(spec)
    text = place.emit_constraints(placement, spec)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(text)
    return {"placed": len(placement)}


COMMANDS = {"gen-fleet": cmd_gen_fleet, "run-campaign": cmd_run_campaign,
            "assign-dose": cmd_assign_dose, "analyze": cmd_analyze, "train": cmd_train,
            "evaluate": cmd_evaluate, "place": cmd_place}


def _announce(args, **extra) -> None:
    base = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()}
    base.update(extra)
    print("effective config: " + json.dumps(base, sort_keys=True, default=str), flush=True)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    level = logging.WARNING - 10 * min(args.verbose or 0, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        result = COMMANDS[args.command](args)
    except (InvalidArgument, ingest.FileFormatError, ingest.NoCoverageError, place.InfeasiblePlacement,
            place.ConstraintsFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (PdmError, OSError) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(result, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
