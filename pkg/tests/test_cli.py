from __future__ import annotations

import json

import pytest

from pdmfleet.cli import main

SMALL = ["--set", "n_deployed=12", "--set", "n_unused=4", "--set", "n_ro=6",
         "--set", "n_scans=2", "--set", "tunnel_length_m=200"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def last_json(out):
    return json.loads(out.strip().splitlines()[-1])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    steps = [
        ["gen-fleet", "--seed", 7, "--out", root / "fleet", *SMALL],
        ["run-campaign", "--fleet", root / "fleet", "--out", root / "campaign",
         "--iterations", 4, "--workers", 1],
        ["assign-dose", "--roster", root / "fleet" / "roster.csv",
         "--scans", root / "fleet" / "scans.csv", "--out", root / "dose"],
        ["analyze", "all", "--measurements", root / "campaign" / "measurements.csv",
         "--roster", root / "fleet" / "roster.csv", "--quartiles", root / "dose" / "quartiles.csv",
         "--out", root / "analysis"],
        ["train", "--measurements", root / "campaign" / "measurements.csv",
         "--roster", root / "fleet" / "roster.csv", "--doses", root / "dose" / "doses.csv",
         "--out", root / "model", "--families", "Tree,LinearSgd", "--k", 3, "--workers", 1],
        ["evaluate", "--measurements", root / "campaign" / "measurements.csv",
         "--roster", root / "fleet" / "roster.csv", "--doses", root / "dose" / "doses.csv",
         "--train-report", root / "model" / "train_report.json", "--out", root / "model",
         "--workers", 1],
    ]
    codes = [main([str(a) for a in s]) for s in steps]
    return root, codes


def test_pipeline_succeeds(pipeline):
    root, codes = pipeline
    assert codes == [0] * 6
    for name in ("histogram.csv", "ecdf.csv", "bm_test.json", "locations.csv",
                 "delta_locations.csv", "quartile_medians.csv", "quartile_kde.csv"):
        assert (root / "analysis" / name).stat().st_size > 0
    assert (root / "model" / "fig6_models.csv").read_text().startswith("model,mape_percent,r2")


def test_bm_test_json(pipeline):
    root, _ = pipeline
    bm = json.loads((root / "analysis" / "bm_test.json").read_text())
    for key in ("statistic_B", "df", "p_value", "alpha", "reject_h0"):
        assert key in bm
    assert bm["alpha"] == 0.01
    assert bm["reject_h0"] == (bm["p_value"] < 0.01)


def test_gen_fleet_deterministic(tmp_path, capsys):
    for name in ("a", "b"):
        code, out, _ = run(capsys, "gen-fleet", "--seed", 7, "--out", tmp_path / name, *SMALL)
        assert code == 0
        assert out.startswith("effective config: ")
    for f in ("roster.csv", "profiles.csv", "truth.csv", "fleet.cfg", "scans.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_analysis_idempotent_and_inputs_untouched(pipeline, tmp_path):
    root, _ = pipeline
    src = root / "campaign" / "measurements.csv"
    before = src.read_bytes()
    argv = ["analyze", "all", "--measurements", src, "--roster", root / "fleet" / "roster.csv",
            "--quartiles", root / "dose" / "quartiles.csv", "--out", tmp_path]
    assert main([str(a) for a in argv]) == 0
    assert src.read_bytes() == before
    for f in (root / "analysis").iterdir():
        assert (tmp_path / f.name).read_bytes() == f.read_bytes()


def test_resume_complete_adds_nothing(pipeline, tmp_path, capsys):
    root, _ = pipeline
    code, out, _ = run(capsys, "run-campaign", "--fleet", root / "fleet", "--out", tmp_path,
                       "--iterations", 4, "--workers", 1,
                       "--resume", root / "campaign" / "measurements.csv")
    assert code == 0
    assert (tmp_path / "measurements.csv").read_bytes() == \
        (root / "campaign" / "measurements.csv").read_bytes()


def test_place_command(tmp_path, capsys):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"grid_width": 10, "grid_height": 10, "n_ro": 4, "min_spacing": 4}))
    code, out, _ = run(capsys, "place", "--spec", spec, "--out", tmp_path / "ro.constraints")
    assert code == 0 and last_json(out) == {"placed": 4}
    assert (tmp_path / "ro.constraints").read_text().startswith("pdmfleet-constraints 1\n")


def test_place_infeasible_exit_1(tmp_path, capsys):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"grid_width": 10, "grid_height": 10, "n_ro": 4, "footprint_w": 2,
                                "footprint_h": 2, "min_spacing": 10}))
    code, _, err = run(capsys, "place", "--spec", spec, "--out", tmp_path / "x")
    assert code == 1 and "RO" in err


@pytest.mark.parametrize("argv", [
    ["no-such-command"],
    ["gen-fleet"],
    ["gen-fleet", "--out", "x", "--bogus"],
    ["gen-fleet", "--out", "x", "--set", "nonsense"],
    ["gen-fleet", "--out", "x", "--set", "n_ro=-1"],
    ["place", "--spec", "/nonexistent.json", "--out", "x"],
    ["analyze", "hist", "--measurements", "/nonexistent.csv", "--roster", "r", "--out", "o"],
])
def test_invalid_input_exit_1(argv, capsys, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    code, _, err = run(capsys, *argv)
    assert code == 1
    assert err


def test_unknown_family_exit_1(pipeline, capsys):
    root, _ = pipeline
    code, _, err = run(capsys, "train", "--measurements", root / "campaign" / "measurements.csv",
                       "--roster", root / "fleet" / "roster.csv", "--doses",
                       root / "dose" / "doses.csv", "--out", root / "x", "--families", "Nope")
    assert code == 1 and "Nope" in err


def test_malformed_measurements_exit_1(pipeline, tmp_path, capsys):
    root, _ = pipeline
    bad = tmp_path / "m.csv"
    lines = (root / "campaign" / "measurements.csv").read_text().splitlines()
    lines[3] = lines[3].replace(",0.5,", ",0.25,", 1)
    bad.write_text("\n".join(lines) + "\n")
    code, _, err = run(capsys, "analyze", "hist", "--measurements", bad,
                       "--roster", root / "fleet" / "roster.csv", "--out", tmp_path / "o")
    assert code == 1 and "line 4" in err


def test_all_devices_failing_exit_2(pipeline, tmp_path, capsys):
    root, _ = pipeline
    code, _, err = run(capsys, "run-campaign", "--fleet", root / "fleet", "--out", tmp_path,
                       "--iterations", 1, "--n-ro", 5, "--workers", 1)
    assert code == 2 and "every device failed" in err


def test_help_exit_0(capsys):
    with pytest.raises(SystemExit) as exc:
        raise SystemExit(main(["--help"]))
    assert exc.value.code == 0
