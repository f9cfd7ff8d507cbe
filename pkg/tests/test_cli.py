import csv
import json
from pathlib import Path

import pytest

from aca.cli import build_parser, main
from aca.dataset import REAL_COVARIATES

SPEC = {
    "users": [
        {"user_id": "A", "n": 40, "response": "piecewise-flat-with-outliers",
         "outliers": {"covariate": "fiber", "value": 50.0, "count": 2}},
        {"user_id": "B", "n": 88, "response": "quadratic", "noise_law": "heteroscedastic",
         "meal_counts": {"breakfast": 16, "lunch": 19, "dinner": 44, "other": 9}},
        {"user_id": "C", "n": 10},
    ]
}
FAST = ["--bootstrap-iters", "4", "--bootstrap-size", "60", "--n-init", "1", "--max-sweeps", "60", "--threshold", "30"]


@pytest.fixture(scope="module")
def spec(tmp_path_factory):
    p = tmp_path_factory.mktemp("spec") / "spec.json"
    p.write_text(json.dumps(SPEC))
    return p


def tree(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def full_run(spec, tmp_path_factory):
    out = tmp_path_factory.mktemp("run") / "out"
    assert main(["run", "--synth", str(spec), "--out", str(out), "--seed", "3", *FAST]) == 0
    return out


def test_skips_small_user_and_logs_it(full_run, spec, tmp_path, capsys):
    log = json.loads((full_run / "run_log.json").read_text())
    assert {"user_id": "C", "subset": "*"}.items() <= log["skipped"][0].items()
    assert "30" in log["skipped"][0]["reason"]
    assert not (full_run / "curves" / "C").exists()
    main(["run", "--synth", str(spec), "--out", str(tmp_path / "o"), "--users", "C", *FAST])
    assert "skipped C" in capsys.readouterr().err


def test_forty_curve_files_per_user(full_run):
    files = sorted((full_run / "curves" / "B").rglob("*.json"))
    assert len(files) == 5 * 4 * 2
    rec = json.loads(files[0].read_text())
    assert list(rec) == ["model", "user_id", "subset", "covariate", "units", "eval_points", "mean", "lower", "upper", "level", "seed"]
    assert rec["level"] == 0.95 and rec["seed"] == 3
    assert len(rec["eval_points"]) == len(rec["mean"]) == len(rec["lower"]) == len(rec["upper"]) == 11
    assert {p.parent.name for p in files} == {"all", "breakfast", "lunch", "dinner"}
    assert {p.stem.split("__")[1] for p in files} == set(REAL_COVARIATES)


def test_run_log_records_resolved_defaults(full_run):
    log = json.loads((full_run / "run_log.json").read_text())
    cfg = log["config"]
    assert cfg["aca"]["d"] == 2 and cfg["aca"]["lam"] == 0.03 and cfg["aca"]["seed"] == 3
    assert cfg["grid_nodes"] == 11 and cfg["seed"] == 3 and cfg["bootstrap"]["iterations"] == 4


def test_tables(full_run):
    with open(full_run / "metrics.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    head = ["user_id", "subset", "model", "rmse_full", "rmse_marginal", "coverage_mean_pct"]
    assert list(rows[0])[:6] == head
    assert {f"coverage_{c}_pct" for c in REAL_COVARIATES} <= set(rows[0])
    assert {(r["user_id"], r["model"]) for r in rows} == {(u, m) for u in "AB" for m in ("aca", "linreg")}
    for r in rows:
        assert float(r["rmse_full"]) >= 0 and 0 <= float(r["coverage_mean_pct"]) <= 100
    with open(full_run / "ranges.csv", newline="") as f:
        ranges = list(csv.DictReader(f))
    assert list(ranges[0]) == ["user_id", "subset", "covariate", "threshold", "kind", "lo", "hi"]
    assert {r["kind"] for r in ranges} <= {"above", "below"}
    assert (full_run / "bends.csv").read_text().startswith("user_id,subset,model,covariate,max_bend_deg")


def test_same_seed_twice_and_any_concurrency_is_byte_identical(full_run, spec, tmp_path):
    again = tmp_path / "again"
    threaded = tmp_path / "threaded"
    assert main(["run", "--synth", str(spec), "--out", str(again), "--seed", "3", *FAST]) == 0
    assert main(["run", "--synth", str(spec), "--out", str(threaded), "--seed", "3", "--jobs", "4", *FAST]) == 0
    base = tree(full_run)
    assert tree(again) == base
    # the job count is scheduling only and is not part of any output
    assert tree(threaded) == base


def test_stages_reproduce_the_full_run(full_run, spec, tmp_path):
    out = tmp_path / "staged"
    for stage in ("fit", "bootstrap", "marginal", "evaluate", "ranges"):
        assert main([stage, "--synth", str(spec), "--out", str(out), "--seed", "3", *FAST]) == 0
    staged = tree(out)
    expected = {k: v for k, v in tree(full_run).items() if k != "run_log.json"}
    assert staged == expected


def test_synth_then_input(spec, tmp_path):
    csv_path = tmp_path / "meals.csv"
    assert main(["synth", "--synth", str(spec), "--seed", "3", "--out", str(csv_path)]) == 0
    assert csv_path.read_text().count("\n") == 1 + 40 + 88 + 10
    out = tmp_path / "o"
    assert main(["run", "--input", str(csv_path), "--out", str(out), "--seed", "3", "--users", "A",
                 "--subsets", "all", *FAST]) == 0
    assert len(list((out / "curves" / "A" / "all").glob("*.json"))) == 10


def test_stage_without_prerequisites_fails(spec, tmp_path, capsys):
    assert main(["evaluate", "--synth", str(spec), "--out", str(tmp_path / "empty"), *FAST]) == 1
    assert "aca: error" in capsys.readouterr().err


def test_bad_input_exits_nonzero(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("user_id,timestamp\nA,2020-01-01\n")
    assert main(["run", "--input", str(bad), "--out", str(tmp_path / "o")]) == 1
    assert "input error" in capsys.readouterr().err
    assert main(["run", "--input", str(tmp_path / "missing.csv"), "--out", str(tmp_path / "o")]) == 1


def test_source_flags_are_exclusive_and_required(spec, tmp_path):
    with pytest.raises(SystemExit) as e:
        main(["run", "--out", str(tmp_path)])
    assert e.value.code == 2
    with pytest.raises(SystemExit):
        main(["run", "--synth", str(spec), "--input", str(spec), "--out", str(tmp_path)])


def test_flag_parsing(spec, tmp_path):
    args = build_parser().parse_args(["run", "--synth", str(spec), "--out", str(tmp_path),
                                      "--lambda", "carbs=0.1,fat=2", "--threshold", "20", "--threshold", "40"])
    assert args.lam == {"carbs": 0.1, "fat": 2.0}
    assert args.threshold == [20.0, 40.0]
    d = build_parser().parse_args(["fit", "--synth", str(spec), "--out", str(tmp_path)])
    assert (d.bootstrap_iters, d.bootstrap_size, d.level, d.min_meals, d.grid_nodes) == (100, 500, 0.95, 30, 11)
    with pytest.raises(SystemExit):
        build_parser().parse_args(["run", "--synth", str(spec), "--out", str(tmp_path), "--lambda", "carbs="])
