import json
import os

import numpy as np
import pytest

from cmdp_lab._io import format_value, read_csv, write_csv
from cmdp_lab.cli import (
    EXIT_CHECK,
    EXIT_DOMAIN,
    EXIT_OK,
    EXIT_USAGE,
    main,
    parse_grid,
    parse_seeds,
)

TRAIN_ARGS = ["--episodes", "30", "--updates", "4", "--batch-size", "16"]

SMALL_RUNS = {
    "cliffwalk-a": ("cliffwalk-scaling", ["--n-points", "20"]),
    "cliffwalk-b": ("cliffwalk-scaling",
                    ["--variant", "b", "--n-points", "12", "--mode", "control"]),
    "simpledir": ("simpledir-error", ["--dc-grid", "log:1e-3:1e-1:5"]),
    "gradcheck": ("pendulum-gradcheck", ["--trials", "4", "--steps", "10"]),
    "bounds-1": ("bounds-check", ["--theorem", "1", "--trials", "10"]),
    "bounds-3": ("bounds-check", ["--theorem", "3", "--trials", "2", "--states", "3",
                                  "--actions", "2"]),
    "bounds-4": ("bounds-check", ["--theorem", "4", "--trials", "2"]),
    "train": ("train", ["--mode", "cse", "--seeds", "0,1", *TRAIN_ARGS]),
    "compare": ("compare", ["--seeds", "0..1", "--episodes-per-context", "4", *TRAIN_ARGS]),
}


def run(tmp_path, name, *args):
    out = tmp_path / name
    code = main([args[0], *args[1:], "--out", str(out)])
    return code, out


def data_files(folder):
    return {f: (folder / f).read_bytes() for f in sorted(os.listdir(folder))}


# --- parsing helpers ------------------------------------------------------------


def test_parse_seeds():
    assert parse_seeds("0..3") == [0, 1, 2, 3]
    assert parse_seeds("1,4,7") == [1, 4, 7]
    assert parse_seeds("5") == [5]


def test_parse_grid():
    np.testing.assert_allclose(parse_grid("log:1e-3:1e-1:3"), [1e-3, 1e-2, 1e-1])
    np.testing.assert_allclose(parse_grid("lin:0:1:3"), [0.0, 0.5, 1.0])
    np.testing.assert_allclose(parse_grid("0.1,0.2"), [0.1, 0.2])


def test_csv_format(tmp_path):
    path = tmp_path / "x.csv"
    write_csv(path, ["a", "b"], [(0.1, 3), {"a": 1 / 3, "b": True}])
    lines = path.read_text().splitlines()
    assert lines == ["a,b", "0.1,3", "0.3333333333333333,true"]
    assert float(read_csv(path)[1]["a"]) == 1 / 3
    assert format_value(np.float64(2.5e-17)) == "2.5e-17"


# --- subcommands ----------------------------------------------------------------


def test_cliffwalk_scaling_outputs(tmp_path):
    code, out = run(tmp_path, "cw", "cliffwalk-scaling", "--n-points", "30")
    assert code == EXIT_OK
    rows = read_csv(out / "scaling.csv")
    assert list(rows[0]) == ["dc_norm", "q_error"]
    zero = [r for r in rows if float(r["dc_norm"]) == 0.0]
    assert zero and float(zero[0]["q_error"]) <= 1e-10
    summary = json.loads((out / "summary.json").read_text())
    assert {"slope", "intercept", "r_squared", "fit_points"} <= set(summary)
    assert 1.85 <= summary["slope"] <= 2.15


def test_cliffwalk_dc_zero_only(tmp_path):
    code, out = run(tmp_path, "cw0", "cliffwalk-scaling", "--n-points", "0")
    assert code == EXIT_OK
    rows = read_csv(out / "scaling.csv")
    assert len(rows) == 1 and float(rows[0]["q_error"]) <= 1e-10


def test_cliffwalk_too_large_perturbation(tmp_path):
    code, _ = run(tmp_path, "big", "cliffwalk-scaling", "--n-points", "5", "--dc-max", "5")
    assert code == EXIT_DOMAIN


def test_simpledir_error_rows(tmp_path):
    code, out = run(tmp_path, "sd", "simpledir-error", "--dc-grid", "0,1e-3,1e-2,1e-1")
    assert code == EXIT_OK
    rows = read_csv(out / "simpledir_error.csv")
    assert list(rows[0]) == ["dc_norm", "v_error", "closed_form_error"]
    assert float(rows[0]["v_error"]) == 0.0
    for r in rows:
        assert abs(float(r["v_error"]) - float(r["closed_form_error"])) <= 1e-9


@pytest.mark.parametrize("grid", ["log:1:2", "foo", "lin:a:b:3", ""])
def test_simpledir_bad_grid(tmp_path, grid):
    code, _ = run(tmp_path, "bad", "simpledir-error", "--dc-grid", grid)
    assert code == EXIT_USAGE


def test_gradcheck(tmp_path):
    code, out = run(tmp_path, "gc", "pendulum-gradcheck", "--trials", "5", "--steps", "20")
    assert code == EXIT_OK
    rep = json.loads((out / "gradcheck.json").read_text())
    assert rep["passed"] and rep["trials"] == 5
    code, _ = run(tmp_path, "gc0", "pendulum-gradcheck", "--h", "0")
    assert code == EXIT_USAGE


def test_gradcheck_failure_exits_4(tmp_path, monkeypatch):
    import cmdp_lab.cli as cli

    monkeypatch.setattr(cli, "GRADCHECK_TOL", 0.0)
    code, _ = run(tmp_path, "gcf", "pendulum-gradcheck", "--trials", "3", "--steps", "10")
    assert code == EXIT_CHECK


def test_bounds_check_degenerate_and_discards(tmp_path):
    code, out = run(tmp_path, "b1", "bounds-check", "--states", "1", "--actions", "1",
                    "--trials", "10")
    assert code == EXIT_OK
    rep = json.loads((out / "theorem1.json").read_text())
    assert rep["passed"] == rep["trials"] == 10
    code, out = run(tmp_path, "b2", "bounds-check", "--trials", "10", "--gamma-min", "0.97",
                    "--gamma-max", "0.99")
    rep = json.loads((out / "theorem1.json").read_text())
    assert code == EXIT_OK and rep["discarded_premise"] > 0


def test_bounds_check_violation_exits_4(tmp_path, monkeypatch):
    import cmdp_lab.bounds as bounds

    monkeypatch.setattr(bounds, "theorem1_bound", lambda *a, **k: -1.0)
    code, _ = run(tmp_path, "bv", "bounds-check", "--trials", "3")
    assert code == EXIT_CHECK


def test_unknown_mode_and_bad_flags(tmp_path):
    assert run(tmp_path, "t", "train", "--mode", "sac")[0] == EXIT_USAGE
    assert run(tmp_path, "c", "compare", "--modes", "cse,sac")[0] == EXIT_USAGE
    assert run(tmp_path, "c1", "compare", "--seeds", "3")[0] == EXIT_USAGE
    assert main(["no-such-command"]) == EXIT_USAGE
    assert run(tmp_path, "g", "cliffwalk-scaling", "--gamma", "1.5")[0] == EXIT_USAGE


def test_cse_without_perturbation_matches_baseline_files(tmp_path):
    args = ["--seeds", "2", *TRAIN_ARGS, "--epsilon-perturb", "0"]
    assert run(tmp_path, "base", "train", "--mode", "baseline", *args)[0] == EXIT_OK
    assert run(tmp_path, "cse", "train", "--mode", "cse", *args)[0] == EXIT_OK
    base = (tmp_path / "base" / "learning_curve.csv").read_text()
    cse = (tmp_path / "cse" / "learning_curve.csv").read_text()
    assert base.replace("baseline,", "cse,") == cse
    qb = json.loads((tmp_path / "base" / "q_baseline_seed2.json").read_text())
    qc = json.loads((tmp_path / "cse" / "q_cse_seed2.json").read_text())
    assert qb["values"] == qc["values"]

    q_files = [str(tmp_path / "base" / "q_baseline_seed2.json"),
               str(tmp_path / "cse" / "q_cse_seed2.json")]
    assert run(tmp_path, "ev", "eval", "--q", *q_files, "--episodes-per-context", "4")[0] == 0
    rows = read_csv(tmp_path / "ev" / "eval.csv")
    by_mode = {m: [r["mean_return"] for r in rows if r["mode"] == m] for m in ("baseline", "cse")}
    assert by_mode["baseline"] == by_mode["cse"]


def test_eval_out_of_range_context(tmp_path):
    assert run(tmp_path, "tr", "train", "--seeds", "0", *TRAIN_ARGS)[0] == EXIT_OK
    q = str(tmp_path / "tr" / "q_baseline_seed0.json")
    assert run(tmp_path, "ev", "eval", "--q", q, "--contexts", "0.9,0")[0] == EXIT_DOMAIN
    assert run(tmp_path, "ev2", "eval", "--q", str(tmp_path / "missing.json"))[0] == EXIT_USAGE


def test_compare_outputs_ci_columns(tmp_path):
    code, out = run(tmp_path, "cmp", "compare", *SMALL_RUNS["compare"][1])
    assert code == EXIT_OK
    summary = read_csv(out / "compare_summary.csv")
    assert list(summary[0]) == ["mode", "ring_mean", "ci95_halfwidth", "ci95_low", "ci95_high"]
    assert [r["mode"] for r in summary] == ["baseline", "cse", "ldr"]
    report = json.loads((out / "compare_summary.json").read_text())
    assert set(report["ordering"]) == {"cse_ge_baseline", "cse_close_to_ldr"}


# --- manifests and determinism --------------------------------------------------


@pytest.mark.parametrize("key", sorted(SMALL_RUNS))
def test_rerun_is_bit_identical(tmp_path, key):
    command, args = SMALL_RUNS[key]
    code, first = run(tmp_path, "first", command, *args)
    assert code == EXIT_OK
    manifest = json.loads((first / "manifest.json").read_text())
    assert manifest["subcommand"] == command
    assert {"params", "seed", "version", "outputs"} <= set(manifest)
    for f in manifest["outputs"]:
        assert (first / f).exists()
    second = tmp_path / "second"
    assert main(["rerun", str(first / "manifest.json"), "--out", str(second)]) == EXIT_OK
    assert data_files(first) == data_files(second)


def test_rerun_eval_is_bit_identical(tmp_path):
    assert run(tmp_path, "tr", "train", "--mode", "ldr", "--seeds", "1", *TRAIN_ARGS)[0] == 0
    q = str(tmp_path / "tr" / "q_ldr_seed1.json")
    code, first = run(tmp_path, "first", "eval", "--q", q, "--episodes-per-context", "4")
    assert code == EXIT_OK
    second = tmp_path / "second"
    assert main(["rerun", str(first / "manifest.json"), "--out", str(second)]) == EXIT_OK
    assert data_files(first) == data_files(second)


def test_rerun_missing_manifest(tmp_path):
    assert main(["rerun", str(tmp_path / "nope.json")]) == EXIT_USAGE


def test_no_temp_files_left(tmp_path):
    code, out = run(tmp_path, "sd", "simpledir-error")
    assert code == EXIT_OK
    assert not [f for f in os.listdir(out) if f.startswith(".tmp-")]
