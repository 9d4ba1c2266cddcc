import json
from pathlib import Path

import numpy as np
import pytest

from sharp_neuron.cli import (
    EXIT_CONFIG,
    EXIT_OK,
    SWEEP_AGG_HEADER,
    SWEEP_HEADER,
    TRACE_HEADER,
    main,
    parse_config_file,
)

FAST = ["--T", "40", "--N", "8", "--d", "5", "--eps", "0.01", "--mu", "0.1",
        "--holdout_n", "256"]


def run_cli(*argv):
    return main(list(argv))


def strip_wallclock(csv_text: str) -> list[str]:
    rows = []
    for line in csv_text.strip().splitlines():
        cols = line.split(",")
        rows.append(",".join(cols[:-1]))  # wallclock_ms is the last column
    return rows


def test_run_minimal_structure(tmp_path):
    out = tmp_path / "r"
    code = run_cli("run", "--out", str(out), "--seeds", "1,2", *FAST)
    assert code == EXIT_OK
    trace = (out / "trace.csv").read_text().splitlines()
    assert trace[0] == TRACE_HEADER
    assert len(trace) == 1 + 2 * 41  # header + (T+1) rows per seed
    summary = json.loads((out / "summary.json").read_text())
    for key in ("T", "N", "eta", "M", "r_eps", "mu", "degenerate_m"):
        assert key in summary["resolved"]
    assert set(summary["seeds"]) == {"1", "2"}
    assert summary["opt_certificate"] == 0.0


def test_run_is_deterministic_modulo_wallclock(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert run_cli("run", "--out", str(out), "--seeds", "3,4", *FAST) == EXIT_OK
    ta = strip_wallclock((a / "trace.csv").read_text())
    tb = strip_wallclock((b / "trace.csv").read_text())
    assert ta == tb
    sa = json.loads((a / "summary.json").read_text())
    sb = json.loads((b / "summary.json").read_text())
    for seed in ("3", "4"):
        assert sa["seeds"][seed]["w_final"] == sb["seeds"][seed]["w_final"]


def test_unknown_activation_exits_config(tmp_path):
    code = run_cli("run", "--out", str(tmp_path / "x"), "--activation", "sigmoid", *FAST)
    assert code == EXIT_CONFIG


def test_bad_override_exits_config(tmp_path):
    code = run_cli("run", "--out", str(tmp_path / "x"), "--T")  # missing value
    assert code == EXIT_CONFIG


def test_numeric_abort_exit_code(tmp_path):
    code = run_cli("run", "--out", str(tmp_path / "x"), "--seeds", "1",
                   "--T", "100", "--N", "4", "--d", "4", "--eta", "1e200")
    assert code == 3


def test_config_file_and_override_precedence(tmp_path):
    cfg = tmp_path / "exp.cfg"
    cfg.write_text("# comment\nd = 6\nactivation = relu\nT = 30\nN = 8\n")
    parsed = parse_config_file(str(cfg))
    assert parsed == {"d": "6", "activation": "relu", "T": "30", "N": "8"}
    out = tmp_path / "run"
    code = run_cli("run", "--config", str(cfg), "--out", str(out),
                   "--seeds", "1", "--d", "4", "--holdout_n", "128")
    assert code == EXIT_OK
    summary = json.loads((out / "summary.json").read_text())
    assert summary["config"]["d"] == "4"  # CLI override wins
    assert len(summary["wstar"]) == 4


def test_bad_config_line_raises(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("just a line without equals\n")
    code = run_cli("run", "--config", str(cfg), "--out", str(tmp_path / "o"))
    assert code == EXIT_CONFIG


def test_sweep_degenerate_equals_run(tmp_path):
    out_r = tmp_path / "run"
    out_s = tmp_path / "sweep"
    assert run_cli("run", "--out", str(out_r), "--seeds", "5", *FAST) == EXIT_OK
    assert run_cli("sweep", "--out", str(out_s), "--seeds", "5",
                   "--axis", "eps", "--values", "0.01", *FAST) == EXIT_OK
    summary = json.loads((out_r / "summary.json").read_text())
    final_run = summary["seeds"]["5"]["final_l2_holdout"]
    lines = (out_s / "sweep.csv").read_text().strip().splitlines()
    assert lines[0] == SWEEP_HEADER
    _, seed, final_sweep, cert, _ = lines[1].split(",")
    assert int(seed) == 5
    assert float(final_sweep) == final_run


def test_sweep_noise_levels_and_aggregate(tmp_path):
    out = tmp_path / "s"
    code = run_cli("sweep", "--out", str(out), "--seeds", "1,2,3",
                   "--axis", "noise_level", "--values", "0.05,0.2",
                   "--T", "400", "--N", "16", "--d", "5", "--eta", "0.02",
                   "--holdout_n", "2048")
    assert code == EXIT_OK
    agg = (out / "sweep_agg.csv").read_text().strip().splitlines()
    assert agg[0] == SWEEP_AGG_HEADER
    rows = [line.split(",") for line in agg[1:]]
    medians = {float(r[0]): float(r[1]) for r in rows}
    assert medians[0.05] <= medians[0.2]  # final loss grows with noise


def test_probe_gradcheck_passes(tmp_path):
    assert run_cli("probe", "--which", "gradcheck", "--activation", "swish") == EXIT_OK


def test_probe_tails_laplace(tmp_path):
    assert run_cli("probe", "--which", "tails", "--distribution", "laplace",
                   "--d", "4") == EXIT_OK


def test_probe_sharpness_small(tmp_path):
    assert run_cli("probe", "--which", "sharpness", "--d", "4") == EXIT_OK


def test_auto_mu_runs(tmp_path):
    out = tmp_path / "auto"
    code = run_cli("run", "--out", str(out), "--seeds", "1", "--mu", "auto",
                   "--T", "40", "--N", "8", "--d", "4", "--holdout_n", "128")
    assert code == EXIT_OK
    summary = json.loads((out / "summary.json").read_text())
    assert 0.0 < summary["resolved"]["mu"] < 1.0


def test_csv_floats_round_trip(tmp_path):
    out = tmp_path / "rt"
    assert run_cli("run", "--out", str(out), "--seeds", "1", *FAST) == EXIT_OK
    lines = (out / "trace.csv").read_text().strip().splitlines()[1:]
    # 17 significant digits round-trip through float exactly
    for line in lines[:5]:
        for tok in line.split(",")[2:]:
            val = float(tok)
            assert format(val, ".17g") == tok
