"""CLI contract tests: exit codes, help coverage, determinism, goldens.

Everything runs main() in-process (fast, capturable); one test runs the
installed console script for real to prove the entry point is wired.
"""

import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from gapracer.cli import main
from gapracer.config import RunConfig

FIXTURES = Path(__file__).parent / "fixtures"

# frozen output of the barrier filter on the committed near-wall scan
# (left wall ~1.0 m away at speed 5: the evasive right steer gets capped)
NEARWALL_DELTA_STAR = "-0.07052516685922894"


# ---- exit codes ---------------------------------------------------------------


def test_no_subcommand_is_usage_error(capsys):
    assert main([]) == 1
    assert "usage" in capsys.readouterr().err.lower()


def test_zero_episodes_is_usage_error(capsys):
    assert main(["gen-data", "--episodes", "0"]) == 1
    assert "positive" in capsys.readouterr().err


def test_unknown_model_lists_valid_names(capsys):
    assert main(["train", "--model", "transformer", "--data", "x.log"]) == 1
    err = capsys.readouterr().err
    assert "pi-attnp" in err and "res-mlp" in err


def test_ftg_takes_no_ckpt(capsys):
    assert main(["race", "--policy", "ftg", "--ckpt", "m.ckpt"]) == 1
    assert "no --ckpt" in capsys.readouterr().err


def test_learned_policy_requires_ckpt(capsys):
    assert main(["race", "--policy", "attnp"]) == 1
    assert "requires --ckpt" in capsys.readouterr().err


def test_missing_data_file_is_data_error(capsys):
    assert main(["train", "--model", "attnp", "--data", "no-such.log"]) == 2
    assert "cannot read log" in capsys.readouterr().err


def test_malformed_scan_names_the_line(tmp_path, capsys):
    bad = tmp_path / "scan.txt"
    bad.write_text("1.0\n2.0\nabc\n")
    assert main(["filter-demo", "--scan-file", str(bad),
                 "--delta-raw", "0.1", "--v", "1.0"]) == 2
    assert ":3:" in capsys.readouterr().err


def test_nonpositive_beam_is_data_error(tmp_path, capsys):
    bad = tmp_path / "scan.txt"
    bad.write_text("1.0\n-2.0\n")
    assert main(["filter-demo", "--scan-file", str(bad),
                 "--delta-raw", "0.1", "--v", "1.0"]) == 2
    assert ":2:" in capsys.readouterr().err


def test_config_file_errors(tmp_path, capsys):
    scan = tmp_path / "scan.txt"
    scan.write_text("5.0\n5.0\n5.0\n")
    unknown = tmp_path / "bad.json"
    unknown.write_text('{"warp_drive": 1}')
    assert main(["filter-demo", "--scan-file", str(scan), "--delta-raw", "0",
                 "--v", "1", "--config", str(unknown)]) == 2
    assert "warp_drive" in capsys.readouterr().err
    notjson = tmp_path / "notjson.json"
    notjson.write_text("{oops")
    assert main(["filter-demo", "--scan-file", str(scan), "--delta-raw", "0",
                 "--v", "1", "--config", str(notjson)]) == 2


# ---- filter-demo --------------------------------------------------------------


def test_filter_demo_passthrough(tmp_path, capsys):
    scan = tmp_path / "clear.txt"
    scan.write_text("\n".join(["20.0"] * 360) + "\n")
    assert main(["filter-demo", "--scan-file", str(scan),
                 "--delta-raw", "0.2", "--v", "3.0"]) == 0
    out = capsys.readouterr().out
    assert "delta_star   0.2" in out
    assert "active       False" in out
    assert "feasible     True" in out
    assert "h            19.9" in out


def test_filter_demo_nearwall_golden(capsys):
    assert main(["filter-demo", "--scan-file",
                 str(FIXTURES / "oval_nearwall_scan.txt"),
                 "--delta-raw", "-0.3", "--v", "5.0"]) == 0
    out = capsys.readouterr().out
    assert f"delta_star   {NEARWALL_DELTA_STAR}" in out
    assert "active       True" in out
    assert "feasible     True" in out
    assert "raw_clamped  False" in out


def test_filter_demo_config_precedence(tmp_path, capsys):
    scan = tmp_path / "clear.txt"
    scan.write_text("\n".join(["20.0"] * 36) + "\n")
    cfg = tmp_path / "cfg.json"
    cfg.write_text('{"d_safe": 0.05}')
    main(["filter-demo", "--scan-file", str(scan), "--delta-raw", "0",
          "--v", "1", "--config", str(cfg)])
    assert "h            19.95" in capsys.readouterr().out
    # explicit flag beats the file
    main(["filter-demo", "--scan-file", str(scan), "--delta-raw", "0",
          "--v", "1", "--config", str(cfg), "--d-safe", "0.1"])
    assert "h            19.9" in capsys.readouterr().out


def test_out_of_range_filter_knob_is_config_error(tmp_path, capsys):
    scan = tmp_path / "clear.txt"
    scan.write_text("20.0\n20.0\n")
    assert main(["filter-demo", "--scan-file", str(scan), "--delta-raw", "0",
                 "--v", "1", "--d-safe", "0.3"]) == 2
    assert "d_safe" in capsys.readouterr().err
    assert main(["race", "--policy", "ftg", "--cbf", "on",
                 "--config", str(_alpha_cfg(tmp_path))]) == 2
    assert "alpha" in capsys.readouterr().err


def _alpha_cfg(tmp_path):
    p = tmp_path / "alpha.json"
    p.write_text('{"alpha": -1.0}')
    return p


# ---- help ----------------------------------------------------------------------


@pytest.mark.parametrize("cmd", ["gen-data", "train", "race", "filter-demo"])
def test_help_documents_every_knob(cmd, capsys):
    assert main([cmd, "--help"]) == 0
    out = capsys.readouterr().out
    for key, val in RunConfig().to_dict().items():
        assert f"{key} = {val}" in out


# ---- pipeline smoke + determinism ----------------------------------------------


def test_gen_data_deterministic_and_provenanced(tmp_path, capsys):
    a, b = tmp_path / "a.log", tmp_path / "b.log"
    for out in (a, b):
        assert main(["gen-data", "--tracks", "oval", "--episodes", "1",
                     "--seed", "5", "--out", str(out)]) == 0
    assert a.read_bytes() == b.read_bytes()
    lines = a.read_text().splitlines()
    header = json.loads(lines[0])
    assert header["run_config"]["episodes"] == 1
    assert header["run_config"]["tracks"] == "oval"
    n_records = sum(1 for ln in lines if '"type": "record"' in ln)
    assert n_records >= 1000


def test_train_smoke_checkpoint_and_series(tmp_path, demo_log_path, capsys):
    ckpt = tmp_path / "m.ckpt"
    rd = tmp_path / "reports"
    assert main(["train", "--model", "res-mlp", "--data", str(demo_log_path),
                 "--steps", "3", "--out", str(ckpt),
                 "--report-dir", str(rd)]) == 0
    out = capsys.readouterr().out
    assert "final eval mae" in out
    assert ckpt.exists()
    csv = rd / "convergence_res-mlp_seed0.csv"
    body = csv.read_text().splitlines()
    assert body[1] == "step,loss,mae,nll"
    assert len(body) == 2 + 4          # header rows + steps 0..3
    cfg = json.loads(body[0].removeprefix("# config "))
    assert cfg["run_config"]["steps"] == 3


def test_race_cli_cbf_column_toggle(tmp_path, capsys):
    on, off = tmp_path / "on", tmp_path / "off"
    for cbf, out in (("on", on), ("off", off)):
        assert main(["race", "--policy", "ftg", "--track", "oval",
                     "--laps", "1", "--cbf", cbf, "--out", str(out)]) == 0
    def cells(d):
        lines = (d / "race_runs.csv").read_text().splitlines()
        header, row = lines[1].split(","), lines[2].split(",")
        return dict(zip(header, row))
    with_f, without_f = cells(on), cells(off)
    assert with_f["feasible_frac"] != "" and float(with_f["feasible_frac"]) > 0
    assert without_f["feasible_frac"] == ""
    assert with_f["collisions"] == without_f["collisions"] == "0"
    assert (on / "race_timing.txt").exists()
    # exit 0 even though a lap may contain collisions: failures are data
    assert "avg ttf" in capsys.readouterr().out


def test_console_script_is_wired():
    proc = subprocess.run(["gapracer", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert "gen-data" in proc.stdout and "filter-demo" in proc.stdout
