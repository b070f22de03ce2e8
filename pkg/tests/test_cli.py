import csv
import json
from pathlib import Path

import pytest

from bellquasi import cli

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def test_unknown_subcommand_is_usage_error(capsys):
    assert cli.main(["frobnicate"]) == 2
    assert "usage" in capsys.readouterr().err


def test_bad_flag_is_usage_error(tmp_path):
    assert cli.main(["value", "--paths", "many", "--out", str(tmp_path)]) == 2


def test_invalid_config_exit_code(tmp_path, capsys):
    doc = json.loads((CONFIGS / "tp1.json").read_text())
    del doc["dimension"]
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(doc))
    assert cli.main(["value", "--config", str(bad), "--out", str(tmp_path)]) == 3
    assert "dimension" in capsys.readouterr().err
    assert cli.main(["value", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == 3
    assert cli.main(["value", "--out", str(tmp_path)]) == 3


def test_value_prints_mean_and_writes_manifest(tmp_path, capsys):
    code = cli.main(["value", "--config", str(CONFIGS / "tp1.json"), "--paths", "2000", "--out", str(tmp_path)])
    assert code == 0
    lines = capsys.readouterr().out.split()
    assert lines[0] == "mean,stderr"
    mean, se = map(float, lines[1].split(","))
    assert abs(mean - 0.25) <= 3 * se + 0.01
    man = json.loads((tmp_path / "manifest_value.json").read_text())
    assert man["subcommand"] == "value" and man["seed"] == 42
    assert (tmp_path / "value.csv").exists()


def test_csv_bodies_reproducible_across_threads(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    base = ["simulate", "--config", str(CONFIGS / "tp1.json"), "--paths", "300", "--seed", "7"]
    assert cli.main(base + ["--out", str(a)]) == 0
    assert cli.main(base + ["--out", str(b), "--threads", "2"]) == 0
    assert (a / "paths.csv").read_bytes() == (b / "paths.csv").read_bytes()
    assert (a / "trace_path0.csv").read_bytes() == (b / "trace_path0.csv").read_bytes()


def test_threads_env_fallback(monkeypatch):
    args = cli.build_parser().parse_args(["value"])
    monkeypatch.setenv("BQL_THREADS", "3")
    assert cli._threads(args) == 3


def test_hjb_subcommand(tmp_path, capsys):
    code = cli.main(["hjb", "--config", str(CONFIGS / "tp1.json"), "--grid-h", "0.0625", "--out", str(tmp_path)])
    assert code == 0
    rep = json.loads((tmp_path / "hjb_report.json").read_text())
    assert abs(rep["u_x0"] - 0.25) < 1e-10
    with open(tmp_path / "solution.csv") as fh:
        assert next(csv.reader(fh)) == ["i", "j", "x1", "x2", "u", "control_index", "residual"]


def test_verify_subset_and_report(tmp_path, capsys):
    code = cli.main(["verify", "--checks", "c06", "--out", str(tmp_path)])
    assert code == 0
    assert capsys.readouterr().out.strip().startswith("PASS")
    assert json.loads((tmp_path / "report.json").read_text())[0]["check_id"].startswith("c06")
    assert cli.main(["report", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "summary.csv").exists()
