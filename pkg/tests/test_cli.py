import csv
import json
import math
import os

import pytest

from ffrelay.cli import EXIT_CONFIG, EXIT_IO, EXIT_OK, EXIT_SOLVER, main, parse_range, parse_value


def _csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_parse_range_inclusive():
    assert parse_range("0:1:0.25") == [0.0, 0.25, 0.5, 0.75, 1.0]
    assert parse_value("0.5, 1:2:0.5", [0.0]) == [0.5, 1.0, 1.5, 2.0]
    assert parse_value("off", True) is False


def test_noisyfb_corner_snrs(tmp_path):
    out = tmp_path / "fb"
    assert main(["noisyfb", "--sigma_w2", "inf", "--sigma_n2", "0", "--out", str(out)]) == EXIT_OK
    row = _csv(out / "noisyfb.csv")[0]
    assert math.isclose(float(row["snr"]), 3.0, rel_tol=1e-9)
    assert set(row) == {"g1", "g2", "f21", "h1", "snr", "mu2", "mu3", "relay_power_saturated", "method"}
    man = json.loads((out / "manifest.json").read_text())
    assert man["command"] == "noisyfb" and man["outputs"] == ["noisyfb.csv"]


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# comment\nrho = 2\nsigma_w2 = 1\ngamma = 0.5\n")
    out = tmp_path / "o"
    assert main(["bound-ma1", "--config", str(cfg), "--rho", "1", "--resolution", "0.01", "--out", str(out)]) == 0
    params = json.loads((out / "manifest.json").read_text())["parameters"]
    assert params["rho"] == 1.0 and params["gamma"] == 0.5


def test_manifest_replay_is_byte_identical(tmp_path):
    a = tmp_path / "a"
    assert main(["noisyfb-sweep", "--sigma_n2", "0.1", "--h1_step", "0.01", "--out", str(a)]) == 0
    b = tmp_path / "b"
    assert main(["--from-manifest", str(a / "manifest.json"), "--out", str(b)]) == 0
    for name in ("noisyfb_sweep.csv", "manifest.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_unknown_key_is_config_error(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("rho = 1\nwidth = 3\n")
    out = tmp_path / "o"
    assert main(["noisyfb", "--config", str(cfg), "--out", str(out)]) == EXIT_CONFIG
    rec = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert rec["exit_code"] == EXIT_CONFIG and rec["status"] == "error"
    assert json.loads((out / "error.json").read_text()) == rec


@pytest.mark.parametrize("argv", [["noisyfb", "--rho", "-1"], ["noisyfb", "--rho", "abc"], ["nonsense"],
                                  ["block", "--normalization", "weird"], ["fig3", "--gamma", "2:0:0.1"]])
def test_config_errors(argv, tmp_path):
    assert main(argv + ["--out", str(tmp_path / "o")]) == EXIT_CONFIG


def test_solver_error_exit(tmp_path):
    # a relay tap outside the unit disk has no stable effective noise
    assert main(["block", "--taps", "5", "--out", str(tmp_path / "o")]) == EXIT_SOLVER


def test_io_error_exit(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["noisyfb", "--out", str(blocker / "sub")]) == EXIT_IO


def test_no_partial_files_left(tmp_path):
    out = tmp_path / "o"
    main(["noisyfb", "--out", str(out)])
    assert not [f for f in os.listdir(out) if f.endswith(".tmp")]


def test_block_command(tmp_path):
    out = tmp_path / "b"
    assert main(["block", "--n", "8", "--out", str(out)]) == 0
    man = json.loads((out / "manifest.json").read_text())
    assert man["report"]["certificate"]["strictly_lower"]


def test_bits_flag_converts_rates(tmp_path):
    a, b = tmp_path / "n", tmp_path / "b"
    common = ["bound-ma1", "--resolution", "0.01", "--sigma_w2", "0.1"]
    assert main(common + ["--out", str(a)]) == 0
    assert main(common + ["--bits", "--out", str(b)]) == 0
    na = float(_csv(a / "bound_ma1.csv")[0]["rate_nats"])
    rb = _csv(b / "bound_ma1.csv")[0]
    bits_key = [k for k in rb if k.startswith("rate")][0]
    assert math.isclose(float(rb[bits_key]), na / math.log(2), rel_tol=1e-9)


def test_simulate_collapse_schema(tmp_path):
    out = tmp_path / "s"
    argv = ["simulate", "--n_list", "10,20", "--trials", "2000", "--rate_fraction", "0.5", "--out", str(out)]
    assert main(argv) == 0
    rows = _csv(out / "simulate.csv")
    assert list(rows[0]) == ["N", "M", "trials", "ser", "empirical_rate", "bound_rate"]
    assert [int(r["N"]) for r in rows] == [10, 20]


def test_fig4_report(tmp_path):
    out = tmp_path / "f4"
    assert main(["fig4", "--h1_step", "0.01", "--out", str(out)]) == 0
    rep = json.loads((out / "manifest.json").read_text())["report"]
    assert math.isclose(rep["no_feedback"]["argmax_h1"], 1.0)
    assert (out / "fig4.svg").read_text().startswith("<svg")
