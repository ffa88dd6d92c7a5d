"""Tests for the dphype command line."""

import csv
import io
import json

import pytest

from main import EXIT_CONFIG, EXIT_OK, EXIT_ROUND_FAILURE, build_parser, main

SMALL_RUN = "n = 6\nk = 1\nepsilons = 1, inf\nrepetitions = 2\nseed = 3\ndataset.size = 60\ngrid.size = 4\noracle.good_count = 1\n"


def test_calibrate_csv_table(capsys):
    assert main(["--no-log-file", "calibrate", "--epsilons", "1,inf", "-k", "5", "--format", "csv"]) == EXIT_OK
    rows = list(csv.reader(io.StringIO(capsys.readouterr().out)))
    assert rows[0] == ["epsilon", "sigma", "alpha", "eps_achieved"]
    assert len(rows) == 3
    assert 12.0 < float(rows[1][1]) < 13.5
    assert float(rows[2][1]) == 0.0


def test_calibrate_text_table_explains_sigma(capsys):
    assert main(["--no-log-file", "calibrate", "--epsilons", "3"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "standard deviation" in out
    assert "k=5" in out


def test_bound_with_explicit_sigma(capsys):
    assert main(["--no-log-file", "bound", "--gamma", "50", "--h-bad", "95", "--sigma", "3.5"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "lower_bound=1" in out
    assert "vacuous" not in out


def test_bound_flags_vacuous_and_non_positive_gap(capsys):
    main(["--no-log-file", "bound", "--gamma", "1", "--h-bad", "1", "--sigma", "10"])
    assert "vacuous" in capsys.readouterr().out
    main(["--no-log-file", "bound", "--gamma", "0", "--h-bad", "4", "--epsilon", "1"])
    assert "no bound" in capsys.readouterr().out


def test_bound_needs_exactly_one_noise_source():
    with pytest.raises(SystemExit):
        build_parser().parse_args(["bound", "--gamma", "1", "--h-bad", "1"])
    with pytest.raises(SystemExit):
        build_parser().parse_args(["bound", "--gamma", "1", "--h-bad", "1", "--sigma", "1", "--epsilon", "1"])


def test_simulate_writes_csv(tmp_path, capsys):
    output = tmp_path / "sim.csv"
    code = main([
        "--no-log-file", "simulate", "-p", "20", "-n", "30", "-k", "1,5", "--epsilons", "inf",
        "--good-count", "2", "--repetitions", "10", "--seed", "1", "--output", str(output),
    ])
    assert code == EXIT_OK
    with open(output, newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    assert [int(r["k"]) for r in rows] == [1, 5]
    assert "95% CI" in capsys.readouterr().out


def test_run_writes_report(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(SMALL_RUN, encoding="utf-8")
    report = tmp_path / "report.json"
    code = main(["--no-log-file", "run", str(cfg), "--output", str(report), "--format", "json", "--repetitions", "3"])
    assert code == EXIT_OK
    data = json.loads(report.read_text(encoding="utf-8"))
    assert len(data["records"]) == 6
    out = capsys.readouterr().out
    assert "(non-private)" in out
    assert str(report) in out


def test_run_log_file(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(SMALL_RUN, encoding="utf-8")
    log = tmp_path / "dphype.log"
    assert main(["--log-file", str(log), "run", str(cfg), "--output", str(tmp_path / "r.csv")]) == EXIT_OK
    assert "RUN COMPLETE" in log.read_text(encoding="utf-8")


def test_bad_config_exits_with_config_code(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("n = 6\nwarp_factor = 9\n", encoding="utf-8")
    assert main(["--no-log-file", "run", str(cfg), "--output", str(tmp_path / "r.csv")]) == EXIT_CONFIG
    assert not (tmp_path / "r.csv").exists()


def test_missing_config_exits_with_config_code(tmp_path):
    assert main(["--no-log-file", "run", str(tmp_path / "absent.cfg")]) == EXIT_CONFIG


def test_repeated_aborts_exit_with_round_failure_code(tmp_path):
    cfg = tmp_path / "flaky.cfg"
    cfg.write_text(
        "n = 5\nk = 1\nepsilons = 1, inf\nrepetitions = 5\nseed = 0\ndataset.size = 50\n"
        "grid.size = 4\noracle.good_count = 1\ndropout_rate = 0.9\n",
        encoding="utf-8",
    )
    assert main(["--no-log-file", "run", str(cfg), "--output", str(tmp_path / "r.csv")]) == EXIT_ROUND_FAILURE
