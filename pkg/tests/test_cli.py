import csv
import json
import subprocess
import sys

import pytest

from ssbins import __version__
from ssbins import cli
from ssbins.experiments import RESULT_COLUMNS, parse_config
from ssbins.process import SimulationError


def ssbins(*args, cwd=None):
    return subprocess.run([sys.executable, "-m", "ssbins", *map(str, args)], capture_output=True,
                          text=True, cwd=cwd)


def read_jsonl(path):
    return [json.loads(line) for line in path.read_text().splitlines()]


def test_simulate_k2_absorbing(tmp_path):
    proc = ssbins("simulate", "--topology", "complete", "--n", 2, "--m", 2, "--strategy", "fifo",
                  "--placement", "spread", "--rounds", 5, "--seed", 1, "--out", tmp_path)
    assert proc.returncode == 0, proc.stderr
    assert proc.stdout.startswith(f"# ssbins {__version__} simulate {{")
    rows = read_jsonl(tmp_path / "record.jsonl")
    assert [r["round"] for r in rows] == list(range(6))
    assert {r["max_load"] for r in rows} == {1}
    with open(tmp_path / "summary.csv") as fh:
        (row,) = list(csv.DictReader(fh))
    assert row["convergence_time"] == "0"


def test_simulate_zero_rounds(tmp_path):
    assert cli.main(["simulate", "--n", "8", "--rounds", "0", "--out", str(tmp_path)]) == 0
    assert len(read_jsonl(tmp_path / "record.jsonl")) == 1


def test_simulate_deterministic(tmp_path):
    args = ["simulate", "--n", "64", "--rounds", "16n", "--placement", "point:0", "--trace",
            "--faults", "periodic:4n:reshuffle", "--seed", "7"]
    assert cli.main(args + ["--out", str(tmp_path / "a")]) == 0
    assert cli.main(args + ["--out", str(tmp_path / "b")]) == 0
    for name in ("record.jsonl", "record.csv", "summary.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    rows = read_jsonl(tmp_path / "a" / "record.jsonl")
    assert [r["round"] for r in rows if r["faulty"]] == [256, 512, 768]


@pytest.mark.parametrize(
    "args",
    [
        ["simulate", "--n", "8", "--strategy", "stack"],
        ["simulate"],
        ["simulate", "--n", "8", "--rounds", "n^3"],
        ["simulate", "--n", "8", "--topology", "regular:x"],
        ["simulate", "--n", "2", "--topology", "ring"],
        ["simulate", "--n", "8", "--placement", "point:9"],
        ["simulate", "--n", "8", "--faults", "periodic:0:all_in_one"],
        ["simulate", "--n", "64", "--m", "4096", "--alpha", "1"],
        ["nonsense"],
        ["presets", "show", "nope"],
        ["report", "/nonexistent/results.csv"],
    ],
)
def test_usage_errors_exit_2(args, tmp_path, capsys):
    assert cli.main(args + ([] if args[0] in ("nonsense", "presets", "report")
                            else ["--out", str(tmp_path)])) == 2
    err = capsys.readouterr().err
    assert err.startswith("error: ") and err.count("\n") == 1


def test_invalid_flag_subprocess(tmp_path):
    proc = ssbins("simulate", "--n", 8, "--bogus", cwd=tmp_path)
    assert proc.returncode == 2
    assert len(proc.stderr.strip().splitlines()) == 1


def test_runtime_error_exit_3(monkeypatch, tmp_path, capsys):
    def explode(*a, **k):
        raise SimulationError(42, "queue corrupted")

    monkeypatch.setattr(cli, "run_single", explode)
    assert cli.main(["simulate", "--n", "8", "--out", str(tmp_path)]) == 3
    assert "round 42" in capsys.readouterr().err


def test_unexpected_error_exit_3(monkeypatch, tmp_path):
    monkeypatch.setattr(cli, "run_single", lambda *a, **k: 1 / 0)
    assert cli.main(["simulate", "--n", "8", "--out", str(tmp_path)]) == 3


def test_baseline_kinds(tmp_path):
    for kind in ("memoryless", "dominating", "single_ball"):
        out = tmp_path / kind
        assert cli.main(["baseline", "--kind", kind, "--n", "16", "--rounds", "100",
                         "--checkpoints", "50", "--out", str(out)]) == 0
        with open(out / "summary.csv") as fh:
            (row,) = list(csv.DictReader(fh))
        assert row["process"] == kind
    rows = read_jsonl(tmp_path / "memoryless" / "record.jsonl")
    assert rows[0]["process"] == "memoryless"


def test_cover(tmp_path, capsys):
    assert cli.main(["cover", "--n", "16", "--runs", "4", "--out", str(tmp_path)]) == 0
    assert "median cover=" in capsys.readouterr().out
    with open(tmp_path / "results.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4 and all(int(r["parallel_cover_time"]) >= 15 for r in rows)


SWEEP = """
[alpha]
n = 16, 32
repetitions = 3
rounds = 8n

[beta]
n = 16
placement = point:0
repetitions = 2
trace = true
"""


def test_sweep_rows_and_workers(tmp_path):
    cfg = tmp_path / "exp.ini"
    cfg.write_text(SWEEP)
    assert cli.main(["sweep", str(cfg), "--workers", "1", "--out", str(tmp_path / "w1")]) == 0
    assert cli.main(["sweep", str(cfg), "--workers", "8", "--out", str(tmp_path / "w8")]) == 0
    for name in ("results.csv", "alpha.json", "beta.json"):
        assert (tmp_path / "w1" / name).read_bytes() == (tmp_path / "w8" / name).read_bytes()
    with open(tmp_path / "w1" / "results.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2 * 3 + 2


def test_sweep_resumes(tmp_path, capsys):
    cfg = tmp_path / "exp.ini"
    cfg.write_text(SWEEP)
    cli.main(["sweep", str(cfg), "--out", str(tmp_path)])
    first = (tmp_path / "results.csv").read_text()
    capsys.readouterr()
    assert cli.main(["sweep", str(cfg), "--out", str(tmp_path)]) == 0
    assert "skipped" in capsys.readouterr().out
    assert (tmp_path / "results.csv").read_text() == first


def test_sweep_refuses_foreign_csv(tmp_path):
    cfg = tmp_path / "exp.ini"
    cfg.write_text(SWEEP)
    (tmp_path / "results.csv").write_text("a,b\n1,2\n")
    assert cli.main(["sweep", str(cfg), "--out", str(tmp_path)]) == 2


def test_sweep_empty_config(tmp_path, capsys):
    cfg = tmp_path / "empty.ini"
    cfg.write_text("# nothing here\n")
    assert cli.main(["sweep", str(cfg), "--out", str(tmp_path)]) == 2
    assert "no experiments defined" in capsys.readouterr().err


def test_sweep_config_error_has_line(tmp_path, capsys):
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[a]\nn = 8\nrounds = banana\n")
    assert cli.main(["sweep", str(cfg), "--out", str(tmp_path)]) == 2
    assert "line 3" in capsys.readouterr().err


def test_presets_list_and_show(capsys):
    assert cli.main(["presets", "list"]) == 0
    listed = capsys.readouterr().out
    for name in ("coupon", "stability", "convergence", "cover", "progress", "early_load",
                 "dominating", "faults", "more_balls", "ring", "memoryless_empty"):
        assert name in listed
        parse_config(cli.preset_text(name))
    assert cli.main(["presets", "show", "ring"]) == 0
    assert "[ring-convergence]" in capsys.readouterr().out


def test_presets_run_small(tmp_path):
    assert cli.main(["presets", "run", "coupon", "--out", str(tmp_path)]) == 0
    with open(tmp_path / "results.csv") as fh:
        rows = list(csv.DictReader(fh))
    spec = parse_config(cli.preset_text("coupon"))[0]
    assert len(rows) == spec.repetitions * len(spec.cells())


def write_rows(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in RESULT_COLUMNS})


def synthetic(exp, n, conv, censored=0, seed=0):
    return {"experiment_id": exp, "process": "base", "seed": seed, "n": n, "m": n,
            "topology": "complete", "strategy": "fifo", "alpha": 4.0,
            "convergence_time": conv, "convergence_censored": censored}


def test_report_no_runs(tmp_path, capsys):
    write_rows(tmp_path / "r.csv", [])
    assert cli.main(["report", str(tmp_path / "r.csv")]) == 0
    assert "no runs" in capsys.readouterr().out


def test_report_all_success_wilson(tmp_path, capsys):
    write_rows(tmp_path / "r.csv", [synthetic("e", 64, 10, seed=s) for s in range(10)])
    assert cli.main(["report", str(tmp_path / "r.csv")]) == 0
    out = capsys.readouterr().out
    assert "converged 1.000 [0.722, 1.000]" in out


def test_report_exponent(tmp_path, capsys):
    rows = [synthetic("lin", n, 7 * n, seed=s) for n in (128, 256, 512) for s in range(3)]
    write_rows(tmp_path / "r.csv", rows)
    assert cli.main(["report", str(tmp_path / "r.csv")]) == 0
    assert "convergence scaling exponent 1.000" in capsys.readouterr().out


def test_report_schema_mismatch(tmp_path):
    (tmp_path / "r.csv").write_text("experiment_id,seed\nx,1\n")
    assert cli.main(["report", str(tmp_path / "r.csv")]) == 2


def test_version():
    proc = ssbins("--version")
    assert proc.returncode == 0 and __version__ in proc.stdout
