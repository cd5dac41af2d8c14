import csv
import io
import json

import numpy as np
import pytest

from lowprec import bench
from lowprec.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main
from lowprec.stability import TrainTrace

TOML = """
[model]
depth = 1
dim = 16
heads = 2
linear_mode = {{ variant = "SwitchBack" }}

[train]
iterations = 120
warmup_iterations = 2
batch_size = 4
seed = 1
trace_path = "{trace}"

[optimizer]
lr = {lr}
"""


def rows_of(text):
    return list(csv.DictReader(io.StringIO(text)))


# -- bench ------------------------------------------------------------------------

def test_parse_sizes():
    assert bench.parse_sizes("4x8, 16X32") == [(4, 8), (16, 32)]
    for bad in ("", "4x", "0x3", "axb"):
        with pytest.raises(ValueError):
            bench.parse_sizes(bad)


def test_schema_does_not_depend_on_repeats():
    one = bench.to_csv(bench.bench(sizes=[(4, 8)], repeats=1))
    many = bench.to_csv(bench.bench(sizes=[(4, 8)], repeats=20))
    assert one.splitlines()[0] == many.splitlines()[0] == ",".join(bench.CSV_COLUMNS)
    assert [r["op"] for r in rows_of(one)] == list(bench.OPS)
    assert {r["repeats"] for r in rows_of(many)} == {"20"}


def test_quantize_fraction_in_unit_interval():
    rows = bench.bench(sizes=[(16, 32)], repeats=3)
    frac = bench.quantize_fraction(rows, 16, 32)
    assert 0 < frac < 1
    assert np.isnan(bench.quantize_fraction(bench.bench(["matmul"], [(4, 8)], 1), 4, 8))


def test_larger_dim_takes_longer():
    rows = bench.bench(["matmul"], [(64, 64), (64, 1024)], repeats=15)
    small, large = (r.p50_ns for r in rows)
    assert large > small


def test_bench_rejects_unknown_op():
    with pytest.raises(ValueError):
        bench.bench(["fft"], [(4, 4)], 1)


# -- cli ----------------------------------------------------------------------------

def test_cli_bench_writes_csv(tmp_path, capsys):
    out = tmp_path / "b.csv"
    assert main(["bench", "--sizes", "8x16", "--repeats", "2", "--out", str(out)]) == EXIT_OK
    assert [r["op"] for r in rows_of(out.read_text())] == list(bench.OPS)
    assert "quantize fraction" in capsys.readouterr().out


def test_cli_noise(capsys):
    assert main(["noise", "--k", "16,32", "--sigma-q", "0.1", "--trials", "3000"]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "k,predicted,empirical,rel_error"
    assert lines[1].startswith("16,") and lines[3].startswith("# slope")


def test_cli_train_then_analyze(tmp_path, capsys):
    trace_path = tmp_path / "t.jsonl"
    cfg = tmp_path / "c.toml"
    cfg.write_text(TOML.format(trace=trace_path, lr=0.001))
    assert main(["train", "--config", str(cfg)]) == EXIT_OK
    assert len(TrainTrace.read(trace_path)) == 120
    report = tmp_path / "r.jsonl"
    code = main(["analyze", "--trace", str(trace_path), "--warmup-skip", "0", "--out", str(report)])
    assert code == EXIT_OK
    recs = [json.loads(line) for line in report.read_text().splitlines()]
    summaries = [r for r in recs if r["kind"] == "summary"]
    assert [s["tensor"] for s in summaries][0] == "embed.weight"
    assert len(summaries) == 2
    assert "[control]" in capsys.readouterr().out


def test_cli_exit_codes(tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "nope.toml")]) == EXIT_USAGE
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == EXIT_USAGE
    bad = tmp_path / "bad.toml"
    bad.write_text("[train]\nbogus = 1\n")
    assert main(["train", "--config", str(bad)]) == EXIT_USAGE
    assert "bogus" in capsys.readouterr().err
    garbage = tmp_path / "g.jsonl"
    garbage.write_text("{oops\n")
    assert main(["analyze", "--trace", str(garbage)]) == EXIT_USAGE
    assert main(["bench", "--sizes", "3y4"]) == EXIT_USAGE


def test_cli_runtime_error_exit_code(tmp_path, monkeypatch):
    import lowprec.train as train_mod

    def nan_loss(logits, labels):
        return float("nan"), np.zeros_like(logits)

    monkeypatch.setattr(train_mod, "cross_entropy", nan_loss)
    cfg = tmp_path / "c.toml"
    cfg.write_text(TOML.format(trace=tmp_path / "t.jsonl", lr=0.001))
    assert main(["train", "--config", str(cfg)]) == EXIT_RUNTIME
