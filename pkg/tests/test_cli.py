import hashlib
import json
import logging

from moesim.cli import main
from moesim.metrics import read_csv
from moesim.trace import parse_trace
from moesim.core import load_preset


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


SYNTH = ["--synth", "p_token_reuse=0.45", "tokens=30"]


def test_gen_trace_record_count_and_determinism(tmp_path):
    args = ["gen-trace", "--preset", "mixtral-8x7b", "--seed", "5",
            "--synth", "p_token_reuse=0.45", "tokens=10000"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    a, b = tmp_path / "a" / "trace.jsonl", tmp_path / "b" / "trace.jsonl"
    assert sha(a) == sha(b)
    assert len(parse_trace(a, load_preset("mixtral-8x7b")[0])) == 320_000
    sidecar = json.loads((tmp_path / "a" / "trace.patterns.json").read_text())
    assert sidecar["params"]["tokens"] == 10000
    assert len(sidecar["patterns"]["at_least_one_token_reuse_rate_per_layer"]) == 32


def test_gen_trace_bad_probability(tmp_path, capsys):
    rc = main(["gen-trace", "--out", str(tmp_path), "--synth", "p_token_reuse=1.2"])
    assert rc == 2
    assert "p_token_reuse" in capsys.readouterr().err


def test_simulate_summary_geometry(tmp_path):
    rc = main(["simulate", "--preset", "mixtral-8x7b", "--strategy", "COLLABORATIVE",
               "--threads", "24", "--ways", "4", "--out", str(tmp_path), "--events", *SYNTH])
    assert rc == 0
    summ = json.loads((tmp_path / "summary.json").read_text())
    assert summ["config"]["geometry"]["total_slots"] == 56
    assert summ["config"]["geometry"]["indexes"] == 14
    assert summ["schema"] == "moesim.metrics/1"
    assert len(read_csv(tmp_path / "metrics.csv")) == 1
    assert (tmp_path / "events.jsonl").stat().st_size > 0


def test_simulate_with_trace_file(tmp_path):
    assert main(["gen-trace", "--out", str(tmp_path), *SYNTH]) == 0
    rc = main(["simulate", "--trace", str(tmp_path / "trace.jsonl"), "--strategy", "on_demand",
               "--out", str(tmp_path / "run")])
    assert rc == 0
    assert json.loads((tmp_path / "run" / "summary.json").read_text())["tokens"] == 30


def test_cpu_only_warns_about_ways(tmp_path, caplog):
    with caplog.at_level(logging.WARNING, logger="moesim"):
        rc = main(["simulate", "--strategy", "CPU_ONLY", "--ways", "4", "--out", str(tmp_path),
                   *SYNTH])
    assert rc == 0
    assert "--ways ignored" in caplog.text


def test_missing_trace(tmp_path, capsys):
    rc = main(["simulate", "--trace", str(tmp_path / "nope.jsonl"), "--out", str(tmp_path)])
    assert rc == 2
    assert "not found" in capsys.readouterr().err


def test_no_trace_source(tmp_path):
    assert main(["simulate", "--out", str(tmp_path)]) == 2


def test_both_trace_sources(tmp_path):
    assert main(["simulate", "--trace", "x", "--out", str(tmp_path), *SYNTH]) == 2


def test_bad_flag():
    assert main(["simulate", "--strategy", "FASTEST"]) == 2


def test_sweep_grid_and_resume(tmp_path, capsys):
    base = ["sweep", "--out", str(tmp_path), "--synth", "p_token_reuse=0.45", "tokens=10"]
    assert main(base + ["--threads", "1,2", "--ways", "2,4,8"]) == 0
    assert len(read_csv(tmp_path / "sweep.csv")) == 6
    capsys.readouterr()
    assert main(base) == 0
    rows = read_csv(tmp_path / "sweep.csv")
    assert len(rows) == 18
    assert len({(r["threads"], r["ways"]) for r in rows}) == 18
    assert "resuming: 6 points" in capsys.readouterr().out
    series = json.loads((tmp_path / "series.json").read_text())
    assert set(series["throughput"]) == {"(28,2)", "(14,4)", "(7,8)"}


def test_sweep_empty_grid(tmp_path):
    assert main(["sweep", "--out", str(tmp_path), "--ways", "", *SYNTH]) == 2


def test_sweep_invalid_thread_count(tmp_path):
    assert main(["sweep", "--out", str(tmp_path), "--threads", "3", *SYNTH]) == 2


def test_validate_passes(capsys):
    assert main(["validate"]) == 0
    out = capsys.readouterr().out
    assert "11/14" in out
    assert "S=0 collaborative" in out
    assert "51.1" in out


def test_out_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("MOESIM_OUT_DIR", str(tmp_path / "env"))
    assert main(["simulate", "--strategy", "CPU_ONLY", *SYNTH]) == 0
    assert (tmp_path / "env" / "summary.json").exists()


def test_config_file(tmp_path):
    from moesim.core import PRESETS, save_config

    cfg = tmp_path / "phi.json"
    save_config(cfg, *PRESETS["phi3.5-moe"])
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path), *SYNTH]) == 0
    summ = json.loads((tmp_path / "summary.json").read_text())
    assert summ["config"]["model"] == "phi3.5-moe"
