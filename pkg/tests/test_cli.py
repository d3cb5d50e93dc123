import json

import pytest
import yaml

from cirtoa.cli import main
from cirtoa.evalkit import load_report
from cirtoa.records import read_records


def write_config(tmp_path, doc, name="run.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(doc))
    return str(path)


SMALL = {
    "synth": {
        "environments": [
            {"environment": "room_a", "n": 40},
            {"environment": "room_b", "n": 15, "los_probability": 0.4},
        ]
    },
    "grid": {"alpha": [0.1, 0.3], "avg_window": [1], "lde_small_window": [2], "lde_large_window": [8], "lde_factor": [1.0]},
    "train": {"max_epochs": 2, "patience": 2},
    "split": {"n_repeats": 1},
}


def run(*args):
    return main([str(a) for a in args])


def test_synth_byte_identical(tmp_path):
    cfg = write_config(tmp_path, {"synth": {"environments": [{"environment": "x", "n": 50}]}})
    assert run("synth", "--config", cfg, "--seed", 7, "--out", tmp_path / "a") == 0
    assert run("synth", "--config", cfg, "--seed", 7, "--out", tmp_path / "b") == 0
    a, b = (tmp_path / d / "records.jsonl" for d in "ab")
    assert a.read_bytes() == b.read_bytes()
    assert len(read_records(a)) == 50


def test_synth_zero_records(tmp_path):
    cfg = write_config(tmp_path, {"synth": {"environments": [{"environment": "x", "n": 0}]}})
    assert run("synth", "--config", cfg, "--out", tmp_path / "o") == 0
    assert (tmp_path / "o" / "records.jsonl").read_text() == ""


def test_synth_validates_before_writing(tmp_path, capsys):
    cfg = write_config(tmp_path, {"synth": {"environments": [{"environment": "x", "n": 5, "los_probability": 1.5}]}})
    out = tmp_path / "o"
    assert run("synth", "--config", cfg, "--out", out) == 2
    assert not out.exists()
    assert "[config]" in capsys.readouterr().err


def test_unknown_method_rejected(tmp_path, capsys):
    assert run("eval", "--methods", "Peak,Wat", "--out", tmp_path) == 2
    assert "[config]" in capsys.readouterr().err


def test_pipeline_three_rows_and_rerun_identical(tmp_path, capsys):
    cfg = write_config(tmp_path, SMALL)
    methods = "Peak,Peak+CnstAvg,Peak+CNN"
    for d in ("r1", "r2"):
        out = tmp_path / d
        assert run("synth", "--config", cfg, "--seed", 3, "--out", out) == 0
        assert run("eval", "--config", cfg, "--seed", 3, "--out", out, "--methods", methods) == 0
    rep = load_report(tmp_path / "r1" / "report.json")
    assert rep.methods == methods.split(",")
    assert (tmp_path / "r1" / "report.json").read_bytes() == (tmp_path / "r2" / "report.json").read_bytes()
    assert (tmp_path / "r1" / "cnn_Peak_r0.json").is_file()
    capsys.readouterr()
    assert run("report", "--out", tmp_path / "r1") == 0
    table = capsys.readouterr().out
    assert sum(line.startswith("Peak") for line in table.splitlines()) == 3


def test_optimize_train_bench(tmp_path):
    cfg = write_config(tmp_path, {**SMALL, "bench": {"n_iterations": 10, "n_traces": 3}})
    out = tmp_path / "o"
    assert run("synth", "--config", cfg, "--out", out) == 0
    assert run("optimize", "--config", cfg, "--out", out, "--methods", "IFP,LDE+CNN") == 0
    assert {p.name for p in out.glob("params_*.json")} == {"params_IFP.json", "params_LDE.json"}
    assert run("train", "--config", cfg, "--out", out, "--methods", "LDE+CNN") == 0
    ckpt = json.loads((out / "cnn_LDE.json").read_text())
    assert ckpt["metadata"]["method"] == "LDE+CNN"
    assert run("bench", "--config", cfg, "--out", out) == 0
    bench = json.loads((out / "bench.json").read_text())
    assert set(bench["median_ms"]) == {"Peak", "IFP", "LDE", "CNN"}


def test_missing_test_environment_is_stage_tagged(tmp_path, capsys):
    cfg = write_config(tmp_path, {**SMALL, "split": {"test_env": "nowhere", "n_repeats": 1}})
    out = tmp_path / "o"
    assert run("synth", "--config", cfg, "--out", out) == 0
    assert run("eval", "--config", cfg, "--out", out, "--methods", "Peak") == 1
    err = capsys.readouterr().err
    assert "[split]" in err and "nowhere" in err


def test_ingest_csv(tmp_path):
    src = tmp_path / "d.csv"
    src.write_text("toa_device,ranging_error,range_true," + ",".join(f"CIR{i}" for i in range(20)) + "\n"
                   + "5,0.0,1.0," + ",".join(["0.1"] * 5 + ["1.0"] + ["0.1"] * 14) + "\n")
    cfg = write_config(tmp_path, {"ingest": {"source": str(src), "hints": {"environment": "lab"}}})
    assert run("ingest", "--config", cfg, "--out", tmp_path / "o") == 0
    (rec,) = read_records(tmp_path / "o" / "records.jsonl")
    assert rec.toa_true == 5.0 and rec.environment == "lab"


def test_ingest_bad_row(tmp_path, capsys):
    src = tmp_path / "d.csv"
    src.write_text("toa_device,ranging_error,range_true,CIR0,CIR1\n5,0.1,x,0.1,1.0\n")
    cfg = write_config(tmp_path, {"ingest": {"source": str(src)}})
    assert run("ingest", "--config", cfg, "--out", tmp_path / "o") == 1
    err = capsys.readouterr().err
    assert "[ingest]" in err and "row 1" in err


def test_missing_records(tmp_path, capsys):
    assert run("eval", "--out", tmp_path / "empty") == 2
    assert "not found" in capsys.readouterr().err


def test_seed_range(tmp_path):
    assert run("synth", "--seed", -1, "--out", tmp_path) == 2


def test_requires_subcommand():
    with pytest.raises(SystemExit):
        main([])
