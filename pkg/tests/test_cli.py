import csv
import json
from pathlib import Path

import numpy as np
import pytest

from ddpop.cli import main

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
COMMANDS = [
    ("simulate", "simulate_sis.json"),
    ("meanfield", "meanfield_sis.json"),
    ("converge", "converge_sis.json"),
    ("stability", "stability_sis.json"),
    ("control", "control_stationary.json"),
    ("control", "control_gap.json"),
    ("control", "control_finite.json"),
    ("control", "control_ideal.json"),
    ("control", "control_constrained.json"),
    ("construct", "construct_field.json"),
]


def _snapshot(out: Path) -> dict:
    return {p.name: p.read_bytes() for p in sorted(out.iterdir())}


def _write(tmp_path, cfg, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return path


@pytest.mark.parametrize("command,config", COMMANDS)
def test_subcommand_deterministic_across_threads(tmp_path, command, config):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main([command, "--config", str(CONFIGS / config), "--out", str(a), "--seed", "5", "--threads", "1"]) == 0
    assert main([command, "--config", str(CONFIGS / config), "--out", str(b), "--seed", "5", "--threads", "3"]) == 0
    snap = _snapshot(a)
    assert snap == _snapshot(b)
    manifest = json.loads(snap["manifest.json"])
    assert manifest["seed"] == 5 and manifest["command"] == command
    assert manifest["config"] == json.loads((CONFIGS / config).read_text())
    assert set(manifest["outputs"]) | {"manifest.json"} == set(snap)


def test_lorenz_preset(tmp_path):
    out = tmp_path / "lor"
    assert main(["construct", "--preset", "lorenz", "--config", str(CONFIGS / "construct_lorenz.json"),
                 "--out", str(out)]) == 0
    with open(out / "phase_portrait.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["t", "x1", "x2", "x3"]
    X = np.array(rows[1:], dtype=float)
    assert len(X) > 100 and np.all(np.diff(X[:, 0]) >= 0)
    with open(out / "timeseries.csv") as fh:
        header = next(csv.reader(fh))
    assert header == ["t", "x1", "x2", "x3", "x4"]
    model = json.loads((out / "model.json").read_text())
    assert "provenance" in json.dumps(model)


def test_simulate_rows_conserve_population(tmp_path):
    cfg = json.loads((CONFIGS / "simulate_sis.json").read_text())
    cfg.update(n=1000, paths=1)
    out = tmp_path / "o"
    assert main(["simulate", "--config", str(_write(tmp_path, cfg)), "--out", str(out)]) == 0
    files = [p for p in out.iterdir() if p.name.startswith("path_")]
    assert len(files) == 1
    with open(files[0]) as fh:
        reader = csv.reader(fh)
        header = next(reader)
        cols = [i for i, h in enumerate(header) if h.startswith("k_")]
        rows = [sum(int(r[i]) for i in cols) for r in reader]
    assert len(cols) == 2 and len(rows) > 10
    assert set(rows) == {1000}


def test_input_file_not_mutated(tmp_path):
    src = CONFIGS / "converge_sis.json"
    path = tmp_path / "cfg.json"
    path.write_bytes(src.read_bytes())
    before = path.read_bytes()
    mtime = path.stat().st_mtime_ns
    assert main(["converge", "--config", str(path), "--out", str(tmp_path / "o")]) == 0
    assert path.read_bytes() == before and path.stat().st_mtime_ns == mtime


def test_missing_field_exits_2_with_path(tmp_path, capsys):
    cfg = json.loads((CONFIGS / "simulate_sis.json").read_text())
    del cfg["n"]
    out = tmp_path / "o"
    assert main(["simulate", "--config", str(_write(tmp_path, cfg)), "--out", str(out)]) == 2
    err = capsys.readouterr().err
    assert "config" in err and "n" in err
    assert not out.exists()


def test_unknown_key_rejected(tmp_path, capsys):
    cfg = json.loads((CONFIGS / "meanfield_sis.json").read_text())
    cfg["tolerance"] = 1e-3
    assert main(["meanfield", "--config", str(_write(tmp_path, cfg)), "--out", str(tmp_path / "o")]) == 2
    assert "tolerance" in capsys.readouterr().err


def test_wrong_type_reports_field(tmp_path, capsys):
    cfg = json.loads((CONFIGS / "simulate_sis.json").read_text())
    cfg["n"] = "many"
    assert main(["simulate", "--config", str(_write(tmp_path, cfg)), "--out", str(tmp_path / "o")]) == 2
    assert "config.n" in capsys.readouterr().err


def test_model_error_is_config_failure(tmp_path):
    cfg = {"model": {"preset": "sis", "lambda": {"form": "exponential", "a": 0.0, "b": 1.0, "r": 800.0},
                     "mu": 1.0}, "n": 100, "z0": [0.7, 0.3], "horizon": 10.0}
    with np.errstate(all="ignore"):
        code = main(["simulate", "--config", str(_write(tmp_path, cfg)), "--out", str(tmp_path / "o")])
    assert code == 2


def test_missing_and_malformed_config(tmp_path):
    assert main(["simulate", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path / "o")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["simulate", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert main(["simulate", "--out", str(tmp_path / "o")]) == 2


def test_runtime_failure_exits_1(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    code = main(["simulate", "--config", str(CONFIGS / "simulate_sis.json"), "--out", str(blocker / "sub")])
    assert code == 1


def test_bad_flags(tmp_path):
    cfg = str(CONFIGS / "simulate_sis.json")
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "o"), "--threads", "0"]) == 2
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "o"), "--seed", "-1"]) == 2
    assert main(["frobnicate"]) == 2


def test_seed_changes_output(tmp_path):
    cfg = str(CONFIGS / "simulate_sis.json")
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "a"), "--seed", "1"]) == 0
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "b"), "--seed", "2"]) == 0
    assert _snapshot(tmp_path / "a")["ensemble.csv"] != _snapshot(tmp_path / "b")["ensemble.csv"]
