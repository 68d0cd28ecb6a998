import csv
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from ibn.cli import main
from ibn.config import ConfigError, apply_overrides, default_config, load_config
from ibn.data import load_adjacency, load_csv_series

SMALL = {
    "data": {"n": 5, "t": 160, "h": 4, "l": 2, "stride": 2},
    "model": {"d": 4, "embed_dim": 3},
    "train": {"max_epochs": 2, "batch_size": 16},
    "ablation": {"seeds": [0], "variants": ["IBN", "Bi-RU->Uni-RU"]},
}


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps(SMALL))
    return p


def _run(capsys, *argv):
    code = main(["--log-level", "WARNING", *map(str, argv)])
    out, err = capsys.readouterr()
    return code, out.strip(), err.strip()


class TestConfig:
    def test_defaults_validate(self):
        cfg = load_config(env={})
        assert cfg["train"]["lr"] == 1e-3
        assert cfg["train"]["patience"] == 15
        assert cfg["model"]["dropout"] == 0.1 and cfg["model"]["mc_samples"] == 10

    def test_unknown_key(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"model": {"width": 3}}))
        with pytest.raises(ConfigError, match="unknown config key 'model.width'"):
            load_config(p, env={})

    def test_unknown_section(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"optim": {}}))
        with pytest.raises(ConfigError, match="'optim'"):
            load_config(p, env={})

    def test_bad_json_names_line(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text('{\n"train": {,}\n}')
        with pytest.raises(ConfigError, match=r"c\.json:2: invalid JSON"):
            load_config(p, env={})

    @pytest.mark.parametrize("key,raw,expected", [
        ("train.lr", "0.01", 0.01),
        ("train.batch_size", "8", 8),
        ("model.bidirectional", "false", False),
        ("ablation.seeds", "[3, 4]", [3, 4]),
        ("ablation.variants", "IBN,UAI->IA", ["IBN", "UAI->IA"]),
        ("data.source", "csv", "csv"),
    ])
    def test_overrides(self, key, raw, expected):
        section, name = key.split(".")
        assert apply_overrides(default_config(), [(key, raw)])[section][name] == expected

    def test_override_type_error(self):
        with pytest.raises(ConfigError, match="train.batch_size: expected an integer"):
            apply_overrides(default_config(), [("train.batch_size", "many")])

    def test_seed_env(self):
        assert load_config(env={"IBN_SEED": "42"})["train"]["seed"] == 42
        with pytest.raises(ConfigError, match="IBN_SEED"):
            load_config(env={"IBN_SEED": "x"})

    @pytest.mark.parametrize("key,raw", [("train.lr", "-1"), ("mask.rate", "1.0"), ("data.h", "0"),
                                         ("model.graph", "ring"), ("ablation.variants", "IBN,Other")])
    def test_invalid_values(self, key, raw):
        with pytest.raises(ConfigError):
            load_config(overrides=[(key, raw)], env={})

    def test_csv_source_needs_paths(self):
        with pytest.raises(ConfigError, match="needs data.series"):
            load_config(overrides=[("data.source", "csv")], env={})


class TestSynth:
    def test_files(self, tmp_path, capsys):
        code, out, _ = _run(capsys, "synth", "--n", 12, "--t", 2000, "--seed", 7, "--out", tmp_path / "s")
        assert code == 0
        s = Path(out)
        assert sorted(p.name for p in s.iterdir()) == ["adj.csv", "coords.csv", "meta.json", "series.csv"]
        series = load_csv_series(s / "series.csv")
        assert (series.t, series.n) == (2000, 12)
        assert load_adjacency(s / "adj.csv").shape == (12, 12)
        assert json.loads((s / "meta.json").read_text())["seed"] == 7

    def test_run_directory_named_by_seed(self, tmp_path, capsys):
        code, out, _ = _run(capsys, "synth", "--n", 3, "--t", 20, "--seed", 5, "--runs", tmp_path)
        assert code == 0 and Path(out).parent == tmp_path and Path(out).name.endswith("-seed5")


class TestTrainEval:
    def test_train_then_eval_reproduces_validation(self, tmp_path, capsys, cfg_file):
        code, out, _ = _run(capsys, "train", "--config", cfg_file, "--runs", tmp_path)
        assert code == 0
        run = Path(out)
        for name in ("manifest.json", "config.json", "history.csv", "report.json", "completed.json"):
            assert (run / name).exists()
        manifest = json.loads((run / "manifest.json").read_text())
        assert manifest["seed"] == 0 and len(manifest["dataset_fingerprint"]) == 64
        with (run / "history.csv").open() as fh:
            rows = list(csv.DictReader(fh))
        best = min(float(r["val_mae"]) for r in rows)

        code, out, _ = _run(capsys, "eval", "--checkpoint", run, "--split", "val", "--runs", tmp_path)
        assert code == 0
        assert json.loads(out)["normalized_mae"] == best

    def test_rerun_reproduces_csvs(self, tmp_path, capsys, cfg_file):
        runs = []
        for _ in range(2):
            code, out, _ = _run(capsys, "train", "--config", cfg_file, "--runs", tmp_path)
            assert code == 0
            runs.append(Path(out))
        # wall-clock seconds aside, the history is identical
        a, b = ([line.rsplit(",", 1)[0] for line in (r / "history.csv").read_text().splitlines()] for r in runs)
        assert a == b
        assert (runs[0] / "report.json").read_text() == (runs[1] / "report.json").read_text()
        assert (runs[0] / "checkpoint" / "weights.bin").read_bytes() == \
            (runs[1] / "checkpoint" / "weights.bin").read_bytes()

    def test_override_and_env_seed(self, tmp_path, capsys, cfg_file, monkeypatch):
        monkeypatch.setenv("IBN_SEED", "3")
        code, out, _ = _run(capsys, "train", "--config", cfg_file, "--runs", tmp_path, "--train.max_epochs", "1")
        assert code == 0
        run = Path(out)
        assert run.name.endswith("-seed3")
        assert len((run / "history.csv").read_text().splitlines()) == 2

    def test_csv_source(self, tmp_path, capsys):
        code, out, _ = _run(capsys, "synth", "--n", 4, "--t", 120, "--out", tmp_path / "s")
        cfg = {"data": {"source": "csv", "series": str(tmp_path / "s" / "series.csv"),
                        "adjacency": str(tmp_path / "s" / "adj.csv"), "h": 4, "l": 2, "stride": 4},
               "model": {"d": 3}, "train": {"max_epochs": 1}}
        p = tmp_path / "c.json"
        p.write_text(json.dumps(cfg))
        code, out, err = _run(capsys, "train", "--config", p, "--runs", tmp_path)
        assert code == 0, err


class TestDiagnoseAblate:
    def test_diagnose_untrained(self, tmp_path, capsys, cfg_file):
        code, out, _ = _run(capsys, "diagnose", "--config", cfg_file, "--runs", tmp_path)
        assert code == 0
        run = Path(json.loads(out)["run_dir"])
        with (run / "uncertainty.csv").open() as fh:
            rows = list(csv.DictReader(fh))
        assert list(rows[0]) == ["variable", "window", "reconstruction_error", "sigma"]
        assert all(float(r["sigma"]) > 0 for r in rows)
        for name in ("adj_pre.csv", "adj_gau.csv"):
            np.testing.assert_allclose(load_adjacency(run / name).sum(1), 1.0, atol=1e-6)

    def test_diagnose_without_missing_variables(self, tmp_path, capsys, cfg_file):
        code, _, err = _run(capsys, "diagnose", "--config", cfg_file, "--runs", tmp_path, "--mask.rate", "0")
        assert code == 1
        assert json.loads(err)["message"] == "diagnostics require masked variables"

    def test_ablate(self, tmp_path, capsys, cfg_file):
        code, out, _ = _run(capsys, "ablate", "--config", cfg_file, "--runs", tmp_path)
        assert code == 0
        header = (Path(out) / "ablation.csv").read_text().splitlines()[0]
        assert header.startswith("dataset,IBN:rmse,IBN:mape,IBN:mae,Bi-RU->Uni-RU:rmse")


class TestErrors:
    @pytest.mark.parametrize("argv,code", [
        (["train", "--config", "missing.json"], 2),
        (["train", "--train.unknown", "1"], 2),
        (["train", "stray"], 2),
        (["nosuch"], 2),
        (["eval", "--checkpoint", "missing_dir"], 1),
    ])
    def test_exit_codes_and_one_line_error(self, tmp_path, capsys, argv, code):
        got, _, err = _run(capsys, *argv, "--runs", tmp_path) if argv[0] != "nosuch" else _run(capsys, *argv)
        assert got == code
        assert len(err.splitlines()) == 1
        assert json.loads(err)["error"] == ("config" if code == 2 else "runtime")

    def test_module_entry_point(self, tmp_path):
        proc = subprocess.run([sys.executable, "-m", "ibn", "synth", "--n", "3", "--t", "10", "--out",
                               str(tmp_path / "s")], capture_output=True, text=True)
        assert proc.returncode == 0
        assert (tmp_path / "s" / "series.csv").exists()
