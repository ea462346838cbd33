import dataclasses
import json

import numpy as np
import pytest

from imbalanced_supcon import __version__, trainer
from imbalanced_supcon.cli import (EXIT_BOUND, EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_OK, build_parser,
                                   main)
from imbalanced_supcon.utils import ResultsIO


@pytest.fixture
def config_file(tiny_config, tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(tiny_config.body()))
    return path


@pytest.fixture
def out_dir(tmp_path):
    return tmp_path / "out"


def test_train_writes_a_run(config_file, out_dir, tiny_config, capsys):
    assert main(["train", "--config", str(config_file), "--out", str(out_dir)]) == EXIT_OK
    run_dir = out_dir / tiny_config.run_id
    assert (run_dir / "record.json").exists()
    assert (run_dir / "embeddings.csv").exists()
    output = capsys.readouterr().out
    assert "=" * 70 in output
    assert f"Run ID: {tiny_config.run_id}" in output


def test_quiet_train_prints_nothing(config_file, out_dir, capsys):
    assert main(["train", "--config", str(config_file), "--out", str(out_dir), "--quiet"]) == EXIT_OK
    assert capsys.readouterr().out == ""


def test_seed_flag_changes_the_run(config_file, out_dir, tiny_config):
    assert main(["train", "--config", str(config_file), "--out", str(out_dir), "--seed", "3"]) == 0
    assert (out_dir / tiny_config.with_seed(3).run_id / "record.json").exists()


@pytest.mark.parametrize("content", [{"loss": {"tau": 0.0}}, {"loss": {"temperature": 0.1}}])
def test_bad_config_exits_2(tmp_path, content, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(content))
    assert main(["train", "--config", str(path), "--out", str(tmp_path)]) == EXIT_CONFIG
    assert "Error:" in capsys.readouterr().err


def test_divergence_exits_3(config_file, out_dir, tiny_config, monkeypatch):
    real = trainer.compute_loss
    monkeypatch.setattr(trainer, "compute_loss",
                        lambda *a, **k: dataclasses.replace(real(*a, **k), value=float("inf")))
    assert main(["train", "--config", str(config_file), "--out", str(out_dir)]) == EXIT_DIVERGENCE
    dump = ResultsIO.load_json(out_dir / f"divergence_{tiny_config.run_id}.json")
    assert dump["dump"]["step"] == 0


def test_metrics_of_a_hand_built_file(tmp_path):
    angles = np.radians([0.0, 10.0, 90.0, 80.0])
    z = np.column_stack([np.cos(angles), np.sin(angles)])
    embeddings = ResultsIO.write_embeddings_csv(tmp_path / "e.csv", z, [0, 0, 1, 1], [0, 0, 1, 1])
    report_path = tmp_path / "m.json"
    assert main(["metrics", "--embeddings", str(embeddings), "--output", str(report_path),
                 "--out", str(tmp_path)]) == EXIT_OK
    report = ResultsIO.load_json(report_path)
    assert report["sad"] == pytest.approx(2 * np.sin(np.radians(5.0)))
    assert report["saa"] == 1.0
    assert report["cac"] == 1.0
    assert report["r_count"] == 1


def test_metrics_needs_a_file(tmp_path):
    assert main(["metrics", "--out", str(tmp_path)]) == EXIT_CONFIG


def test_verify_bound_at_init(config_file, out_dir, capsys):
    assert main(["verify-bound", "--config", str(config_file), "--out", str(out_dir),
                 "--table"]) == EXIT_OK
    evaluation = ResultsIO.load_json(out_dir / "bound.json")
    assert evaluation["all_satisfied"] is True
    assert len(evaluation["anchors"]) == 32
    assert "rhs proof" in capsys.readouterr().out


def test_strict_bound_on_a_spread_batch_exits_4(tmp_path):
    z = np.random.default_rng(0).standard_normal((8, 3))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    embeddings = ResultsIO.write_embeddings_csv(tmp_path / "e.csv", z, [0, 0, 1, 1, 2, 2, 3, 3],
                                                [0, 0, 0, 0, 0, 0, 1, 1])
    argv = ["verify-bound", "--embeddings", str(embeddings), "--out", str(tmp_path)]
    assert main(argv + ["--strict"]) == EXIT_BOUND
    assert main(argv) == EXIT_OK


def test_sweep_and_resume(config_file, out_dir, capsys):
    argv = ["sweep", "--config", str(config_file), "--out", str(out_dir), "--axis", "temperature",
            "--values", "0.1, 0.2", "--seeds", "0", "--workers", "1"]
    assert main(argv) == EXIT_OK
    assert "Completed: 2" in capsys.readouterr().out
    assert main(argv) == EXIT_OK
    assert "skipped (already done): 2" in capsys.readouterr().out
    assert len(ResultsIO.read_sweep_rows(out_dir / "sweep.csv")) == 2


def test_sweep_needs_an_axis(config_file, out_dir):
    assert main(["sweep", "--config", str(config_file), "--out", str(out_dir)]) == EXIT_CONFIG


def test_correlate_with_too_few_rows_exits_2(config_file, out_dir):
    main(["sweep", "--config", str(config_file), "--out", str(out_dir), "--axis", "temperature",
          "--values", "0.1", "--seeds", "0", "--workers", "1"])
    assert main(["correlate", "--out", str(out_dir)]) == EXIT_CONFIG


def test_gen_data(config_file, tmp_path):
    target = tmp_path / "data.csv"
    assert main(["gen-data", "--config", str(config_file), "--output", str(target)]) == EXIT_OK
    assert len(target.read_text().splitlines()) == 49


def test_probe_and_export_of_a_stored_run(config_file, out_dir, tiny_config):
    main(["train", "--config", str(config_file), "--out", str(out_dir), "--quiet"])
    run_dir = out_dir / tiny_config.run_id
    assert main(["probe", str(run_dir)]) == EXIT_OK
    stored = ResultsIO.load_json(run_dir / "record.json")["probe"]
    assert ResultsIO.load_json(run_dir / "probe.json") == stored

    exported = out_dir / "exported.csv"
    assert main(["export-embeddings", str(run_dir), "--output", str(exported)]) == EXIT_OK
    assert exported.read_text() == (run_dir / "embeddings.csv").read_text()


def test_version(capsys):
    with pytest.raises(SystemExit) as excinfo:
        build_parser().parse_args(["--version"])
    assert excinfo.value.code == 0
    assert __version__ in capsys.readouterr().out
