"""
Tests for the urpe-lab command line
"""

import os

import pandas as pd
import pytest

import config
from exceptions import ConfigError
from main import build_run_config, load_run_config, main

TINY = [
    "--model.L=1", "--model.H=2", "--model.d=8", "--model.d_H=4", "--model.r=16",
    "--model.n_max=6", "--model.dtype=float64", "--model.use_norm=false",
    "--train.steps=4", "--train.warmup_steps=1", "--train.batch=4", "--train.eval_every=2",
    "--eval_size=8",
]


def test_missing_config_file(tmp_path):
    assert main(["train", "--config", str(tmp_path / "missing.yaml")]) == 1


def test_unknown_config_key(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("task: pi\nmodel:\n  depth: 3\n")
    assert main(["train", "--config", str(path)]) == 1
    assert main(["census", "--model.depth=3"]) == 1


def test_malformed_override():
    assert main(["census", "--model.L"]) == 1


def test_unknown_probe_name(tmp_path):
    assert main(["probe", "nonsense", "--output-dir", str(tmp_path)]) == 1


def test_probe_command_writes_report(tmp_path, capsys):
    assert main(["probe", "lower-bound", "--output-dir", str(tmp_path)]) == 0
    assert "probe=lower-bound pass=true" in capsys.readouterr().out
    report = (tmp_path / config.PROBE_REPORT_FILE).read_text()
    assert report.startswith("probe=lower-bound pass=true")


def test_probe_rejects_stray_arguments(tmp_path):
    assert main(["probe", "census", "--output-dir", str(tmp_path), "--bogus=1"]) == 1


def test_census_output(capsys):
    assert main(["census", "--model.H=10", "--model.n_max=200"]) == 0
    out = capsys.readouterr().out
    assert "H=10 n_max=200" in out
    assert "urpe_delta=3990" in out
    assert "formula=3990" in out


def test_train_then_export(tmp_path, capsys):
    out_dir = tmp_path / "run"
    code = main(["train", "--task", "etp", "--pe", "urpe", "--vocab", "5", "--output-dir", str(out_dir)] + TINY)
    assert code == 0
    summary = capsys.readouterr().out.strip().splitlines()[-1]
    assert summary.startswith("task=etp variant=urpe final_acc=")
    metrics = pd.read_csv(out_dir / config.METRICS_FILE)
    assert list(metrics["step"]) == [2, 4]

    ckpt = out_dir / config.CHECKPOINT_FILE
    assert main(["export", str(ckpt), str(tmp_path / "matrices")]) == 0
    assert (tmp_path / "matrices" / "C_h1.csv").exists()
    assert (tmp_path / "matrices" / "B_h0.pgm").exists()


def test_export_missing_checkpoint(tmp_path):
    assert main(["export", str(tmp_path / "nope.ckpt"), str(tmp_path / "out")]) == 1


def test_ablate_depth_writes_table(tmp_path, capsys):
    code = main(["ablate-depth", "--depths", "1", "2", "--vocab", "5", "--output-dir", str(tmp_path)] + TINY)
    assert code == 0
    table = pd.read_csv(tmp_path / config.DEPTH_ABLATION_FILE)
    assert list(table.columns) == ["L", "rpe_acc", "urpe_acc", "urpe_minus_rpe"]
    assert list(table["L"]) == [1, 2]
    assert "L=2" in capsys.readouterr().out


def test_ablate_length_rejects_odd_etp_lengths(tmp_path):
    assert main(["ablate-length", "--task", "etp", "--lengths", "5", "--output-dir", str(tmp_path)] + TINY) == 1


def test_dump_data(tmp_path):
    out = tmp_path / "data.txt"
    assert main(["dump-data", "--task", "etp", "--n", "4", "--vocab", "5", "--batch", "3", "--out", str(out)]) == 0
    assert len(out.read_text().splitlines()) == 3


# run configuration

def test_run_config_defaults_and_variant():
    run_cfg = build_run_config({"task": "etp", "model": {"variant": "urpe-shaw", "n_max": 8, "vocab_in": 4}})
    assert run_cfg.model.pe_kind == "rpe_shaw" and run_cfg.model.urpe
    assert run_cfg.model.vocab_out == 5
    assert run_cfg.model.use_norm == config.USE_NORM
    assert run_cfg.seq_len == 8


def test_run_config_validation():
    with pytest.raises(ConfigError):
        build_run_config({"task": "copy"})
    with pytest.raises(ConfigError):
        build_run_config({"task": "etp", "model": {"n_max": 7}})
    with pytest.raises(ConfigError):
        build_run_config({"model": {"variant": "alibi"}})
    with pytest.raises(ConfigError):
        build_run_config({"model": {"vocab_out": 3}})


def test_shipped_configs_load():
    root = os.path.dirname(__file__)
    pi = load_run_config(os.path.join(root, "configs", "desk_pi.yaml"))
    etp = load_run_config(os.path.join(root, "configs", "desk_etp.yaml"), {"train": {"steps": 10, "warmup_steps": 0}})
    assert pi.task == "pi" and pi.model.variant == "urpe" and pi.model.vocab_out == 64
    assert etp.task == "etp" and etp.model.vocab_out == 11
    assert etp.train.steps == 10


@pytest.mark.slow
def test_bench_command(tmp_path, capsys):
    assert main(["bench", "--n", "128", "--strict", "--output-dir", str(tmp_path)]) == 0
    assert "n=128 overhead_ratio=" in capsys.readouterr().out
    assert (tmp_path / config.BENCH_FILE).exists()


@pytest.mark.slow
def test_desk_scale_depth_ablation_favours_urpe(tmp_path):
    depths = [str(L) for L in config.ABLATION_DEPTHS]
    assert main(["ablate-depth", "--task", "pi", "--depths", *depths, "--output-dir", str(tmp_path)]) == 0
    table = pd.read_csv(tmp_path / config.DEPTH_ABLATION_FILE)
    assert list(table["L"]) == config.ABLATION_DEPTHS
    assert (table["urpe_acc"] >= table["rpe_acc"]).all()
