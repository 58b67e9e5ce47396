import json

import numpy as np
import pytest

from attpose.cli import main
from attpose.config import OUT_ENV, dump_run_config, load_run_config
from attpose.errors import ConfigurationError


def train_small(cfg, out, *extra):
    assert main(["train", "--config", str(cfg), "--out", str(out), *extra]) == 0
    return out / "checkpoint.ckpt"


@pytest.fixture
def trained(small_cfg_path, tmp_path):
    return small_cfg_path, train_small(small_cfg_path, tmp_path / "run")


def test_train_produces_checkpoint_and_log(small_cfg_path, tmp_path, capsys):
    ckpt = train_small(small_cfg_path, tmp_path / "run", "--epochs", "1")
    assert ckpt.is_file()
    log = (tmp_path / "run" / "train.log").read_text().splitlines()
    assert log[0] == "# epoch step loss beta gamma"
    assert len(log) == 1 + 3
    assert (tmp_path / "run" / "config.resolved.ini").is_file()
    assert "checkpoint" in capsys.readouterr().out


def test_temporal_flag_logs_pairwise(small_cfg_path, tmp_path):
    train_small(small_cfg_path, tmp_path / "run", "--epochs", "1", "--temporal")
    log = (tmp_path / "run" / "train.log").read_text().splitlines()
    assert log[0].endswith("pairwise")
    assert all(len(line.split()) == 6 for line in log[1:])


def test_missing_dataset_exit_2_without_output(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text(f"[data]\nsource = manifest\npath = {tmp_path / 'nope' / 'manifest.txt'}\n[train]\nepochs = 1\n")
    out = tmp_path / "out"
    assert main(["train", "--config", str(cfg), "--out", str(out)]) == 2
    assert not out.exists()
    assert "does not exist" in capsys.readouterr().err


def test_bad_config_values_exit_2(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("[train]\nepochs = 1\nlearning_rate = fast\n")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    cfg.write_text("[bogus]\nx = 1\n[train]\nepochs = 1\n")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2


def test_training_abort_exit_1(small_cfg_path, tmp_path):
    text = small_cfg_path.read_text().replace("frame_spacing = 5", "frame_spacing = 50")
    small_cfg_path.write_text(text)
    assert main(["train", "--config", str(small_cfg_path), "--out", str(tmp_path / "o"), "--temporal"]) == 1


def test_eval_twice_byte_identical(trained, tmp_path, capsys):
    cfg, ckpt = trained
    for name in ("a", "b"):
        assert main(["eval", "--config", str(cfg), "--checkpoint", str(ckpt), "--out", str(tmp_path / name)]) == 0
    for f in ("report.json", "report_errors.tsv", "report_table.txt", "report_summary.txt"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert "median:" in capsys.readouterr().out
    rep = json.loads((tmp_path / "a" / "report.json").read_text())
    assert np.isfinite(rep["median_position_m"]) and np.isfinite(rep["median_rotation_deg"])


def test_corrupt_checkpoint_exit_3(trained, tmp_path, capsys):
    cfg, ckpt = trained
    ckpt.write_bytes(ckpt.read_bytes()[:200])
    assert main(["eval", "--config", str(cfg), "--checkpoint", str(ckpt), "--out", str(tmp_path / "e")]) == 3
    assert str(ckpt) in capsys.readouterr().err


def test_version_mismatch_exit_3(trained, tmp_path):
    cfg, ckpt = trained
    ckpt.write_bytes(ckpt.read_bytes().replace(b"version: 1\n", b"version: 2\n", 1))
    assert main(["eval", "--config", str(cfg), "--checkpoint", str(ckpt), "--out", str(tmp_path / "e")]) == 3


def test_unknown_mode_exit_2(trained, tmp_path):
    cfg, ckpt = trained
    with pytest.raises(SystemExit) as exc:
        main(["analyze", "--config", str(cfg), "--checkpoint", str(ckpt), "--mode", "bogus"])
    assert exc.value.code == 2


def test_analyze_modes(trained, tmp_path):
    cfg, ckpt = trained
    out = tmp_path / "an"
    base = ["analyze", "--config", str(cfg), "--checkpoint", str(ckpt), "--out", str(out)]
    assert main(base + ["--mode", "saliency", "--frame", "3"]) == 0
    grid = np.loadtxt(out / "saliency_000003.txt")
    assert grid.shape == (32, 32) and grid.min() >= 0 and grid.max() <= 1
    assert (out / "saliency_000003.png").is_file()
    assert main(base + ["--mode", "distances", "--anchor", "0"]) == 0
    first = (out / "distances.txt").read_text().splitlines()[0]
    assert first == "0 0.0"
    assert main(base + ["--mode", "trajectory"]) == 0
    assert (out / "trajectory.png").is_file()
    assert len((out / "trajectory.tsv").read_text().splitlines()) == 1 + 24


def test_ablate_well_formed(small_cfg_path, tmp_path, capsys):
    out = tmp_path / "abl"
    assert main(["ablate", "--config", str(small_cfg_path), "--out", str(out), "--epochs", "1"]) == 0
    rows = (out / "ablation.tsv").read_text().splitlines()
    assert rows[0].split("\t")[0] == "variant"
    assert [r.split("\t")[0] for r in rows[1:]] == ["basic", "attention", "temporal"]
    for r in rows[1:]:
        assert all(np.isfinite(float(v)) for v in r.split("\t")[1:])
    table = (out / "ablation.txt").read_text().splitlines()
    assert table[0].split(" | ")[0].strip() == "Sequence"
    assert table[-1].startswith("Average")
    assert (out / "ablation.png").is_file()
    assert "train_temporal.log" in {p.name for p in out.iterdir()}


def test_synth_data_round_trip(tmp_path):
    assert main(["synth-data", "--out", str(tmp_path / "d"), "--frames", "5"]) == 0
    cfg = tmp_path / "c.cfg"
    cfg.write_text(f"[data]\nsource = manifest\npath = {tmp_path / 'd' / 'manifest.txt'}\n"
                   "[encoder]\nbackbone = tiny-residual\nfeature_dim = 32\nattention_ratio = 4\nwidth = 8\n"
                   "[preprocess]\nrescale_short_side = 40\ncrop = 32\n[train]\nepochs = 1\nbatch_size = 5\n")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0


class TestConfig:
    def test_out_precedence(self, small_cfg_path, tmp_path, monkeypatch):
        monkeypatch.setenv(OUT_ENV, str(tmp_path / "env"))
        assert load_run_config(small_cfg_path).out == tmp_path / "env"
        assert load_run_config(small_cfg_path, {"out": str(tmp_path / "flag")}).out == tmp_path / "flag"
        small_cfg_path.write_text(small_cfg_path.read_text() + f"\n[run]\nout = {tmp_path / 'file'}\n")
        assert load_run_config(small_cfg_path).out == tmp_path / "file"

    def test_resolved_echo_reloads(self, small_cfg_path, tmp_path):
        cfg = load_run_config(small_cfg_path, {"seed": 3, "temporal": True})
        echo = tmp_path / "echo.ini"
        echo.write_text(dump_run_config(cfg))
        again = load_run_config(echo)
        assert dump_run_config(again) == dump_run_config(cfg)
        assert again.temporal is not None and again.seed == 3

    def test_epochs_required(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("[data]\nn_frames = 3\n")
        with pytest.raises(ConfigurationError):
            load_run_config(cfg)
