"""
Tests for the run configuration and the command-line interface
"""

import json
import struct
import zlib

import pandas as pd
import pytest
from pydantic import ValidationError

from carspeed.config import DEFAULT_CONFIG_PATH, RunConfig, field_help, load_run_config
from carspeed.main import run


class TestConfig:
    """JSON run configuration with overrides"""

    def test_defaults_file_matches_model(self):
        """The shipped config file equals the built-in defaults"""
        assert load_run_config() == RunConfig(precision=load_run_config().precision)
        assert load_run_config(DEFAULT_CONFIG_PATH).train.decay_steps == 30_000

    def test_none_overrides_are_ignored(self):
        """Unset flags keep file values; nested train overrides merge"""
        cfg = load_run_config(overrides={"window_size": None, "train": {"max_epochs": 3, "batch_size": None}})
        assert cfg.window_size == 80
        assert cfg.train.max_epochs == 3
        assert cfg.train.batch_size == 32

    def test_file_then_flags(self, tmp_path):
        """Flags win over the file"""
        path = tmp_path / "run.json"
        path.write_text(json.dumps({"window_size": 40, "model": "lstm"}))
        cfg = load_run_config(path, {"window_size": 20})
        assert (cfg.model, cfg.window_size) == ("lstm", 20)

    def test_validation(self):
        """Out-of-range values and unknown keys are rejected"""
        with pytest.raises(ValidationError):
            RunConfig(window_size=4)
        with pytest.raises(ValidationError):
            RunConfig(model="gru")
        with pytest.raises(ValidationError):
            RunConfig(colour="red")

    def test_decimation_factor(self):
        """500 Hz to 20 Hz is a factor of 25"""
        assert RunConfig().decimation_factor == 25

    def test_field_help_shows_default(self):
        """Help strings quote the default"""
        assert field_help("window_size", "samples").endswith("[samples] [default: 80]")
        assert "[default: 30000]" in field_help("decay_steps", section="train")


class TestCli:
    """Exit codes and subcommand wiring"""

    def test_help(self, capsys):
        """--help succeeds and lists the subcommands"""
        assert run(["--help"]) == 0
        out = capsys.readouterr().out
        for name in ("synth", "preprocess", "train", "eval", "sweep", "compare", "infer", "trace"):
            assert name in out

    def test_subcommand_help(self):
        """Every subcommand has help"""
        assert run(["sweep", "-h"]) == 0

    def test_unknown_option(self):
        """Usage errors exit with 2"""
        assert run(["train", "--no-such-flag"]) == 2

    def test_invalid_value(self):
        """Values the config model refuses are usage errors"""
        assert run(["train", "--window", "3"]) == 2

    def test_bad_model_list(self):
        """Unknown names in --models are usage errors"""
        assert run(["compare", "--models", "lstm,gru"]) == 2

    def test_missing_weights(self, tmp_path):
        """Operational failures exit with 1"""
        assert run(["infer", "--weights", str(tmp_path / "none.csnw"), "--data", str(tmp_path)]) == 1

    def test_malformed_weights_header(self, tmp_path):
        """A weights header missing its entries is reported, not raised"""
        header = json.dumps({"name": "lstm"}).encode("utf-8")
        path = tmp_path / "bad.csnw"
        path.write_bytes(b"CSNW" + struct.pack("<BI", 1, len(header)) + header + struct.pack("<I", zlib.crc32(b"")))
        assert run(["infer", "--weights", str(path), "--data", str(tmp_path)]) == 1

    def test_missing_data(self, tmp_path):
        """A missing session directory is an operational failure"""
        assert run(["preprocess", "--data", str(tmp_path / "nowhere"), "--window", "10"]) == 1

    def test_synth(self, tmp_path, capsys):
        """synth writes session file pairs"""
        out = tmp_path / "corpus"
        assert run(["synth", "--hours", "0.02", "--seed", "1", "--out", str(out)]) == 0
        assert len(list(out.glob("*.imu.csv"))) == len(list(out.glob("*.gps.csv"))) >= 1
        assert "sessions" in capsys.readouterr().out

    def test_preprocess(self, session_dir, tmp_path):
        """preprocess caches every session's windows"""
        out = tmp_path / "w10.npz"
        assert run(["preprocess", "--data", str(session_dir), "--window", "10", "--out", str(out)]) == 0
        assert out.exists()

    @pytest.mark.slow
    def test_train_then_infer_and_trace(self, session_dir, tmp_path, capsys):
        """A trained weights file drives infer, trace and eval"""
        weights = tmp_path / "model.csnw"
        args = ["--data", str(session_dir), "--model", "dnn_star", "--window", "10", "--epochs", "1", "--precision", "wide"]
        assert run(["train", *args, "--out", str(weights)]) == 0
        assert weights.exists()
        assert weights.with_suffix(".history.csv").exists()
        capsys.readouterr()

        assert run(["infer", "--weights", str(weights), "--data", str(session_dir), "--session", "drive_001"]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert lines[0] == "t,gt_speed,pred_speed"
        assert len(lines) == 1 + 49

        trace = tmp_path / "trace.csv"
        assert run([
            "trace", "--weights", str(weights), "--data", str(session_dir),
            "--session", "drive_001", "--out", str(trace), "--speed-limit", "50",
        ]) == 0
        assert (pd.read_csv(trace)["pred_speed"] >= 0).all()

        report = tmp_path / "eval.csv"
        assert run(["eval", "--weights", str(weights), "--data", str(session_dir), "--out", str(report)]) == 0
        assert pd.read_csv(report)["model"].tolist() == ["dnn_star"]

    def test_synth_repeats_byte_for_byte(self, tmp_path):
        """synth run twice with one seed writes the same CSV bytes"""
        for name in ("a", "b"):
            assert run(["synth", "--hours", "0.02", "--seed", "3", "--out", str(tmp_path / name)]) == 0
        names = sorted(p.name for p in (tmp_path / "a").glob("*.csv"))
        assert names and names == sorted(p.name for p in (tmp_path / "b").glob("*.csv"))
        for name in names:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    @pytest.mark.slow
    def test_train_and_trace_repeat_byte_for_byte(self, session_dir, tmp_path):
        """Training twice with one seed reproduces the weights file, the losses and the trace CSV"""
        args = ["--data", str(session_dir), "--model", "dnn_star", "--window", "10", "--epochs", "2", "--precision", "wide"]
        for name in ("a", "b"):
            out = tmp_path / name
            assert run(["train", *args, "--seed", "5", "--out", str(out / "model.csnw")]) == 0
            assert run([
                "trace", "--weights", str(out / "model.csnw"), "--data", str(session_dir),
                "--session", "drive_001", "--out", str(out / "trace.csv"),
            ]) == 0
        a, b = tmp_path / "a", tmp_path / "b"
        assert (a / "model.csnw").read_bytes() == (b / "model.csnw").read_bytes()
        assert (a / "trace.csv").read_bytes() == (b / "trace.csv").read_bytes()
        # wall-clock seconds are the only column allowed to differ
        history = [pd.read_csv(d / "model.history.csv").drop(columns="seconds") for d in (a, b)]
        pd.testing.assert_frame_equal(*history)
