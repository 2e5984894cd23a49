import json

import numpy as np
import pytest

from mtfl import dataio
from mtfl.cli import run
from mtfl.dataio import SynthConfig, synth_generate, write_feature_file


def run_capture(capsys, argv):
    code = run(argv)
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def small_synth(tmp_path, seed=5):
    data = tmp_path / "data"
    code = run(["synth", "--out-dir", str(data), "--normal", "4",
                "--abnormal", "4", "--d", "8", "--seed", str(seed)])
    assert code == 0
    return data


def train_small(tmp_path, data, extra=()):
    out = tmp_path / "run"
    code = run(["train", "--manifest", str(data / "train_manifest.csv"),
                "--out-dir", str(out), "--epochs", "2", "--batch-half", "2",
                "--seed", "1", "--t", "8", "--heads", "2",
                "--margin", "4", *extra])
    assert code == 0
    return out


class TestGradcheckCommand:
    def test_defaults_pass(self, capsys):
        code, out, _ = run_capture(capsys, ["gradcheck"])
        assert code == 0
        assert "PASS" in out
        assert "max relative error" in out


class TestSynthCommand:
    def test_writes_manifests_and_features(self, tmp_path):
        data = small_synth(tmp_path)
        assert (data / "train_manifest.csv").exists()
        assert (data / "test_manifest.csv").exists()
        ds = dataio.read_manifest(data / "train_manifest.csv")
        assert len(ds.videos) == 8


class TestTrainCommand:
    def test_trains_and_checkpoints(self, tmp_path):
        data = small_synth(tmp_path)
        out = train_small(tmp_path, data)
        assert (out / "final.mtfc").exists()
        assert (out / "loss_log.csv").exists()

    def test_mismatched_d_is_validation_error(self, tmp_path, capsys):
        data = small_synth(tmp_path)
        # corrupt one video's short-scale features to a different D
        victim = next((data / "features").glob("train_abnormal_0000_short.mtfb"))
        write_feature_file(victim, np.ones((4, 6)))
        code, _, err = run_capture(capsys, [
            "train", "--manifest", str(data / "train_manifest.csv"),
            "--out-dir", str(tmp_path / "x"), "--seed", "0"])
        assert code == 1
        assert "train_abnormal_0000" in err
        assert "Traceback" not in err

    def test_missing_seed_prints_one(self, tmp_path, capsys):
        data = small_synth(tmp_path)
        code, out, _ = run_capture(capsys, [
            "train", "--manifest", str(data / "train_manifest.csv"),
            "--out-dir", str(tmp_path / "run"), "--epochs", "1",
            "--batch-half", "2", "--t", "8", "--heads", "2", "--margin", "4"])
        assert code == 0
        assert "seed=" in out

    def test_unknown_flag_rejected(self, tmp_path):
        assert run(["train", "--nonsense"]) == 1


class TestScoreEvalCommands:
    def test_full_pipeline_output_format(self, tmp_path, capsys):
        data = small_synth(tmp_path)
        out = train_small(tmp_path, data)
        scores = tmp_path / "scores"
        code = run(["score", "--checkpoint", str(out / "final.mtfc"),
                    "--manifest", str(data / "test_manifest.csv"),
                    "--out-dir", str(scores)])
        assert code == 0
        curves = list(scores.glob("*.csv"))
        assert len(curves) == 2  # test split defaults to a quarter per class
        code, text, _ = run_capture(capsys, [
            "eval", "--scores-dir", str(scores),
            "--manifest", str(data / "test_manifest.csv")])
        assert code == 0
        lines = dict(line.split("=") for line in text.splitlines()
                     if "=" in line)
        assert 0.0 <= float(lines["AUC"]) <= 1.0
        assert 0.0 <= float(lines["AP"]) <= 1.0

    def test_missing_checkpoint_is_runtime_error(self, tmp_path, capsys):
        data = small_synth(tmp_path)
        code, _, err = run_capture(capsys, [
            "score", "--checkpoint", str(tmp_path / "missing.mtfc"),
            "--manifest", str(data / "test_manifest.csv"),
            "--out-dir", str(tmp_path / "s")])
        assert code == 2
        assert err


class TestConfigFilePrecedence:
    def test_config_value_used_when_flag_absent(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"t": 4, "d": 8, "heads": 2, "seed": 0,
                                   "tol": 1e-4}))
        code, out, _ = run_capture(capsys, ["gradcheck", "--config", str(cfg)])
        assert code == 0
        assert "PASS" in out

    def test_flag_overrides_config(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        # an impossible tolerance from the config, overridden on the line
        cfg.write_text(json.dumps({"tol": 0.0}))
        code, out, _ = run_capture(capsys, [
            "gradcheck", "--config", str(cfg), "--tol", "1e-4"])
        assert code == 0
        assert "PASS" in out

    def test_bad_config_json_rejected(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text("{not json")
        code, _, err = run_capture(capsys, ["gradcheck", "--config", str(cfg)])
        assert code == 1
        assert "JSON" in err
