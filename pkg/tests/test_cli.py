import json
import subprocess
import sys

import numpy as np
import pytest

from tagformer.cli import main
from tagformer.config import SCHEMA, augment_spec, resolve_config
from tagformer.errors import ConfigError

COMMANDS = ["synth-data", "split", "train-teacher", "train-student", "evaluate", "augment-preview", "config-reference"]

SMALL_INI = """
[model]
preset = desk
conv_channels = 2
attn_dim = 8
n_layers = 1
n_heads = 2

[train]
batch_size = 4
max_epochs = 2
lr = 0.001
chunk_seconds = 1.0

[eval]
chunk_seconds = 1.0
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "small.ini").write_text(SMALL_INI)
    assert main(["synth-data", "--out", str(root / "d"), "--artists", "8", "--tracks-per-artist", "3",
                 "--clip-seconds", "1.5", "--unlabeled-artists", "2", "--seed", "1"]) == 0
    assert main(["split", "--manifest", str(root / "d" / "manifest.tsv"), "--out", str(root / "split.tsv"),
                 "--ratios", "0.5,0.25,0.25"]) == 0
    assert main(["train-teacher", "--split", str(root / "split.tsv"), "--out", str(root / "teacher"),
                 "--config", str(root / "small.ini")]) == 0
    return root


class TestHelp:
    @pytest.mark.parametrize("command", COMMANDS)
    def test_help_exits_zero(self, command):
        proc = subprocess.run([sys.executable, "-m", "tagformer.cli", command, "--help"], capture_output=True, text=True)
        assert proc.returncode == 0 and "usage" in proc.stdout

    def test_no_command(self, capsys):
        assert main([]) == 1


class TestUsageErrors:
    def test_missing_out(self, capsys):
        assert main(["synth-data", "--artists", "2"]) == 1
        assert "--out" in capsys.readouterr().err

    def test_bad_ratio_sum(self, workspace):
        assert main(["split", "--manifest", str(workspace / "d" / "manifest.tsv"), "--out", str(workspace / "x.tsv"),
                     "--ratios", "0.5,0.5,0.5"]) == 1

    def test_unknown_config_key(self, tmp_path):
        (tmp_path / "bad.ini").write_text("[train]\nlearning_rate = 1\n")
        assert main(["synth-data", "--out", str(tmp_path / "o"), "--config", str(tmp_path / "bad.ini")]) == 1

    def test_corrupt_checkpoint_names_file(self, workspace, tmp_path, capsys):
        bad = tmp_path / "broken.ckpt"
        data = bytearray((workspace / "teacher" / "model.ckpt").read_bytes())
        data[-5] ^= 0xFF
        bad.write_bytes(bytes(data))
        code = main(["evaluate", "--checkpoint", str(bad), "--split", str(workspace / "split.tsv"),
                     "--out", str(tmp_path / "e")])
        assert code == 2 and "broken.ckpt" in capsys.readouterr().err

    def test_divergence_exit_code(self, workspace, tmp_path):
        code = main(["train-teacher", "--split", str(workspace / "split.tsv"), "--out", str(tmp_path / "t"),
                     "--config", str(workspace / "small.ini"), "--lr", "1e30"])
        assert code == 3


class TestPipeline:
    def test_synth_counts(self, workspace):
        assert len(list((workspace / "d" / "audio").glob("*.wav"))) == 30

    def test_param_counts_printed(self, workspace, tmp_path, capsys):
        main(["train-teacher", "--split", str(workspace / "split.tsv"), "--out", str(tmp_path / "t"),
              "--config", str(workspace / "small.ini"), "--max-epochs", "1"])
        out = capsys.readouterr().out
        assert "param_count default transformer: " in out and "param_count kd preset: " in out

    def test_resolved_config_snapshot(self, workspace):
        snap = (workspace / "teacher" / "config.resolved.ini").read_text()
        assert "attn_dim = 8" in snap and "lr = 0.001" in snap

    def test_teacher_rerun_bit_identical(self, workspace, tmp_path):
        assert main(["train-teacher", "--split", str(workspace / "split.tsv"), "--out", str(tmp_path / "again"),
                     "--config", str(workspace / "small.ini")]) == 0
        for name in ("model.ckpt", "valid_report.tsv", "valid_report.json"):
            assert (tmp_path / "again" / name).read_bytes() == (workspace / "teacher" / name).read_bytes()

    def test_student_and_evaluate(self, workspace, tmp_path, capsys):
        assert main(["train-student", "--split", str(workspace / "split.tsv"), "--teacher",
                     str(workspace / "teacher" / "model.ckpt"), "--out", str(tmp_path / "s"), "--mode", "ke",
                     "--iterations", "2", "--config", str(workspace / "small.ini"), "--max-epochs", "1"]) == 0
        lineage = json.loads((tmp_path / "s" / "lineage.json").read_text())
        assert len(lineage) == 2
        assert main(["evaluate", "--checkpoint", str(tmp_path / "s" / "model.ckpt"), "--split",
                     str(workspace / "split.tsv"), "--out", str(tmp_path / "e"), "--chunk-seconds", "1.0",
                     "--length-sweep", "1,1.2,1.5"]) == 0
        sweep = (tmp_path / "e" / "length_sweep.tsv").read_text().splitlines()
        assert sweep[0] == "seconds\troc_auc\tpr_auc" and len(sweep) == 4
        assert (tmp_path / "e" / "report.tsv").exists()

    def test_kd_student_must_be_smaller(self, workspace, tmp_path):
        code = main(["train-student", "--split", str(workspace / "split.tsv"), "--teacher",
                     str(workspace / "teacher" / "model.ckpt"), "--out", str(tmp_path / "kd"), "--mode", "kd",
                     "--config", str(workspace / "small.ini")])
        assert code == 1

    def test_evaluate_rerun_identical(self, workspace, tmp_path):
        for name in ("a", "b"):
            assert main(["evaluate", "--checkpoint", str(workspace / "teacher" / "model.ckpt"), "--split",
                         str(workspace / "split.tsv"), "--out", str(tmp_path / name), "--chunk-seconds", "1.0"]) == 0
        assert (tmp_path / "a" / "report.tsv").read_bytes() == (tmp_path / "b" / "report.tsv").read_bytes()

    def test_augment_preview(self, workspace, tmp_path):
        wav = next((workspace / "d" / "audio").glob("*.wav"))
        assert main(["augment-preview", "--input", str(wav), "--out", str(tmp_path / "p"), "--count", "3",
                     "--seed", "2"]) == 0
        plan = json.loads((tmp_path / "p" / "plan.json").read_text())
        assert len(plan["previews"]) == 3
        assert sorted(f.name for f in (tmp_path / "p").glob("*.wav")) == [
            "augmented_0.wav", "augmented_1.wav", "augmented_2.wav", "original.wav"]


class TestConfig:
    def test_defaults_documented(self):
        cfg = resolve_config(env={})
        assert cfg["train"]["lr"] == 1e-4 and cfg["train"]["patience"] == 20
        assert all(spec.doc for keys in SCHEMA.values() for spec in keys.values())

    def test_env_override(self):
        cfg = resolve_config(env={"TAGFORMER_TRAIN__BATCH_SIZE": "8", "OTHER": "x"})
        assert cfg["train"]["batch_size"] == 8

    def test_precedence(self, tmp_path):
        (tmp_path / "c.ini").write_text("[train]\nbatch_size = 4\n")
        env = {"TAGFORMER_TRAIN__BATCH_SIZE": "8"}
        assert resolve_config(tmp_path / "c.ini", env={})["train"]["batch_size"] == 4
        assert resolve_config(tmp_path / "c.ini", env=env)["train"]["batch_size"] == 8
        assert resolve_config(tmp_path / "c.ini", {("train", "batch_size"): 2}, env=env)["train"]["batch_size"] == 2

    @pytest.mark.parametrize("env", [{"TAGFORMER_TRAIN__NOPE": "1"}, {"TAGFORMER_NOPE__LR": "1"},
                                     {"TAGFORMER_TRAIN__LR": "fast"}, {"TAGFORMER_LR": "1"}])
    def test_bad_env(self, env):
        with pytest.raises(ConfigError):
            resolve_config(env=env)

    def test_augment_section(self):
        cfg = resolve_config(env={"TAGFORMER_AUGMENT__ENABLED": "gain,polarity", "TAGFORMER_AUGMENT__GAIN_P": "1"})
        spec = augment_spec(cfg)
        assert spec.transforms["gain"].enabled and spec.transforms["gain"].p == 1.0
        assert not spec.transforms["reverb"].enabled

    def test_snapshot_roundtrip(self, tmp_path):
        cfg = resolve_config(env={"TAGFORMER_TRAIN__LR": "0.003"})
        (tmp_path / "snap.ini").write_text(cfg.to_ini())
        assert resolve_config(tmp_path / "snap.ini", env={}) == cfg
