"""Tests for the command-line entry point."""

import hashlib
import math
from unittest.mock import patch

import numpy as np
import pytest

from datapipe.service import read_archive_cache
from evalsuite.schemas import MetricReport
from main import main
from trainer.checkpoint import load_checkpoint, load_model

TINY_CONFIG = """\
[data]
n_users = 4
days_per_user = 10

[model]
kernel_widths = 3, 3
channels = 2, 2
embedding_dim = 8
heads = 2
gate_reduction = 32

[train]
support_size = 3
positive_size = 1
negative_size = 2
batch_size = 2
max_epochs = 2
validation_fraction = 0.25

[eval]
support_size = 3
trials_per_user = 5
"""


HELP_FLAGS = {
    "synth": ["--config", "--set", "--seed", "--n-users", "--days-per-user", "--gap-rate", "--out"],
    "train": [
        "--config", "--set", "--seed", "--max-epochs", "--max-steps", "--learning-rate", "--batch-size",
        "--lambda", "--patience", "--variant", "--data", "--labels", "--out", "--history", "--resume",
    ],
    "embed": ["--checkpoint", "--data", "--labels", "--out", "--granularity"],
    "eval": [
        "--config", "--set", "--seed", "--trials-per-user", "--repeats", "--finetune-steps",
        "--checkpoint", "--data", "--labels", "--task", "--out",
    ],
}


def _digest(path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    config = root / "tiny.cfg"
    config.write_text(TINY_CONFIG, encoding="utf-8")
    data = root / "pop.csv"
    checkpoint = root / "model.ckpt"
    assert main(["synth", "--config", str(config), "--out", str(data)]) == 0
    assert main(["train", "--config", str(config), "--data", str(data), "--out", str(checkpoint)]) == 0
    return {"root": root, "config": str(config), "data": str(data), "checkpoint": str(checkpoint)}


class TestHelp:
    """Test cases for --help output."""

    @pytest.mark.parametrize("command", ["synth", "train", "embed", "eval"])
    def test_help_exits_zero(self, command, capsys):
        """Test that every command documents its flags and exits 0."""
        with pytest.raises(SystemExit) as exc:
            main([command, "--help"])
        assert exc.value.code == 0
        text = capsys.readouterr().out
        for flag in HELP_FLAGS[command]:
            assert flag in text

    def test_usage_errors_exit_one(self):
        """Test that bad usage maps to exit code 1."""
        assert main([]) == 1
        assert main(["synth"]) == 1
        assert main(["train", "--data", "x"]) == 1


class TestSynth:
    """Test cases for the synth command."""

    def test_default_population(self, tmp_path):
        """Test 16 users of 30 days with default settings."""
        out = tmp_path / "pop.csv"
        assert main(["synth", "--out", str(out)]) == 0
        archives = read_archive_cache(str(out))
        assert len(archives) == 16
        assert all(len(a.days) == 30 for a in archives)

    def test_seed_controls_bytes(self, tmp_path):
        """Test identical files for one seed and different files for another."""
        paths = [tmp_path / name for name in ("a.csv", "b.csv", "c.csv")]
        for path, seed in zip(paths, ("3", "3", "4")):
            assert main(["synth", "--n-users", "3", "--days-per-user", "2", "--seed", seed, "--out", str(path)]) == 0
        assert _digest(paths[0]) == _digest(paths[1])
        assert _digest(paths[0]) != _digest(paths[2])

    def test_unwritable_output(self, tmp_path):
        """Test exit code 2 for an output path that cannot be created."""
        assert main(["synth", "--n-users", "2", "--out", str(tmp_path / "missing" / "pop.csv")]) == 2

    def test_metrics_file(self, tmp_path):
        """Test the Prometheus dump on exit."""
        metrics = tmp_path / "metrics.prom"
        with patch("main.settings.metrics_file", str(metrics)):
            main(["synth", "--n-users", "2", "--days-per-user", "1", "--out", str(tmp_path / "p.csv")])
        assert "train_steps_total" in metrics.read_text()


class TestTrain:
    """Test cases for the train command."""

    def test_history_file(self, workspace):
        """Test one history line per epoch with five fields."""
        lines = (workspace["root"] / "model.ckpt.history.csv").read_text().splitlines()
        assert len(lines) == 2
        assert [len(line.split(",")) for line in lines] == [5, 5]

    def test_max_epochs_flag(self, workspace, tmp_path):
        """Test that --max-epochs 1 gives exactly one history line and repeats identically."""
        histories = []
        for name in ("a", "b"):
            out = tmp_path / f"{name}.ckpt"
            code = main(
                [
                    "train", "--config", workspace["config"], "--data", workspace["data"],
                    "--out", str(out), "--max-epochs", "1",
                ]
            )
            assert code == 0
            histories.append((tmp_path / f"{name}.ckpt.history.csv").read_bytes())
        assert histories[0] == histories[1]
        assert len(histories[0].splitlines()) == 1

    def test_too_few_users(self, workspace, tmp_path):
        """Test exit code 3 for a single-user dataset."""
        data = tmp_path / "one.csv"
        assert main(["synth", "--n-users", "1", "--days-per-user", "3", "--out", str(data)]) == 0
        code = main(["train", "--config", workspace["config"], "--data", str(data), "--out", str(tmp_path / "m.ckpt")])
        assert code == 3

    def test_divergence_keeps_checkpoint(self, workspace, tmp_path):
        """Test exit code 4 and a loadable last-good checkpoint."""
        out = tmp_path / "div.ckpt"
        with patch("trainer.service.validation_loss", side_effect=[1.0, math.nan]):
            code = main(["train", "--config", workspace["config"], "--data", workspace["data"], "--out", str(out)])
        assert code == 4
        assert load_checkpoint(str(out)).state.epoch == 1

    def test_missing_data(self, workspace, tmp_path):
        """Test exit code 2 for an unreadable dataset."""
        code = main(["train", "--config", workspace["config"], "--data", str(tmp_path / "no.csv"), "--out", "x"])
        assert code == 2


class TestEmbed:
    """Test cases for the embed command."""

    def test_day_lines(self, workspace, tmp_path):
        """Test one line per day whose values parse back to the model output."""
        out = tmp_path / "days.csv"
        args = ["embed", "--checkpoint", workspace["checkpoint"], "--data", workspace["data"], "--out", str(out)]
        assert main(args) == 0
        archives = read_archive_cache(workspace["data"])
        lines = out.read_text().splitlines()
        assert len(lines) == sum(len(a.days) for a in archives)
        model, _ = load_model(workspace["checkpoint"])
        first = lines[0].split(",")
        assert first[0] == archives[0].user_id and first[1] == archives[0].days[0].date.isoformat()
        expected = model.embed_day(archives[0].days[0]).vector
        np.testing.assert_allclose([float(v) for v in first[2:]], expected, rtol=0, atol=1e-12)

    def test_user_lines(self, workspace, tmp_path):
        """Test one line per user."""
        out = tmp_path / "users.csv"
        args = [
            "embed", "--checkpoint", workspace["checkpoint"], "--data", workspace["data"],
            "--out", str(out), "--granularity", "user",
        ]
        assert main(args) == 0
        lines = out.read_text().splitlines()
        assert len(lines) == 4
        assert all(len(line.split(",")) == 1 + 8 for line in lines)

    def test_version_mismatch(self, workspace, tmp_path):
        """Test exit code 5 for a checkpoint from another format version."""
        data = bytearray((workspace["root"] / "model.ckpt").read_bytes())
        data[4] = 99
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(bytes(data))
        args = ["embed", "--checkpoint", str(bad), "--data", workspace["data"], "--out", str(tmp_path / "e.csv")]
        assert main(args) == 5

    def test_end_to_end_determinism(self, tmp_path):
        """Test byte-identical embeddings from two identical pipelines."""
        digests = []
        for name in ("first", "second"):
            root = tmp_path / name
            root.mkdir()
            config = root / "tiny.cfg"
            config.write_text(TINY_CONFIG, encoding="utf-8")
            data, ckpt, emb = root / "pop.csv", root / "m.ckpt", root / "emb.csv"
            assert main(["synth", "--config", str(config), "--out", str(data)]) == 0
            assert main(
                ["train", "--config", str(config), "--data", str(data), "--out", str(ckpt), "--max-steps", "3"]
            ) == 0
            assert main(["embed", "--checkpoint", str(ckpt), "--data", str(data), "--out", str(emb)]) == 0
            digests.append(_digest(emb))
        assert digests[0] == digests[1]


class TestEval:
    """Test cases for the eval command."""

    def _run(self, workspace, tmp_path, task):
        out = tmp_path / "report.txt"
        code = main(
            [
                "eval", "--config", workspace["config"], "--checkpoint", workspace["checkpoint"],
                "--data", workspace["data"], "--task", task, "--out", str(out),
            ]
        )
        return code, out

    def _keys(self, path):
        return {line.split("=")[0].split(".", 1)[1] for line in path.read_text().splitlines()}

    def test_identify_schema(self, workspace, tmp_path):
        """Test that identification reports f1, accuracy and auc."""
        code, out = self._run(workspace, tmp_path, "identify")
        assert code == 0
        assert {"f1", "accuracy", "auc"} <= self._keys(out)
        assert all(line.startswith("identify.") for line in out.read_text().splitlines())

    def test_regress_schema(self, workspace, tmp_path):
        """Test that regression reports only mse and mae."""
        code, out = self._run(workspace, tmp_path, "regress:amplitude")
        assert code == 0
        assert self._keys(out) == {"mse", "mae"}

    def test_unknown_attribute(self, workspace, tmp_path, capsys):
        """Test exit code 6 listing available attributes."""
        code, _ = self._run(workspace, tmp_path, "classify:sleep")
        assert code == 6
        assert "chronotype" in capsys.readouterr().err

    def test_unknown_task(self, workspace, tmp_path):
        """Test exit code 1 for an unknown task."""
        code, _ = self._run(workspace, tmp_path, "cluster")
        assert code == 1

    def _finetune(self, workspace, tmp_path, config_text, *extra):
        config = tmp_path / "tune.cfg"
        config.write_text(config_text, encoding="utf-8")
        report = MetricReport(task="finetune_chronotype", metrics={"accuracy": 0.5})
        with patch("main.finetune_eval", return_value=report) as tune:
            code = main(
                [
                    "eval", "--config", str(config), "--checkpoint", workspace["checkpoint"],
                    "--data", workspace["data"], "--task", "finetune:chronotype",
                    "--out", str(tmp_path / "report.txt"), *extra,
                ]
            )
        return code, tune

    def test_finetune_takes_train_keys(self, workspace, tmp_path):
        """Test that finetune applies [train] keys from --config and --set over the checkpoint's."""
        text = TINY_CONFIG.replace("max_epochs = 2\n", "max_epochs = 2\nlearning_rate = 0.01\n")
        code, tune = self._finetune(workspace, tmp_path, text, "--set", "train.margin=0.5")
        assert code == 0
        train_config = tune.call_args.args[3]
        saved = load_model(workspace["checkpoint"])[1]
        assert train_config.learning_rate == 0.01
        assert train_config.margin == 0.5
        assert train_config.support_size == saved.support_size
        assert train_config.model == saved.model

    def test_finetune_rejects_other_architecture(self, workspace, tmp_path):
        """Test exit code 1 when [model] disagrees with the checkpoint."""
        text = TINY_CONFIG.replace("embedding_dim = 8", "embedding_dim = 16")
        code, tune = self._finetune(workspace, tmp_path, text)
        assert code == 1
        tune.assert_not_called()
