import torch

import pytest

from dwformer import cli, numerics
from dwformer.cli import (
    EXIT_CONFIG,
    EXIT_DIVERGENCE,
    EXIT_GRADCHECK,
    EXIT_OK,
    load_config,
    main,
)
from dwformer.errors import ConfigurationError

SMALL = """
# toy run
variant = dwlstm
n_enc_layers = 2
n_dec_layers = 2
d_model = 8
d_ff = 16
heads = 2
dropout = 0.0
task = copy
vocab_size = 6
min_len = 2
max_len = 4
batch_size = 8
steps = 4
warmup = 100
val_interval = 2
checkpoint_interval = 4
seed = 5
"""


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text(SMALL, encoding="ascii")
    return str(p)


class TestConfigParsing:
    def test_defaults_and_overrides(self, cfg_path):
        cfg = load_config(cfg_path, ["--steps", "9", "--lr_scale", "0.5"])
        assert cfg["steps"] == 9
        assert cfg["lr_scale"] == 0.5
        assert cfg["beam"] == 4  # untouched default

    def test_comments_and_blank_lines(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("variant = residual  # inline\n\n# whole line\n")
        assert load_config(str(p), [])["variant"] == "residual"

    def test_unknown_key_rejected(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("variant = dwlstm\nlearning_rate = 3\n")
        with pytest.raises(ConfigurationError, match="learning_rate"):
            load_config(str(p), [])

    def test_unknown_override_rejected(self):
        with pytest.raises(ConfigurationError, match="nope"):
            load_config(None, ["--nope", "1"])

    def test_type_errors(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("steps = many\n")
        with pytest.raises(ConfigurationError, match="steps"):
            load_config(str(p), [])
        with pytest.raises(ConfigurationError):
            load_config(None, ["--tie_embeddings", "perhaps"])

    def test_missing_variant_exits_2_naming_it(self, capsys):
        rc = main(["train"])
        assert rc == EXIT_CONFIG
        assert "variant" in capsys.readouterr().err


class TestTrainCommand:
    def test_smoke_and_outputs(self, cfg_path, tmp_path, capsys):
        out = tmp_path / "run"
        rc = main(["train", "--config", cfg_path, "--out_dir", str(out)])
        assert rc == EXIT_OK
        assert (out / "metrics.csv").exists()
        assert (out / "resolved.cfg").exists()
        assert (out / "checkpoint_4.bin").exists()
        resolved = (out / "resolved.cfg").read_text(encoding="ascii")
        assert "variant = dwlstm\n" in resolved
        assert "steps = 4\n" in resolved
        assert "final val_token_acc" in capsys.readouterr().out

    def test_metrics_byte_identical_across_runs(self, cfg_path, tmp_path):
        blobs = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert main(["train", "--config", cfg_path,
                         "--out_dir", str(out)]) == EXIT_OK
            blobs.append((out / "metrics.csv").read_bytes())
        assert blobs[0] == blobs[1]

    def test_divergence_exits_3(self, cfg_path, tmp_path, capsys):
        rc = main(["train", "--config", cfg_path, "--out_dir",
                   str(tmp_path / "d"), "--lr_scale", "1e30"])
        assert rc == EXIT_DIVERGENCE
        err = capsys.readouterr().err
        assert "numerical failure" in err

    def test_bad_variant_exits_2(self, cfg_path, tmp_path):
        rc = main(["train", "--config", cfg_path, "--variant", "hyperloop",
                   "--out_dir", str(tmp_path / "x")])
        assert rc == EXIT_CONFIG


class TestEvalCommand:
    def test_eval_reproduces_training_accuracy(self, cfg_path, tmp_path, capsys):
        out = tmp_path / "run"
        assert main(["train", "--config", cfg_path,
                     "--out_dir", str(out)]) == EXIT_OK
        metrics = (out / "metrics.csv").read_text(encoding="ascii").splitlines()
        train_acc = float(metrics[-1].split(",")[4])
        capsys.readouterr()
        rc = main(["eval", "--config", cfg_path, "--checkpoint",
                   str(out / "checkpoint_4.bin"), "--beam", "1",
                   "--out_dir", str(out)])
        assert rc == EXIT_OK
        stdout = capsys.readouterr().out
        eval_acc = float(stdout.split("token_acc: ")[1].split()[0])
        assert eval_acc == pytest.approx(train_acc, abs=1e-6)
        results = (out / "results.csv").read_text(encoding="ascii").splitlines()
        assert results[0] == "metric,value"
        assert results[1].startswith("token_acc,")
        assert results[2].startswith("seq_acc,")

    def test_eval_averages_checkpoints(self, cfg_path, tmp_path):
        out = tmp_path / "run"
        assert main(["train", "--config", cfg_path, "--out_dir", str(out),
                     "--checkpoint_interval", "2"]) == EXIT_OK
        rc = main(["eval", "--config", cfg_path,
                   "--checkpoint", str(out / "checkpoint_2.bin"),
                   "--checkpoint", str(out / "checkpoint_4.bin"),
                   "--beam", "2", "--out_dir", str(out)])
        assert rc == EXIT_OK

    def test_eval_without_checkpoint_exits_2(self, cfg_path, tmp_path):
        assert main(["eval", "--config", cfg_path,
                     "--out_dir", str(tmp_path)]) == EXIT_CONFIG

    def test_eval_vocab_mismatch_exits_2(self, cfg_path, tmp_path):
        out = tmp_path / "run"
        assert main(["train", "--config", cfg_path,
                     "--out_dir", str(out)]) == EXIT_OK
        rc = main(["eval", "--config", cfg_path, "--vocab_size", "12",
                   "--checkpoint", str(out / "checkpoint_4.bin"),
                   "--out_dir", str(out)])
        assert rc == EXIT_CONFIG


class TestDistillCommand:
    def test_report_rows(self, cfg_path, tmp_path, capsys):
        out = tmp_path / "run"
        assert main(["train", "--config", cfg_path, "--steps", "60",
                     "--out_dir", str(out)]) == EXIT_OK
        capsys.readouterr()
        rc = main(["distill", "--config", cfg_path,
                   "--checkpoint", str(out / "checkpoint_60.bin"),
                   "--distill_steps", "1", "--out_dir", str(out),
                   "--checkpoint_interval", "60"])
        assert rc == EXIT_OK
        lines = (out / "report.csv").read_text(encoding="ascii").splitlines()
        assert lines[0] == "side,layer,metric,delta_percent"
        assert lines[1].startswith("none,none,")
        assert len(lines) == 1 + 1 + 4  # header + baseline + 2 enc + 2 dec

    def test_single_layer(self, cfg_path, tmp_path):
        out = tmp_path / "run"
        assert main(["train", "--config", cfg_path, "--steps", "60",
                     "--checkpoint_interval", "60",
                     "--out_dir", str(out)]) == EXIT_OK
        rc = main(["distill", "--config", cfg_path,
                   "--checkpoint", str(out / "checkpoint_60.bin"),
                   "--distill_steps", "0", "--side", "decoder",
                   "--layer_index", "2", "--out_dir", str(out)])
        assert rc == EXIT_OK
        lines = (out / "report.csv").read_text(encoding="ascii").splitlines()
        assert len(lines) == 3
        assert lines[2].startswith("decoder,2,")

    def test_single_layer_needs_side(self, cfg_path, tmp_path):
        rc = main(["distill", "--config", cfg_path, "--checkpoint", "x.bin",
                   "--layer_index", "1", "--side", "both"])
        assert rc == EXIT_CONFIG


class TestGradcheckCommand:
    def gradcheck_args(self, cfg_path):
        return ["gradcheck", "--config", cfg_path, "--batch_size", "2",
                "--min_len", "2", "--max_len", "3", "--n_enc_layers", "1",
                "--n_dec_layers", "1"]

    def test_passes_on_correct_model(self, cfg_path, capsys):
        rc = main(self.gradcheck_args(cfg_path))
        assert rc == EXIT_OK
        assert "max relative error" in capsys.readouterr().out

    def test_detects_corrupted_backward(self, cfg_path, monkeypatch, capsys):
        true_gelu = numerics.gelu

        class WrongGelu(torch.autograd.Function):
            @staticmethod
            def forward(ctx, x):
                ctx.save_for_backward(x)
                return true_gelu(x.detach())

            @staticmethod
            def backward(ctx, g):
                (x,) = ctx.saved_tensors
                return g * torch.sigmoid(x)  # not the GeLU derivative

        monkeypatch.setattr(numerics, "gelu", WrongGelu.apply)
        rc = main(self.gradcheck_args(cfg_path))
        assert rc == EXIT_GRADCHECK
        assert "FAILED parameters" in capsys.readouterr().out
