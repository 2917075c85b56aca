"""End-to-end CLI runs on a micro tile: every subcommand, artifact
inventory, error contract."""

import json
import os

import pytest

from deformcast.cli import main

MICRO_SYNTH = """
seed = 5
[grid]
height = 16
width = 16
[synth]
kind = "mixed"
epochs = 40
cadence_days = 12
n_points = 200
noise_sigma_mm = 0.4
velocity_mm_yr = 6.0
amplitude_mm = 8.0
tile = "E32N34"
"""

MICRO_MODEL = """
[model]
kind = "transformer"
history_length = 6
patch_size = 4
embed_dim = 8
layers = 1
heads = 2
ffn_multiplier = 2
dropout = 0.1
[optimizer]
learning_rate = 1e-3
batch_size = 8
max_epochs = 1
max_steps = 2
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """One synth + train chain shared by the read-only command tests."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "run.toml"
    cfg.write_text(MICRO_SYNTH + MICRO_MODEL)

    synth_dir = root / "synth_out"
    assert main(["synth", "--config", str(cfg), "--out", str(synth_dir)]) == 0

    train_dir = root / "train_out"
    assert main(["train", "--config", str(cfg), "--out", str(train_dir)]) == 0
    return {
        "root": root,
        "cfg": cfg,
        "synth": synth_dir,
        "ckpt": train_dir / "model.defckpt",
        "train": train_dir,
    }


class TestSynth:
    def test_artifacts(self, workdir):
        d = workdir["synth"]
        assert (d / "E32N34.csv").exists()
        assert (d / "truth_cube.defcube").exists()
        summary = json.loads((d / "synth_summary.json").read_text())
        assert summary["kind"] == "mixed"
        assert summary["epochs"] == 40
        assert summary["points"] == 200
        manifest = (d / "run_manifest.txt").read_text()
        assert "command=synth" in manifest
        assert "seed=5" in manifest

    def test_seed_override(self, workdir, tmp_path):
        out = tmp_path / "o"
        code = main(["synth", "--config", str(workdir["cfg"]),
                     "--out", str(out), "--seed", "9"])
        assert code == 0
        assert "seed=9" in (out / "run_manifest.txt").read_text()


class TestIngest:
    def test_csv_to_cube(self, workdir, tmp_path):
        root = workdir["root"]
        cfg = tmp_path / "ingest.toml"
        cfg.write_text(
            "[grid]\nheight = 16\nwidth = 16\n"
            f'[paths]\ninput = "{workdir["synth"] / "E32N34.csv"}"\n'
        )
        out = tmp_path / "ingested"
        assert main(["ingest", "--config", str(cfg), "--out", str(out)]) == 0
        assert (out / "cube.defcube").exists()
        summary = json.loads((out / "ingest_summary.json").read_text())
        assert summary["tile"] == "E32N34"
        assert summary["epochs"] == 40

    def test_requires_input(self, workdir, tmp_path, capsys):
        code = main(["ingest", "--config", str(workdir["cfg"]),
                     "--out", str(tmp_path / "x")])
        assert code == 1
        assert "error: ConfigError" in capsys.readouterr().err


class TestTrain:
    def test_artifacts(self, workdir):
        d = workdir["train"]
        assert workdir["ckpt"].exists()
        log = (d / "training_log.csv").read_text().splitlines()
        assert log[0] == "epoch,step,lr,train_loss,holdout_loss,holdout_rmse_mm"
        assert len(log) >= 2

    def test_closed_form_kind_rejected(self, workdir, tmp_path, capsys):
        cfg = tmp_path / "bad.toml"
        cfg.write_text(MICRO_SYNTH + '[model]\nkind = "persistence"\n')
        code = main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")])
        assert code == 1
        assert "nothing to train" in capsys.readouterr().err


class TestEval:
    def test_model_eval_artifacts(self, workdir, tmp_path):
        out = tmp_path / "eval"
        code = main(["eval", "--config", str(workdir["cfg"]), "--out", str(out),
                     "--checkpoint", str(workdir["ckpt"])])
        assert code == 0
        rep = json.loads((out / "metrics_transformer.json").read_text())
        assert rep["label"] == "transformer"
        assert rep["count"] > 0
        for label in ("persistence", "linear", "seasonal"):
            assert (out / f"metrics_{label}.json").exists()
        heat = os.listdir(out / "heatmaps")
        assert any(p.endswith("truth.pgm") for p in heat)
        assert any(p.endswith("residual.pgm") for p in heat)
        assert any(p.endswith("gray_mapping.txt") for p in heat)

    def test_baseline_eval_without_checkpoint(self, workdir, tmp_path):
        cfg = tmp_path / "pers.toml"
        cfg.write_text(MICRO_SYNTH + '[model]\nkind = "persistence"\n')
        out = tmp_path / "eval_p"
        assert main(["eval", "--config", str(cfg), "--out", str(out)]) == 0
        rep = json.loads((out / "metrics_persistence.json").read_text())
        assert rep["rmse_mm"] > 0.0

    def test_trainable_eval_needs_checkpoint(self, workdir, tmp_path, capsys):
        code = main(["eval", "--config", str(workdir["cfg"]),
                     "--out", str(tmp_path / "x")])
        assert code == 1
        assert "--checkpoint" in capsys.readouterr().err


class TestTransfer:
    def test_zero_shot_run(self, workdir, tmp_path):
        # target tile: different regime and seed, same grid
        cfg_t = tmp_path / "target.toml"
        cfg_t.write_text(MICRO_SYNTH.replace('kind = "mixed"', 'kind = "trend"')
                         .replace("seed = 5", "seed = 11"))
        tdir = tmp_path / "target_out"
        assert main(["synth", "--config", str(cfg_t), "--out", str(tdir)]) == 0

        out = tmp_path / "transfer"
        code = main([
            "transfer", "--config", str(workdir["cfg"]), "--out", str(out),
            "--checkpoint", str(workdir["ckpt"]),
            "--target", str(tdir / "truth_cube.defcube"),
        ])
        assert code == 0
        rep = json.loads((out / "metrics_transfer.json").read_text())
        assert rep["label"] == "transfer"
        assert (out / "metrics_persistence.json").exists()

    def test_requires_target(self, workdir, tmp_path, capsys):
        code = main(["transfer", "--config", str(workdir["cfg"]),
                     "--out", str(tmp_path / "x"),
                     "--checkpoint", str(workdir["ckpt"])])
        assert code == 1
        assert "transfer needs" in capsys.readouterr().err


class TestReport:
    def test_merge(self, workdir, tmp_path):
        src = workdir["root"]
        eval_dir = tmp_path / "ev"
        assert main(["eval", "--config", str(workdir["cfg"]),
                     "--out", str(eval_dir),
                     "--checkpoint", str(workdir["ckpt"])]) == 0
        out = tmp_path / "merged"
        code = main([
            "report",
            str(eval_dir / "metrics_transformer.json"),
            str(eval_dir / "metrics_persistence.json"),
            "--out", str(out),
        ])
        assert code == 0
        lines = (out / "comparison.csv").read_text().splitlines()
        assert len(lines) == 3
        assert lines[1].startswith("transformer,")
        assert lines[2].startswith("persistence,")


class TestErrorContract:
    def test_missing_config_file(self, tmp_path, capsys):
        code = main(["synth", "--config", str(tmp_path / "nope.toml"),
                     "--out", str(tmp_path / "o")])
        assert code == 1
        err = capsys.readouterr().err
        assert err.startswith("error: ")
        assert err.count("\n") == 1  # single line

    def test_invalid_config_collects_problems(self, tmp_path, capsys):
        cfg = tmp_path / "bad.toml"
        cfg.write_text('[model]\nkind = "lstm"\ndropout = 2.0\n')
        code = main(["synth", "--config", str(cfg), "--out", str(tmp_path / "o")])
        assert code == 1
        err = capsys.readouterr().err
        assert "model.kind" in err and "model.dropout" in err
