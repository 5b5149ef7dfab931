import json
import os
import subprocess
import sys

import numpy as np
import pytest

from pertseg.cli import main


def run_cli(args):
    return main(list(args))


class TestSynth:
    def test_generates_pairs_and_manifest(self, tmp_path, capsys):
        out = tmp_path / "ds"
        code = run_cli(
            ["synth", "--images", "5", "--classes", "4", "--size", "32", "--seed", "7", "--out", str(out)]
        )
        assert code == 0
        assert len(list((out / "images").glob("*.png"))) == 5
        assert len(list((out / "masks").glob("*.png"))) == 5
        assert (out / "train.json").is_file()
        assert (out / "effective_config.json").is_file()

    def test_zero_images_errors(self, tmp_path, capsys):
        code = run_cli(["synth", "--images", "0", "--out", str(tmp_path / "x")])
        assert code != 0
        assert "error" in capsys.readouterr().err

    def test_same_flags_byte_identical(self, tmp_path):
        argset = ["synth", "--images", "3", "--classes", "3", "--size", "16", "--seed", "5"]
        run_cli(argset + ["--out", str(tmp_path / "a")])
        run_cli(argset + ["--out", str(tmp_path / "b")])
        for rel in ["train.json", "images/train-0001.png", "masks/train-0002.png"]:
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


class TestValidate:
    def test_valid_manifest_ok(self, synth_dataset, capsys):
        assert run_cli(["validate", str(synth_dataset["train"])]) == 0
        assert "OK" in capsys.readouterr().out

    def test_broken_manifest_fails(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({
            "dataset_id": "x", "categories": ["a"], "native_resolution": [8, 8],
            "pairs": [{"image": "missing.png", "mask": "missing.png"}],
        }))
        assert run_cli(["validate", str(bad)]) == 1
        assert "FAIL" in capsys.readouterr().out


def train_args(manifest, out, steps=4):
    return [
        "train",
        "--train-manifest", str(manifest),
        "--out-dir", str(out),
        "--total-steps", str(steps),
        "--batch-size", "2",
        "--embed-dim", "32",
        "--feature-dim", "16",
        "--num-blocks", "1",
        "--window", "3",
        "--base-lr", "1e-3",
        "--log-every", "1",
        "--diag-every", "2",
        "--seed", "0",
    ]


class TestTrain:
    def test_short_run_writes_outputs(self, synth_dataset, tmp_path, capsys):
        out = tmp_path / "run"
        assert run_cli(train_args(synth_dataset["train"], out)) == 0
        stdout = capsys.readouterr().out
        assert "checkpoint" in stdout
        assert (out / "checkpoint_final.pt").is_file()
        assert (out / "metrics.jsonl").is_file()
        assert (out / "effective_config.json").is_file()
        records = [json.loads(l) for l in (out / "metrics.jsonl").read_text().splitlines()]
        assert all(np.isfinite(r["loss"]) for r in records)

    def test_identity_configuration_reports_parity(self, synth_dataset, tmp_path, capsys):
        out = tmp_path / "run"
        args = train_args(synth_dataset["train"], out, steps=2)
        args += ["--text-init-scale", "0", "--zero-image-perturb"]
        assert run_cli(args) == 0
        assert "parity at init: identical" in capsys.readouterr().out
        assert json.loads((out / "parity.json").read_text())["train_eval_identical_at_init"]

    def test_noise_family_recorded_in_snapshot(self, synth_dataset, tmp_path):
        out = tmp_path / "run"
        args = train_args(synth_dataset["train"], out, steps=2)
        args += ["--noise-family", "student_t", "--df", "10"]
        assert run_cli(args) == 0
        snapshot = json.loads((out / "config.json").read_text())
        assert snapshot["text_noise"] == {"family": "student_t", "df": 10.0, "standardized": True}
        assert snapshot["image_noise"]["family"] == "student_t"

    def test_df_without_student_t_rejected(self, synth_dataset, tmp_path, capsys):
        args = train_args(synth_dataset["train"], tmp_path / "r", steps=2)
        args += ["--noise-family", "gaussian", "--df", "5"]
        assert run_cli(args) == 1
        assert "student_t" in capsys.readouterr().err

    def test_env_override_and_flag_precedence(self, synth_dataset, tmp_path, monkeypatch):
        out = tmp_path / "run"
        monkeypatch.setenv("PERTSEG_TOTAL_STEPS", "3")
        monkeypatch.setenv("PERTSEG_SEED", "9")
        args = [a for a in train_args(synth_dataset["train"], out, steps=4) if True]
        # drop the explicit --total-steps pair so env applies; keep --seed flag
        idx = args.index("--total-steps")
        del args[idx : idx + 2]
        assert run_cli(args) == 0
        cfg = json.loads((out / "config.json").read_text())
        assert cfg["total_steps"] == 3  # from env
        assert cfg["seed"] == 0  # flag wins over env

    def test_config_file_layer(self, synth_dataset, tmp_path):
        cfg_file = tmp_path / "cfg.json"
        cfg_file.write_text(json.dumps({"total_steps": 2, "batch_size": 2, "feature_dim": 16,
                                        "num_blocks": 1, "window": 3, "embed_dim": 32}))
        out = tmp_path / "run"
        args = ["train", "--config", str(cfg_file), "--train-manifest", str(synth_dataset["train"]),
                "--out-dir", str(out), "--log-every", "1", "--diag-every", "0"]
        assert run_cli(args) == 0
        cfg = json.loads((out / "config.json").read_text())
        assert cfg["total_steps"] == 2


class TestEval:
    @pytest.fixture()
    def trained(self, synth_dataset, tmp_path):
        out = tmp_path / "run"
        run_cli(train_args(synth_dataset["train"], out, steps=3))
        return out / "checkpoint_final.pt"

    def test_single_manifest_report_files(self, trained, synth_dataset, tmp_path, capsys):
        out = tmp_path / "eval"
        code = run_cli([
            "eval", "--checkpoint", str(trained), "--manifest", str(synth_dataset["train"]),
            "--out", str(out),
        ])
        assert code == 0
        assert (out / "synthetic-train.json").is_file()
        assert (out / "synthetic-train.txt").is_file()
        assert (out / "synthetic-train.csv").is_file()
        assert (out / "cross_dataset.json").is_file()
        assert (out / "miou_by_dataset.png").is_file()
        assert "m-mIoU" in capsys.readouterr().out

    def test_split_section_present(self, synth_dataset, holdout_dataset, tmp_path):
        run_dir = tmp_path / "run"
        run_cli(train_args(holdout_dataset["train"], run_dir, steps=3))
        out = tmp_path / "eval"
        code = run_cli([
            "eval", "--checkpoint", str(run_dir / "checkpoint_final.pt"),
            "--manifest", str(holdout_dataset["test"]), "--out", str(out),
        ])
        assert code == 0
        report = json.loads((out / "synthetic-test.json").read_text())
        assert "split" in report
        assert report["split"]["unseen"] == ["object-03", "object-04"]

    def test_cross_dataset_mean_matches_per_dataset_files(self, trained, synth_dataset, tmp_path):
        out = tmp_path / "eval"
        code = run_cli([
            "eval", "--checkpoint", str(trained),
            "--manifest", str(synth_dataset["train"]),
            "--manifest", str(synth_dataset["train"]),
            "--out", str(out),
        ])
        assert code == 0
        cross = json.loads((out / "cross_dataset.json").read_text())
        per = [d["miou"] for d in cross["datasets"]]
        assert abs(cross["m_miou"] - np.mean(per)) < 1e-12

    def test_save_maps_and_dump_logits(self, trained, synth_dataset, tmp_path):
        out = tmp_path / "eval"
        code = run_cli([
            "eval", "--checkpoint", str(trained), "--manifest", str(synth_dataset["train"]),
            "--out", str(out), "--save-maps", "--dump-logits",
        ])
        assert code == 0
        maps = sorted((out / "maps" / "train").glob("*.png"))
        dumps = sorted((out / "logits" / "train").glob("*.npy"))
        assert len(maps) == 6 and len(dumps) == 6
        from pertseg.data import read_mask

        pred = read_mask(maps[0])
        logits = np.load(dumps[0])
        assert logits.shape == (*pred.shape, 3) and logits.dtype == np.float32
        assert np.array_equal(np.argmax(logits, axis=-1).astype(np.uint8), pred)

    def test_embed_dim_mismatch_rejected(self, trained, synth_dataset, tmp_path, capsys):
        code = run_cli([
            "eval", "--checkpoint", str(trained), "--manifest", str(synth_dataset["train"]),
            "--out", str(tmp_path / "e"), "--embed-dim", "128",
        ])
        assert code == 1
        assert "embed_dim" in capsys.readouterr().err


class TestOverlap:
    def test_report_and_figure(self, synth_dataset, tmp_path, capsys):
        vocab = tmp_path / "vocab.txt"
        vocab.write_text("background\nobject-01\n")
        out = tmp_path / "overlap"
        code = run_cli([
            "overlap", "--train-vocab", str(vocab), "--manifest", str(synth_dataset["train"]),
            "--out", str(out),
        ])
        assert code == 0
        entries = json.loads((out / "overlap.json").read_text())
        assert entries[0]["raw_unique"] == 3
        assert entries[0]["covered"] == 2
        assert entries[0]["test_only"] == 1
        assert (out / "overlap.png").is_file()
        assert (out / "overlap.csv").is_file()


class TestPlots:
    def test_plots_from_training_log(self, synth_dataset, tmp_path):
        run_dir = tmp_path / "run"
        run_cli(train_args(synth_dataset["train"], run_dir, steps=4))
        out = tmp_path / "plots"
        assert run_cli(["plots", "--log", str(run_dir / "metrics.jsonl"), "--out", str(out)]) == 0
        assert (out / "delta_panel.png").is_file()
        assert (out / "gap.csv").is_file()

    def test_log_without_delta_warns(self, tmp_path, capsys):
        log = tmp_path / "m.jsonl"
        log.write_text(json.dumps({"step": 0, "loss": 1.0, "lr": 0.1}) + "\n")
        assert run_cli(["plots", "--log", str(log), "--out", str(tmp_path / "p")]) == 0
        assert "nothing plotted" in capsys.readouterr().err


class TestParserBehavior:
    def test_help_exits_zero(self):
        proc = subprocess.run(
            [sys.executable, "-m", "pertseg.cli", "--help"], capture_output=True, text=True
        )
        assert proc.returncode == 0
        assert "synth" in proc.stdout

    def test_unknown_flag_exits_nonzero(self):
        proc = subprocess.run(
            [sys.executable, "-m", "pertseg.cli", "synth", "--bogus"], capture_output=True, text=True
        )
        assert proc.returncode != 0

    def test_installed_entry_point(self):
        proc = subprocess.run(["pertseg", "--version"], capture_output=True, text=True)
        assert proc.returncode == 0
        assert "pertseg" in proc.stdout
