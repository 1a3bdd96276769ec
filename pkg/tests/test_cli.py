import csv
import json
import math
import os

import pytest

from bpvae.cli import build_parser, build_run_config, main
from bpvae.errors import ConfigError, DivergenceError
from bpvae.logging_config import setup_logging

BASIC_REF = "synthetic:noise-texture:0.8:24:1"
SIMPLE_REF = "synthetic:blobs:0.1:24:2"
TOY_FLAGS = [
    "--basic", BASIC_REF,
    "--simples", SIMPLE_REF,
    "--train.epochs", "1",
    "--train.batch_size", "12",
    "--model.latent_dim", "4",
    "--model.channels", "4,8",
]


@pytest.fixture(autouse=True)
def reset_logging():
    yield
    setup_logging(level="WARNING")


@pytest.fixture
def checkpoint(tmp_path, capsys):
    out = str(tmp_path / "trained")
    assert main(["train", *TOY_FLAGS, "--out", out]) == 0
    capsys.readouterr()
    return os.path.join(out, "checkpoint.bpvae")


def read_csv(path):
    with open(path, newline="") as f:
        return list(csv.reader(f))


def last_error(capsys):
    lines = [line for line in capsys.readouterr().err.splitlines() if line.strip()]
    return json.loads(lines[-1])


class TestTrain:
    def test_writes_checkpoint_and_loss_curve(self, tmp_path, capsys):
        out = str(tmp_path / "run")
        assert main(["train", *TOY_FLAGS, "--out", out]) == 0
        result = json.loads(capsys.readouterr().out)
        assert result["epochs"] == 1
        assert os.path.exists(result["checkpoint"])
        rows = read_csv(result["loss_csv"])
        assert rows[0] == ["epoch", "loss"]
        assert len(rows) == 2
        assert float(rows[1][1]) == pytest.approx(result["final_loss"])

    def test_same_seed_same_checkpoint(self, tmp_path, capsys):
        for name in ("a", "b"):
            assert main(["train", *TOY_FLAGS, "--seed", "5", "--out", str(tmp_path / name)]) == 0
        capsys.readouterr()
        with open(tmp_path / "a" / "checkpoint.bpvae", "rb") as a, open(tmp_path / "b" / "checkpoint.bpvae", "rb") as b:
            assert a.read() == b.read()

    def test_prior_ordering_violation_exits_2(self, tmp_path, capsys):
        code = main(["train", *TOY_FLAGS, "--priors.simple_sigmas", "1.5", "--out", str(tmp_path)])
        assert code == 2
        error = last_error(capsys)
        assert error["error"] == "config"
        assert error["exit_code"] == 2
        assert "smaller" in error["message"]
        assert not os.path.exists(tmp_path / "checkpoint.bpvae")

    def test_config_file(self, tmp_path, capsys):
        config = tmp_path / "run.conf"
        config.write_text(
            "# toy run\n"
            f"basic = {BASIC_REF}\n"
            "mode = vae\n"
            "train.epochs = 0\n"
            "model.latent_dim = 4\n"
            "model.channels = 4, 8\n"
        )
        assert main(["train", "--config", str(config), "--out", str(tmp_path / "out")]) == 0
        result = json.loads(capsys.readouterr().out)
        assert result["epochs"] == 0
        assert result["final_loss"] is None

    def test_unknown_config_key_exits_2(self, tmp_path, capsys):
        config = tmp_path / "run.conf"
        config.write_text(f"basic = {BASIC_REF}\ntrain.momentum = 0.9\n")
        assert main(["train", "--config", str(config)]) == 2
        assert "train.momentum" in last_error(capsys)["message"]

    def test_divergence_exits_4(self, tmp_path, capsys, mocker):
        mocker.patch("bpvae.cli.train", side_effect=DivergenceError(3, float("nan")))
        assert main(["train", *TOY_FLAGS, "--out", str(tmp_path)]) == 4
        error = last_error(capsys)
        assert error["error"] == "divergence"
        assert "epoch 3" in error["message"]

    def test_missing_idx_file_exits_3(self, tmp_path, capsys):
        missing = tmp_path / "missing-idx3-ubyte"
        assert main(["train", "--basic", f"idx:{missing}", "--mode", "vae", "--out", str(tmp_path)]) == 3
        lines = [line for line in capsys.readouterr().err.splitlines() if line.strip()]
        assert len(lines) == 1
        error = json.loads(lines[0])
        assert (error["error"], error["exit_code"]) == ("data", 3)
        assert str(missing) in error["message"]
        assert not os.path.exists(tmp_path / "checkpoint.bpvae")

    def test_missing_verb_exits_2(self, capsys):
        assert main([]) == 2
        assert last_error(capsys)["error"] == "config"


class TestRunConfig:
    def test_flag_precedence(self, tmp_path):
        config = tmp_path / "run.conf"
        config.write_text(f"basic = {BASIC_REF}\nsimples = {SIMPLE_REF}\ntrain.seed = 1\ntrain.epochs = 7\n")
        args = build_parser().parse_args(["train", "--config", str(config), "--train.epochs", "2", "--seed", "9"])
        run = build_run_config(args)
        assert (run.train.epochs, run.train.seed) == (2, 9)
        assert run.simples == [SIMPLE_REF]

    def test_vae_mode_rejects_simples(self):
        args = build_parser().parse_args(["train", "--basic", BASIC_REF, "--simples", SIMPLE_REF, "--mode", "vae"])
        with pytest.raises(ConfigError, match="mode=vae"):
            build_run_config(args)

    def test_single_sigma_broadcasts(self):
        args = build_parser().parse_args(
            ["train", "--basic", BASIC_REF, "--simples", f"{SIMPLE_REF},synthetic:stripes:0.1:24:3"]
        )
        assert build_run_config(args).priors.simple_sigmas == [0.05, 0.05]


class TestDetect:
    def test_same_dataset_gives_auroc_half(self, checkpoint, tmp_path, capsys):
        out = str(tmp_path / "detect")
        code = main(["detect", "--checkpoint", checkpoint, "--id", BASIC_REF, "--ood", BASIC_REF, "--out", out, "--bins", "5"])
        assert code == 0
        result = json.loads(capsys.readouterr().out)
        assert result["auroc"] == 0.5
        assert result["mean_elbo_id"] == result["mean_elbo_ood"]

        metrics = dict(read_csv(result["metrics_csv"])[1:])
        assert float(metrics["auroc"]) == 0.5
        histogram = read_csv(result["histogram_csv"])
        assert histogram[0] == ["dataset", "bin_left", "bin_right", "count"]
        assert len(histogram) == 1 + 2 * 5
        assert sum(int(row[3]) for row in histogram[1:]) == 48

    def test_sharding_does_not_change_scores(self, checkpoint, tmp_path, capsys):
        results = []
        for shards in ("1", "3"):
            out = str(tmp_path / shards)
            assert main(["detect", "--checkpoint", checkpoint, "--id", BASIC_REF, "--ood", SIMPLE_REF,
                         "--out", out, "--shards", shards]) == 0
            results.append(read_csv(json.loads(capsys.readouterr().out)["scores_csv"]))
        assert results[0] == results[1]

    def test_corrupt_checkpoint_exits_3(self, tmp_path, capsys):
        path = tmp_path / "broken.bpvae"
        path.write_bytes(b"BPVAE1\nformat_version: 1\n\n\x00\x01")
        code = main(["detect", "--checkpoint", str(path), "--id", BASIC_REF, "--ood", SIMPLE_REF, "--out", str(tmp_path)])
        assert code == 3
        assert last_error(capsys)["error"] == "data"

    def test_missing_checkpoint_exits_3(self, tmp_path, capsys):
        code = main(["detect", "--checkpoint", str(tmp_path / "nope"), "--id", BASIC_REF, "--ood", SIMPLE_REF,
                     "--out", str(tmp_path)])
        assert code == 3

    def test_config_file_supplies_out_and_limit(self, checkpoint, tmp_path, capsys):
        out = tmp_path / "from-config"
        config = tmp_path / "detect.conf"
        config.write_text(f"output_dir = {out}\nlimit = 10\ntrain.seed = 4\n")
        code = main(["detect", "--config", str(config), "--checkpoint", checkpoint, "--id", BASIC_REF, "--ood", SIMPLE_REF])
        assert code == 0
        result = json.loads(capsys.readouterr().out)
        assert os.path.dirname(result["metrics_csv"]) == str(out)
        assert len(read_csv(result["scores_csv"])) == 1 + 2 * 10

    def test_flags_win_over_config_file(self, checkpoint, tmp_path, capsys):
        config = tmp_path / "detect.conf"
        config.write_text(f"output_dir = {tmp_path / 'ignored'}\nlimit = 10\n")
        out = str(tmp_path / "flag")
        code = main(["detect", "--config", str(config), "--checkpoint", checkpoint, "--id", BASIC_REF,
                     "--ood", SIMPLE_REF, "--out", out, "--limit", "5"])
        assert code == 0
        result = json.loads(capsys.readouterr().out)
        assert os.path.dirname(result["scores_csv"]) == out
        assert len(read_csv(result["scores_csv"])) == 1 + 2 * 5
        assert not os.path.exists(tmp_path / "ignored")

    def test_bad_dataset_reference_exits_2(self, checkpoint, tmp_path, capsys):
        code = main(["detect", "--checkpoint", checkpoint, "--id", "png:/x", "--ood", SIMPLE_REF, "--out", str(tmp_path)])
        assert code == 2


class TestReconstruct:
    def test_single_image(self, checkpoint, tmp_path, capsys):
        out = str(tmp_path / "recon")
        assert main(["reconstruct", "--checkpoint", checkpoint, "--dataset", SIMPLE_REF, "--count", "1", "--out", out]) == 0
        result = json.loads(capsys.readouterr().out)
        assert sorted(os.listdir(result["image_dir"])) == ["0000_original.pgm", "0000_reconstruction.pgm"]

        metrics = {name: float(value) for name, value in read_csv(result["metrics_csv"])[1:]}
        assert metrics["mse"] > 0
        assert metrics["psnr_db"] == pytest.approx(-10 * math.log10(metrics["mse"]))
        assert -1.0 <= metrics["ssim"] <= 1.0

    def test_count_out_of_range_exits_2(self, checkpoint, tmp_path, capsys):
        assert main(["reconstruct", "--checkpoint", checkpoint, "--dataset", SIMPLE_REF, "--count", "0",
                     "--out", str(tmp_path)]) == 2


class TestSelectSimple:
    def test_no_candidates_exits_2(self, tmp_path, capsys):
        assert main(["select-simple", "--basic", BASIC_REF, "--out", str(tmp_path)]) == 2
        assert "candidate" in last_error(capsys)["message"]

    def test_writes_verdicts(self, tmp_path, capsys):
        out = str(tmp_path / "select")
        args = ["select-simple", "--basic", BASIC_REF, "--candidate", BASIC_REF, "--candidate", SIMPLE_REF,
                "--train.epochs", "1", "--train.batch_size", "12", "--model.latent_dim", "4",
                "--model.channels", "4,8", "--out", out]
        assert main(args) == 0
        result = json.loads(capsys.readouterr().out)
        assert result["verdicts"][0]["verdict"] == "not-simple"
        rows = read_csv(result["verdict_csv"])
        assert rows[0] == ["candidate", "statistic", "candidate_self_elbo", "basic_self_elbo", "verdict", "reason"]
        assert len(rows) == 3


class TestReportAndSample:
    def test_report_with_ratios(self, checkpoint, tmp_path, capsys):
        out = str(tmp_path / "report")
        args = ["report", "--checkpoint", checkpoint, "--train-dataset", BASIC_REF,
                "--dataset", SIMPLE_REF, "--dataset", "synthetic:stripes:0.5:10:4", "--bins", "4", "--out", out]
        assert main(args) == 0
        result = json.loads(capsys.readouterr().out)
        assert len(result["summaries"]) == 3
        assert len(result["ratios"]) == 2
        ratios = read_csv(result["ratio_csv"])
        assert ratios[0][-1] == "flagged"
        assert {row[-1] for row in ratios[1:]} <= {"true", "false"}
        assert len(read_csv(result["histogram_csv"])) == 1 + 3 * 4

    def test_report_without_training_set(self, checkpoint, tmp_path, capsys):
        assert main(["report", "--checkpoint", checkpoint, "--dataset", SIMPLE_REF, "--out", str(tmp_path)]) == 0
        result = json.loads(capsys.readouterr().out)
        assert result["ratio_csv"] is None

    def test_sample_from_simple_prior(self, checkpoint, tmp_path, capsys):
        out = str(tmp_path / "samples")
        assert main(["sample", "--checkpoint", checkpoint, "--count", "3", "--prior-index", "1", "--out", out]) == 0
        result = json.loads(capsys.readouterr().out)
        assert result["prior"]["sigma"] == 0.05
        assert len(os.listdir(result["image_dir"])) == 3

    def test_sample_rejects_unknown_config_key(self, checkpoint, tmp_path, capsys):
        config = tmp_path / "sample.conf"
        config.write_text("sample.temperature = 0.5\n")
        assert main(["sample", "--config", str(config), "--checkpoint", checkpoint, "--out", str(tmp_path)]) == 2
        assert "sample.temperature" in last_error(capsys)["message"]

    def test_sample_prior_out_of_range(self, checkpoint, tmp_path, capsys):
        assert main(["sample", "--checkpoint", checkpoint, "--prior-index", "5", "--out", str(tmp_path)]) == 2
