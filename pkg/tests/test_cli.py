import json

import pytest
from click.testing import CliRunner

from gatedpet.cli import main
from gatedpet.config import ExperimentConfig
from gatedpet.errors import FormatError


def tiny_config(tmp_path, **overrides):
    cfg = {
        "phantom": {"shape": [32, 32, 32], "num_gates": 3, "ref_gate": 2,
                    "motion_amplitude_voxels": 2.0, "smoothness_sigma": 3.0, "seed": 5},
        "num_subjects": 3,
        "num_train": 2,
        "pretrain": {"epochs": 1, "pairs_per_epoch": 2, "batch_size": 2},
        "train": {"epochs": 1, "pairs_per_epoch": 2, "batch_size": 2},
        "generator": {"base_channels": 2},
        "critic": {"base_channels": 2, "input_size": 32},
        "motion": {"base_channels": 4},
        "data_dir": str(tmp_path / "data"),
        "run_dir": str(tmp_path / "runs"),
        "methods": ["ld_raw", "gaussian", "san_g2g"],
    }
    cfg.update(overrides)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


class TestConfig:
    def test_defaults_roundtrip(self):
        cfg = ExperimentConfig()
        back = ExperimentConfig.from_dict(json.loads(cfg.to_json()))
        assert back.to_json() == cfg.to_json()
        assert back.content_hash() == cfg.content_hash()

    def test_unknown_key_rejected(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"wat": 1}))
        with pytest.raises(FormatError):
            ExperimentConfig.load(p)

    def test_unknown_method_rejected(self):
        with pytest.raises(Exception):
            ExperimentConfig(methods=("ld_raw", "magic"))


class TestCliPipeline:
    @pytest.fixture(scope="class")
    def workspace(self, tmp_path_factory):
        tmp = tmp_path_factory.mktemp("cli")
        cfg_path = tiny_config(tmp)
        runner = CliRunner()
        return tmp, cfg_path, runner

    def test_full_stage_sequence(self, workspace):
        tmp, cfg_path, runner = workspace
        run_dir = str(tmp / "runs" / "r1")

        res = runner.invoke(main, ["gen-data", "--config", str(cfg_path)])
        assert res.exit_code == 0, res.output
        assert (tmp / "data" / "manifest.json").exists()

        # eval before training must name the missing artifact and exit 2
        res = runner.invoke(main, ["eval", "--config", str(cfg_path), "--run-dir", run_dir])
        assert res.exit_code == 2
        assert "r_pretrained" in res.output

        res = runner.invoke(main, ["pretrain-r", "--config", str(cfg_path), "--run-dir", run_dir])
        assert res.exit_code == 0, res.output
        assert (tmp / "runs" / "r1" / "r_pretrained.ckpt").exists()
        assert (tmp / "runs" / "r1" / "config.json").exists()
        assert (tmp / "runs" / "r1" / "config_hash.txt").exists()

        res = runner.invoke(main, ["train", "--config", str(cfg_path), "--run-dir", run_dir])
        assert res.exit_code == 0, res.output
        assert (tmp / "runs" / "r1" / "train_full" / "final.ckpt").exists()

        res = runner.invoke(main, ["eval", "--config", str(cfg_path), "--run-dir", run_dir])
        assert res.exit_code == 0, res.output
        eval_dir = tmp / "runs" / "r1" / "eval"
        for name in ("psnr.csv", "ssim.csv", "mved_analytic.csv", "mved_r_on_hd.csv",
                     "mc_average.json", "denoising_montage.png"):
            assert (eval_dir / name).exists(), name
        header = (eval_dir / "psnr.csv").read_text().splitlines()[0]
        assert header == "PSNR,G1,G2,G3,Average"

        res = runner.invoke(main, ["report", "--run-dir", run_dir])
        assert res.exit_code == 0, res.output
        assert "PASS" in res.output or "FAIL" in res.output
        assert (tmp / "runs" / "r1" / "report.txt").exists()

        # metrics log is structured (stage, epoch, term, value) lines
        lines = (tmp / "runs" / "r1" / "metrics.jsonl").read_text().strip().splitlines()
        entry = json.loads(lines[0])
        assert set(entry) == {"stage", "epoch", "term", "value"}

    def test_train_requires_pretrained_r(self, workspace):
        tmp, cfg_path, runner = workspace
        res = runner.invoke(main, ["train", "--config", str(cfg_path),
                                   "--run-dir", str(tmp / "runs" / "fresh")])
        assert res.exit_code == 2
        assert "r_pretrained" in res.output

    def test_gen_data_determinism(self, workspace, tmp_path):
        tmp, cfg_path, runner = workspace
        cfg_a = tiny_config(tmp_path, data_dir=str(tmp_path / "a"), num_subjects=2, num_train=1)
        res = runner.invoke(main, ["gen-data", "--config", str(cfg_a)])
        assert res.exit_code == 0, res.output
        cfg_b = tiny_config(tmp_path, data_dir=str(tmp_path / "b"), num_subjects=2, num_train=1)
        res = runner.invoke(main, ["gen-data", "--config", str(cfg_b)])
        assert res.exit_code == 0, res.output
        a, b = tmp_path / "a", tmp_path / "b"
        files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
        assert files
        for rel in files:
            assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel


class TestCliErrors:
    def test_bad_config_is_validation_failure(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text("{broken")
        res = CliRunner().invoke(main, ["gen-data", "--config", str(p)])
        assert res.exit_code == 1

    def test_missing_config_file(self, tmp_path):
        res = CliRunner().invoke(main, ["gen-data", "--config", str(tmp_path / "none.json")])
        assert res.exit_code == 1

    def test_report_without_eval(self, tmp_path):
        res = CliRunner().invoke(main, ["report", "--run-dir", str(tmp_path)])
        assert res.exit_code == 2

    def test_eval_requires_run_dir(self, tmp_path):
        cfg = tiny_config(tmp_path)
        res = CliRunner().invoke(main, ["eval", "--config", str(cfg)])
        assert res.exit_code == 1

    def test_bad_ablation_rejected(self, tmp_path):
        cfg = tiny_config(tmp_path)
        res = CliRunner().invoke(main, ["train", "--config", str(cfg),
                                        "--ablation", "everything"])
        assert res.exit_code == 2  # click usage error
