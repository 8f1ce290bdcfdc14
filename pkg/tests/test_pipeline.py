import json

import pytest
import yaml

from advdetect.cli import main
from advdetect.config import (
    RunConfig,
    config_to_dict,
    load_config,
    parse_config,
    save_config,
)
from advdetect.detectors import DetectorConfig
from advdetect.genattack import GeneratorConfig


class TestConfig:
    def test_round_trip_idempotent(self, tmp_path):
        cfg = RunConfig(seed=3)
        path = tmp_path / "run.yaml"
        save_config(cfg, path)
        loaded = load_config(path)
        assert loaded == cfg
        save_config(loaded, tmp_path / "again.yaml")
        assert (tmp_path / "again.yaml").read_text() == path.read_text()

    def test_dict_round_trip(self):
        cfg = RunConfig(seed=9)
        assert parse_config(config_to_dict(cfg)) == cfg

    def test_unknown_key_rejected(self):
        with pytest.raises(ValueError, match="unknown"):
            parse_config({"seed": 1, "turbo": True})
        with pytest.raises(ValueError, match="unknown"):
            parse_config({"detector": {"warp_speed": 9}})

    def test_partial_config_uses_defaults(self, tmp_path):
        (tmp_path / "partial.yaml").write_text("seed: 11\ndetector:\n  epochs: 3\n")
        cfg = load_config(tmp_path / "partial.yaml")
        assert cfg.seed == 11
        assert cfg.detector.epochs == 3
        assert cfg.detector.lr == DetectorConfig().lr


@pytest.fixture(scope="module")
def cli_workspace(tmp_path_factory):
    """One small end-to-end CLI run shared by the pipeline tests."""
    root = tmp_path_factory.mktemp("cliws")
    cfg = RunConfig(seed=0)
    cfg.data.num_images = 150
    cfg.data.num_test_images = 30
    cfg.detector = DetectorConfig(epochs=25, eval_every=4, seed=0)
    cfg.generator = GeneratorConfig(epochs=1, seed=0, batch_size=8)
    cfg_path = root / "run.yaml"
    save_config(cfg, cfg_path)
    data = root / "data"
    assert main(["make-synthetic", "--config", str(cfg_path), "--out", str(data)]) == 0
    assert (
        main(
            [
                "train-detector",
                "--config",
                str(cfg_path),
                "--data",
                str(data),
                "--out",
                str(root / "detectors"),
                "--family",
                "both",
            ]
        )
        == 0
    )
    return root, cfg_path, data


class TestCli:
    def test_make_synthetic_outputs(self, cli_workspace):
        root, _, data = cli_workspace
        assert (data / "train.json").is_file()
        assert (data / "test.json").is_file()
        assert len(list((data / "images").glob("train_*.png"))) == 150

    def test_train_detector_outputs(self, cli_workspace):
        root, _, _ = cli_workspace
        assert (root / "detectors" / "proposal.pt").is_file()
        assert (root / "detectors" / "regression.pt").is_file()
        assert (root / "detectors" / "run_config.yaml").is_file()

    def test_train_generator_and_attack_and_eval(self, cli_workspace):
        root, cfg_path, data = cli_workspace
        gen_dir = root / "gen"
        rc = main(
            [
                "train-generator",
                "--config",
                str(cfg_path),
                "--data",
                str(data),
                "--victim",
                str(root / "detectors" / "proposal.pt"),
                "--out",
                str(gen_dir),
                "--epochs",
                "1",
            ]
        )
        assert rc == 0
        assert (gen_dir / "generator.pt").is_file()
        assert (gen_dir / "training_log.jsonl").is_file()
        assert list((gen_dir / "checkpoints").glob("*.pt"))

        adv_dir = root / "adv"
        rc = main(
            [
                "attack",
                "--method",
                "uea",
                "--input",
                "image",
                "--source",
                str(data / "images"),
                "--generator",
                str(gen_dir / "generator.pt"),
                "--out",
                str(adv_dir),
            ]
        )
        assert rc == 0
        records = (adv_dir / "attack_records.jsonl").read_text().splitlines()
        assert len(records) == 180  # 150 train + 30 test pngs
        json.loads(records[0])

        rc = main(
            [
                "eval",
                "--data",
                str(data),
                "--split",
                "test",
                "--adv",
                str(adv_dir),
                "--victim",
                str(root / "detectors" / "proposal.pt"),
                "--out",
                str(root / "eval.jsonl"),
            ]
        )
        assert rc == 0
        assert (root / "eval.jsonl").is_file()

    def test_eval_identity_attack_zero_drop(self, cli_workspace, capsys):
        root, _, data = cli_workspace
        rc = main(
            [
                "eval",
                "--data",
                str(data),
                "--split",
                "test",
                "--adv",
                str(data / "images"),
                "--victim",
                str(root / "detectors" / "proposal.pt"),
                "--out",
                str(root / "eval_clean.jsonl"),
            ]
        )
        assert rc == 0
        out = capsys.readouterr().out
        summary = json.loads(out.splitlines()[0])
        assert summary["map_drop"] == pytest.approx(0.0, abs=1e-6)

    def test_dag_attack_single_image(self, cli_workspace, tmp_path):
        root, cfg_path, data = cli_workspace
        src = next((data / "images").glob("test_*.png"))
        rc = main(
            [
                "attack",
                "--config",
                str(cfg_path),
                "--method",
                "dag",
                "--source",
                str(src),
                "--victim",
                str(root / "detectors" / "proposal.pt"),
                "--out",
                str(tmp_path / "dag_out"),
            ]
        )
        assert rc == 0
        rec = json.loads((tmp_path / "dag_out" / "attack_records.jsonl").read_text())
        assert "iterations" in rec

    def test_bench(self, cli_workspace, capsys):
        root, _, data = cli_workspace
        rc = main(
            [
                "bench",
                "--data",
                str(data),
                "--generator",
                str(root / "gen" / "generator.pt"),
                "--victim",
                str(root / "detectors" / "proposal.pt"),
                "--num",
                "10",
            ]
        )
        assert rc == 0
        out = capsys.readouterr().out
        assert "speed ratio" in out

    def test_unknown_subcommand_exits_nonzero(self):
        with pytest.raises(SystemExit):
            main(["frobnicate"])

    def test_missing_file_reports_error(self, capsys):
        rc = main(
            [
                "eval",
                "--data",
                "/nonexistent",
                "--adv",
                "/nonexistent",
                "--victim",
                "/nonexistent.pt",
            ]
        )
        assert rc == 1
        assert "error:" in capsys.readouterr().err

    def test_seed_override(self, tmp_path):
        cfg = RunConfig(seed=1)
        cfg.data.num_images = 3
        cfg.data.num_test_images = 2
        save_config(cfg, tmp_path / "c.yaml")
        for sub in ("a", "b"):
            assert (
                main(
                    [
                        "make-synthetic",
                        "--config",
                        str(tmp_path / "c.yaml"),
                        "--seed",
                        "42",
                        "--out",
                        str(tmp_path / sub),
                    ]
                )
                == 0
            )
        assert (tmp_path / "a" / "train.json").read_bytes() == (
            tmp_path / "b" / "train.json"
        ).read_bytes()
