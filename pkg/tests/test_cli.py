"""CLI contracts: layout, ordering, exit codes, determinism, reproducibility."""

import json
import os

import numpy as np
import pytest

from cdpam.cli import main, resolve_config
from cdpam.model import tiny_config


def tiny_run_config(tmp_path, out_name="run", **data_overrides):
    data = {
        "n_utterances": 16,
        "n_eval_utterances": 10,
        "n_speakers": 2,
        "n_jnd_pairs": 12,
        "n_triplets": 8,
        "families": ["noise"],
        "eval": {
            "n_triplets": 8,
            "triplet_gap": 0.2,
            "mono_levels": 3,
            "mono_contents": 2,
            "common_area_pairs": 8,
            "retrieval_groups": 3,
            "retrieval_group_size": 6,
            "mos_conditions": 3,
            "mos_clips_per_cell": 2,
            "k": 3,
        },
    }
    data.update(data_overrides)
    cfg = {
        "seed": 11,
        "out": str(tmp_path / out_name),
        "model": tiny_config().to_dict(),
        "data": data,
        "train": {
            "batch_size": 4,
            "epochs": {"pretrain": 2, "jnd": 2, "finetune": 2},
            "lr": {"pretrain": 1e-3, "jnd": 1e-3, "finetune": 1e-3},
            "tau": 0.5,
            "margin": 0.1,
            "augment": {"pretrain": False, "jnd": True, "finetune": True},
            "encoder_frozen_in_jnd": True,
            "batches_per_mode": 1,
        },
    }
    path = tmp_path / f"{out_name.replace(os.sep, '_')}_config.json"
    path.write_text(json.dumps(cfg))
    return path, cfg


@pytest.fixture(scope="module")
def pipeline_run(tmp_path_factory):
    tmp_path = tmp_path_factory.mktemp("cli")
    config_path, cfg = tiny_run_config(tmp_path)
    for command in ("synth-data", "pretrain", "train-jnd", "finetune", "eval"):
        code = main([command, "--config", str(config_path), "--quiet"]
                    if command in ("pretrain", "train-jnd", "finetune")
                    else [command, "--config", str(config_path)])
        assert code == 0, command
    return tmp_path, config_path, cfg


class TestSynthLayout:
    def test_directory_tree(self, pipeline_run):
        _, _, cfg = pipeline_run
        out = cfg["out"]
        assert os.path.isdir(os.path.join(out, "corpus"))
        assert os.path.isfile(os.path.join(out, "jnd.jsonl"))
        assert os.path.isfile(os.path.join(out, "triplets.jsonl"))
        assert os.path.isdir(os.path.join(out, "eval"))
        assert os.path.isfile(os.path.join(out, "eval", "triplets.jsonl"))

    def test_manifests_reference_existing_wavs(self, pipeline_run):
        from cdpam.datagen import read_manifest
        _, _, cfg = pipeline_run
        out = cfg["out"]
        for record in read_manifest(os.path.join(out, "jnd.jsonl")):
            assert record.paths is not None
            for rel in record.paths.values():
                assert os.path.isfile(os.path.join(out, rel)), rel

    def test_missing_output_dir_is_created(self, tmp_path):
        config_path, cfg = tiny_run_config(tmp_path, out_name="nested/deeper/run")
        assert main(["synth-data", "--config", str(config_path)]) == 0
        assert os.path.isdir(cfg["out"])


class TestStageOrdering:
    def test_finetune_before_jnd_fails(self, tmp_path, capsys):
        config_path, cfg = tiny_run_config(tmp_path, out_name="order")
        assert main(["synth-data", "--config", str(config_path)]) == 0
        assert main(["pretrain", "--config", str(config_path), "--quiet"]) == 0
        code = main(["finetune", "--config", str(config_path), "--quiet"])
        assert code == 2
        assert "error" in capsys.readouterr().err

    def test_stage_tagged_checkpoints(self, pipeline_run):
        from cdpam.model import load_checkpoint
        _, _, cfg = pipeline_run
        out = cfg["out"]
        assert load_checkpoint(os.path.join(out, "pretrained.ckpt")).stage == "pretrained"
        assert load_checkpoint(os.path.join(out, "jnd.ckpt")).stage == "jnd"
        assert load_checkpoint(os.path.join(out, "finetuned.ckpt")).stage == "finetuned"

    def test_loss_logs_written(self, pipeline_run):
        _, _, cfg = pipeline_run
        out = cfg["out"]
        for name in ("pretrain_log.csv", "jnd_log.csv", "finetune_log.csv"):
            with open(os.path.join(out, name)) as fh:
                header = fh.readline().strip()
            assert header == "epoch,stage,loss,wall_ms"


class TestDistanceCommand:
    def test_identical_files_print_zero(self, pipeline_run, capsys):
        _, _, cfg = pipeline_run
        out = cfg["out"]
        wav = os.path.join(out, "corpus", "utt0000.wav")
        ckpt = os.path.join(out, "finetuned.ckpt")
        assert main(["distance", ckpt, wav, wav]) == 0
        assert capsys.readouterr().out.strip() == "0.000000"

    def test_output_parses_as_float(self, pipeline_run, capsys):
        _, _, cfg = pipeline_run
        out = cfg["out"]
        ckpt = os.path.join(out, "finetuned.ckpt")
        a = os.path.join(out, "corpus", "utt0000.wav")
        b = os.path.join(out, "corpus", "utt0001.wav")
        assert main(["distance", ckpt, a, b]) == 0
        value = float(capsys.readouterr().out.strip())
        assert value >= 0.0

    def test_json_mode(self, pipeline_run, capsys):
        _, _, cfg = pipeline_run
        out = cfg["out"]
        ckpt = os.path.join(out, "finetuned.ckpt")
        wav = os.path.join(out, "corpus", "utt0000.wav")
        assert main(["distance", ckpt, wav, wav, "--json"]) == 0
        assert json.loads(capsys.readouterr().out)["distance"] == 0.0

    def test_missing_file_exits_2(self, pipeline_run, capsys):
        _, _, cfg = pipeline_run
        ckpt = os.path.join(cfg["out"], "finetuned.ckpt")
        code = main(["distance", ckpt, "/nonexistent/a.wav", "/nonexistent/b.wav"])
        assert code == 2
        assert capsys.readouterr().err != ""


class TestEvalCommand:
    def test_reports_contain_all_metrics(self, pipeline_run):
        _, _, cfg = pipeline_run
        with open(os.path.join(cfg["out"], "reports.json")) as fh:
            reports = json.load(fh)
        assert set(reports) == {"two_afc", "common_area", "monotonicity", "precision_at_k",
                                "mos_correlation"}
        assert os.path.isfile(os.path.join(cfg["out"], "reports.csv"))
        assert os.path.isfile(os.path.join(cfg["out"], "common_area_hist.svg"))

    def test_rerun_identical_reports(self, pipeline_run):
        tmp_path, config_path, cfg = pipeline_run
        report_path = os.path.join(cfg["out"], "reports.json")
        first = open(report_path, "rb").read()
        assert main(["eval", "--config", str(config_path)]) == 0
        assert open(report_path, "rb").read() == first

    def test_metrics_filter(self, pipeline_run, capsys):
        _, config_path, cfg = pipeline_run
        assert main(["eval", "--config", str(config_path), "--metrics", "two_afc",
                     "--json"]) == 0
        out = json.loads(capsys.readouterr().out)
        assert list(out) == ["two_afc"]


class TestReproducibility:
    def test_same_seed_identical_manifests(self, tmp_path):
        path_a, cfg_a = tiny_run_config(tmp_path, out_name="rep_a")
        path_b, cfg_b = tiny_run_config(tmp_path, out_name="rep_b")
        assert main(["synth-data", "--config", str(path_a)]) == 0
        assert main(["synth-data", "--config", str(path_b)]) == 0
        for name in ("jnd.jsonl", "triplets.jsonl"):
            a = open(os.path.join(cfg_a["out"], name), "rb").read()
            b = open(os.path.join(cfg_b["out"], name), "rb").read()
            assert a == b

    def test_flag_overrides_win(self, tmp_path):
        config_path, _ = tiny_run_config(tmp_path, out_name="ov")
        cfg = resolve_config(str(config_path), seed=99, out=str(tmp_path / "other"),
                             epochs=7, stage="pretrain")
        assert cfg["seed"] == 99
        assert cfg["out"] == str(tmp_path / "other")
        assert cfg["train"]["epochs"]["pretrain"] == 7

    def test_run_manifest_echoes_config(self, pipeline_run):
        _, _, cfg = pipeline_run
        with open(os.path.join(cfg["out"], "synth_data_manifest.json")) as fh:
            manifest = json.load(fh)
        assert manifest["command"] == "synth_data"
        assert manifest["config"]["seed"] == cfg["seed"]
        assert manifest["config"]["data"]["n_utterances"] == cfg["data"]["n_utterances"]


class TestUsageErrors:
    def test_unknown_command_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 2

    def test_bad_config_json_exits_2(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        assert main(["synth-data", "--config", str(bad)]) == 2
        assert capsys.readouterr().err != ""
