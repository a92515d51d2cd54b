import json
from pathlib import Path

import pandas as pd
import pytest

from app import main
from components.data_export import arm_label, export_ablation, process_ablation_data
from components.pipeline import ablation_arms
from services.run_store import JsonlWriter, RunArtifacts
from utils.config import config_hash, load_config
from utils.errors import ConfigError

DESK_CONFIG = Path(__file__).resolve().parent.parent / "configs" / "desk.json"


def read_metrics(run_dir):
    return json.loads((Path(run_dir) / "metrics.json").read_text())


def fake_ablation_records(seeds=(0, 1)):
    records = []
    for seed in seeds:
        for i, (lrg_on, ama_on, dkd_on) in enumerate(ablation_arms()):
            records.append({
                "seed": seed,
                "lrg_on": lrg_on,
                "ama_on": ama_on,
                "dkd_on": dkd_on,
                "fp_top1": 98.0,
                "q_top1_prefinetune": 60.0,
                "q_top1_postfinetune": 70.0 + i + seed,
                "synthetic_dispersion": 0.1 * i,
            })
    return records


class TestConfig:

    def test_overrides_change_the_hash(self, tiny_config_file):
        base = config_hash(load_config(tiny_config_file))
        assert config_hash(load_config(tiny_config_file, {"quant.weight_bits": 2})) != base
        assert config_hash(load_config(tiny_config_file, {"quant.weight_bits": None})) == base

    def test_unknown_keys_rejected(self, tmp_path, tiny_config_payload):
        tiny_config_payload["generation"]["learning_rate"] = 0.1
        path = tmp_path / "bad.json"
        path.write_text(json.dumps(tiny_config_payload))
        with pytest.raises(ConfigError):
            load_config(path)

    def test_strict_mode_needs_margin_bounds(self):
        with pytest.raises(ConfigError):
            load_config(overrides={"strict": True})
        cfg = load_config(overrides={"strict": True, "hyper.lambda_low": 0.7, "hyper.lambda_high": 0.9})
        assert cfg.ama_bounds() == (0.7, 0.9)

    def test_default_margin_bounds(self):
        assert load_config().ama_bounds() == (0.75, 0.95)

    def test_inverted_margin_bounds_rejected(self):
        with pytest.raises(ConfigError):
            load_config(overrides={"hyper.lambda_low": 0.9, "hyper.lambda_high": 0.8})

    def test_desk_schedule_keeps_decay_structure(self):
        cfg = load_config(DESK_CONFIG)
        assert cfg.gen_steps() == 400 and cfg.gen_decay_every() == 100
        assert cfg.ft_epochs() == 15 and cfg.ft_decay_every() == 10
        assert cfg.gen_batch_size() == cfg.ft_batch_size() == 32

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "absent.json")


class TestCommands:

    def test_eval_without_checkpoint_exits_3(self, tmp_path):
        assert main(["eval", "--ckpt", str(tmp_path / "fp.ckpt"), "--out", str(tmp_path / "eval")]) == 3

    def test_bad_config_exits_2(self, tmp_path):
        assert main(["pretrain", "--config", str(tmp_path / "absent.json"), "--out", str(tmp_path / "x")]) == 2

    def test_bit_width_out_of_range_exits_2(self, tiny_config_file, tmp_path):
        code = main(["pretrain", "--config", str(tiny_config_file), "--wbits", "9", "--out", str(tmp_path / "x")])
        assert code == 2

    def test_pretrain_writes_metrics(self, tiny_config_file, tmp_path, capsys):
        out = tmp_path / "pre"
        assert main(["pretrain", "--config", str(tiny_config_file), "--out", str(out)]) == 0
        metrics = read_metrics(out)
        expected = config_hash(load_config(tiny_config_file))
        assert metrics["config_hash"] == expected
        assert 0.0 <= metrics["fp_top1"] <= 100.0
        assert f"config hash: {expected}" in capsys.readouterr().out
        assert (out / "fp.ckpt").exists() and (out / "pretrain.jsonl").exists()

    def test_default_output_directory(self, tiny_config_file, tmp_path, monkeypatch):
        monkeypatch.setenv("LRQ_OUTPUT_ROOT", str(tmp_path))
        assert main(["pretrain", "--config", str(tiny_config_file)]) == 0
        expected = config_hash(load_config(tiny_config_file))
        assert (tmp_path / f"pretrain-{expected[:12]}" / "metrics.json").exists()

    def test_stage_by_stage_chain(self, tiny_config_file, tmp_path):
        cfg = ["--config", str(tiny_config_file)]
        pre, gen, quant, ft = (tmp_path / name for name in ("pre", "gen", "quant", "ft"))
        assert main(["pretrain", *cfg, "--out", str(pre)]) == 0
        assert main(["generate", *cfg, "--ckpt", str(pre / "fp.ckpt"), "--dump", "6", "--out", str(gen)]) == 0
        assert json.loads((gen / "synthetic" / "manifest.json").read_text())["count"] == 6
        assert main(["quantize", *cfg, "--ckpt", str(pre / "fp.ckpt"), "--gen", str(gen / "generator.ckpt"),
                     "--out", str(quant)]) == 0
        assert (quant / "quant_report.json").exists()
        assert main(["finetune", *cfg, "--ckpt", str(quant / "quantized.ckpt"), "--fp", str(pre / "fp.ckpt"),
                     "--gen", str(gen / "generator.ckpt"), "--out", str(ft)]) == 0
        assert read_metrics(ft)["ft_steps"] == 4
        assert main(["eval", *cfg, "--ckpt", str(ft / "quantized.ckpt"), "--out", str(tmp_path / "ev")]) == 0
        record = read_metrics(tmp_path / "ev")
        assert (record["wbits"], record["abits"]) == (4, 4)

    def test_finetune_rejects_full_precision_checkpoint(self, tiny_config_file, tmp_path):
        cfg = ["--config", str(tiny_config_file)]
        pre, gen = tmp_path / "pre", tmp_path / "gen"
        main(["pretrain", *cfg, "--out", str(pre)])
        main(["generate", *cfg, "--ckpt", str(pre / "fp.ckpt"), "--out", str(gen)])
        code = main(["finetune", *cfg, "--ckpt", str(pre / "fp.ckpt"), "--fp", str(pre / "fp.ckpt"),
                     "--gen", str(gen / "generator.ckpt"), "--out", str(tmp_path / "ft")])
        assert code == 2

    def test_generate_names_missing_producer(self, tiny_config_file, tmp_path):
        code = main(["generate", "--config", str(tiny_config_file), "--ckpt", str(tmp_path / "nope.ckpt"),
                     "--out", str(tmp_path / "gen")])
        assert code == 3


class TestAblationExport:

    def test_summary_has_one_row_per_arm(self):
        per_seed, summary = process_ablation_data(fake_ablation_records())
        assert len(per_seed) == 16 and len(summary) == 8
        assert summary["arm"].iloc[0] == "baseline" and summary["arm"].iloc[-1] == "LRG+AMA+DKD"
        assert summary["seeds"].tolist() == [2] * 8
        assert summary["q_top1_postfinetune"].iloc[0] == pytest.approx(70.5)

    def test_recovered_fraction(self):
        per_seed, _ = process_ablation_data(fake_ablation_records(seeds=(0,)))
        assert per_seed["recovered"].iloc[0] == pytest.approx(10.0 / 38.0)

    def test_files_written(self, tmp_path):
        summary = export_ablation(fake_ablation_records(), tmp_path)
        payload = json.loads((tmp_path / "ablation.json").read_text())
        assert len(payload["summary"]) == len(summary) == 8
        assert (tmp_path / "ablation.txt").read_text(encoding="ascii").startswith("Median top-1")
        sheets = pd.ExcelFile(tmp_path / "ablation.xlsx").sheet_names
        assert sheets[:2] == ["Summary", "All Runs"] and len(sheets) == 10

    def test_arm_labels(self):
        assert arm_label(False, False, False) == "baseline"
        assert arm_label(True, False, True) == "LRG+DKD"

    def test_empty_records(self):
        per_seed, summary = process_ablation_data([])
        assert per_seed.empty and summary.empty


class TestReportCommand:

    def test_report_builds_workbook(self, tmp_path):
        artifacts = RunArtifacts("pipeline", "0" * 64, out=tmp_path)
        artifacts.write_metrics({"fp_top1": 97.0, "q_top1_prefinetune": 60.0, "q_top1_postfinetune": 80.0})
        with JsonlWriter(tmp_path / "generation.jsonl") as writer:
            for step in range(3):
                writer.write({"stage": "generation", "step": step, "total": 1.0 / (step + 1), "lr": 0.01,
                              "L_BNS": 1.0 / (step + 1), "L_AMA": 0.0, "L_CE": 0.0, "L_TCKD": 0.0, "L_NCKD": 0.0})
        assert main(["report", str(tmp_path)]) == 0
        sheets = pd.ExcelFile(tmp_path / "report.xlsx").sheet_names
        assert sheets == ["Metrics", "generation"]

    def test_report_needs_metrics(self, tmp_path):
        assert main(["report", str(tmp_path)]) == 2
