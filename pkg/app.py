import argparse
import json
import sys
from pathlib import Path

import structlog

from components.data_export import export_quant_report, export_run_workbook
from components.data_generation import run_data_generation
from components.evaluation import evaluate
from components.finetune import synthetic_batch
from components.pipeline import (
    load_splits,
    run_ablation,
    run_pipeline,
    stage_finetune,
    stage_pretrain,
    stage_quantize,
)
from models.generator import build_generator, generator_spec_from_config
from services.checkpoint_store import load_checkpoint, save_checkpoint
from services.run_store import RunArtifacts, read_jsonl, require_checkpoint
from services.synthetic_dump import save_dump
from utils.config import config_hash, load_config
from utils.errors import ConfigError, LRQError
from utils.helpers import configure_logging
from utils.visualization import log_frame, save_stage_charts

log = structlog.get_logger("app")

STAGE_LOGS = ("pretrain", "generation", "finetune")


def build_parser():
    parser = argparse.ArgumentParser(prog="lrq", description="Data-free low-bit quantization with a long-range generator.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run configuration")
    common.add_argument("--wbits", type=int, help="weight bit-width (overrides quant.weight_bits)")
    common.add_argument("--abits", type=int, help="activation bit-width (overrides quant.act_bits)")
    common.add_argument("--seed", type=int, help="run seed (overrides seed)")
    common.add_argument("--out", type=Path, help="output directory (default: <root>/<command>-<hash>)")
    common.add_argument("--log-json", action="store_true", help="emit logs as JSON lines")
    common.add_argument("--log-level", help="log level (default $LRQ_LOG_LEVEL or INFO)")

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("pretrain", parents=[common], help="train the full-precision classifier")

    p = sub.add_parser("generate", parents=[common], help="train the generator against a pretrained classifier")
    p.add_argument("--ckpt", type=Path, required=True, help="full-precision checkpoint (from pretrain)")
    p.add_argument("--dump", type=int, default=0, help="also dump this many synthetic images")

    p = sub.add_parser("quantize", parents=[common], help="wrap the classifier and calibrate activation ranges")
    p.add_argument("--ckpt", type=Path, required=True, help="full-precision checkpoint (from pretrain)")
    p.add_argument("--gen", type=Path, required=True, help="generator checkpoint (from generate)")

    p = sub.add_parser("finetune", parents=[common], help="fine-tune a quantized classifier on synthetic data")
    p.add_argument("--ckpt", type=Path, required=True, help="quantized checkpoint (from quantize)")
    p.add_argument("--fp", type=Path, required=True, help="full-precision checkpoint (from pretrain)")
    p.add_argument("--gen", type=Path, required=True, help="generator checkpoint (from generate)")

    p = sub.add_parser("eval", parents=[common], help="top-1 accuracy of a classifier checkpoint")
    p.add_argument("--ckpt", type=Path, required=True, help="classifier checkpoint")

    sub.add_parser("pipeline", parents=[common], help="pretrain, generate, quantize, finetune and evaluate")

    p = sub.add_parser("ablate", parents=[common], help="run all eight LRG/AMA/DKD combinations")
    p.add_argument("--seeds", type=int, nargs="+", help="seeds to run (median reported per arm)")
    p.add_argument("--workers", type=int, default=1, help="parallel processes for the arms")

    p = sub.add_parser("report", help="charts and an Excel workbook for a finished run directory")
    p.add_argument("run_dir", type=Path)
    p.add_argument("--log-json", action="store_true")
    p.add_argument("--log-level")
    return parser


def _overrides(args):
    return {"quant.weight_bits": args.wbits, "quant.act_bits": args.abits, "seed": args.seed}


def _emit(payload):
    print(json.dumps(payload, indent=2, sort_keys=True))


def cmd_pretrain(args, cfg, artifacts):
    train_set, test_set = load_splits(cfg)
    _, report = stage_pretrain(cfg, train_set, test_set, artifacts)
    return {"fp_top1": report["fp_top1"], "pretrain_steps": report["pretrain_steps"], "seed": cfg.seed}


def cmd_generate(args, cfg, artifacts):
    fp = load_checkpoint(require_checkpoint(args.ckpt, "pretrain"), expected_family="resnet")
    generator = build_generator(generator_spec_from_config(cfg), seed=cfg.seed)
    with artifacts.log_writer("generation") as writer:
        generator, report = run_data_generation(fp, generator, cfg, writer)
    save_checkpoint(generator, artifacts.checkpoint("generator"))
    if args.dump:
        images, labels = synthetic_batch(generator, cfg, "dump", 0, batch=args.dump)
        save_dump(images, labels, fp.num_classes, artifacts.path("synthetic"), extra={"config_hash": artifacts.config_hash})
    return {**report, "seed": cfg.seed, **cfg.ablation.model_dump()}


def cmd_quantize(args, cfg, artifacts):
    fp = load_checkpoint(require_checkpoint(args.ckpt, "pretrain"), expected_family="resnet")
    generator = load_checkpoint(require_checkpoint(args.gen, "generate"), expected_family="generator")
    q_model = stage_quantize(fp, generator, cfg)
    save_checkpoint(q_model, artifacts.checkpoint("quantized"))
    export_quant_report(q_model, artifacts.path("quant_report.json"))
    _, test_set = load_splits(cfg)
    return {"q_top1_prefinetune": evaluate(q_model, test_set), "wbits": cfg.quant.weight_bits,
            "abits": cfg.quant.act_bits, "seed": cfg.seed}


def cmd_finetune(args, cfg, artifacts):
    q_model = load_checkpoint(require_checkpoint(args.ckpt, "quantize"), expected_family="resnet")
    if q_model.quant is None:
        raise ConfigError(f"{args.ckpt} is not a quantized checkpoint; run `quantize` first")
    fp = load_checkpoint(require_checkpoint(args.fp, "pretrain"), expected_family="resnet")
    generator = load_checkpoint(require_checkpoint(args.gen, "generate"), expected_family="generator")
    generator.freeze()
    q_model, report = stage_finetune(q_model, fp, generator, cfg, artifacts)
    _, test_set = load_splits(cfg)
    return {"q_top1_postfinetune": evaluate(q_model, test_set), "ft_steps": report["ft_steps"],
            "wbits": q_model.quant.weight_bits, "abits": q_model.quant.act_bits, "seed": cfg.seed}


def cmd_eval(args, cfg, artifacts):
    model = load_checkpoint(require_checkpoint(args.ckpt, "pretrain"), expected_family="resnet")
    _, test_set = load_splits(cfg)
    record = {"top1": evaluate(model, test_set), "checkpoint": str(args.ckpt), "samples": len(test_set)}
    if model.quant is not None:
        record.update(wbits=model.quant.weight_bits, abits=model.quant.act_bits)
    return record


def cmd_pipeline(args, cfg, artifacts):
    return run_pipeline(cfg, artifacts)


def cmd_ablate(args, cfg, artifacts):
    summary = run_ablation(cfg, artifacts, seeds=args.seeds, workers=args.workers,
                           log_level=args.log_level, json_logs=args.log_json)
    print((artifacts.dir / "ablation.txt").read_text(encoding="ascii"))
    return {"arms": len(summary), "run_dir": str(artifacts.dir)}


def cmd_report(args):
    run_dir = args.run_dir
    metrics_path = run_dir / "metrics.json"
    if not metrics_path.exists():
        raise ConfigError(f"{run_dir} has no metrics.json; is it a finished run directory?")
    metrics = json.loads(metrics_path.read_text(encoding="utf-8"))
    frames = {}
    for stage in STAGE_LOGS:
        path = run_dir / f"{stage}.jsonl"
        if path.exists():
            frames[stage] = log_frame(read_jsonl(path))
            save_stage_charts(frames[stage], stage, run_dir / f"{stage}_curves.png")
    export_run_workbook(metrics, frames, run_dir / "report.xlsx")
    return {"run_dir": str(run_dir), "logs": sorted(frames)}


HANDLERS = {
    "pretrain": cmd_pretrain,
    "generate": cmd_generate,
    "quantize": cmd_quantize,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "pipeline": cmd_pipeline,
    "ablate": cmd_ablate,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level, args.log_json)
    try:
        if args.command == "report":
            _emit(cmd_report(args))
            return 0
        cfg = load_config(args.config, _overrides(args))
        cfg_hash = config_hash(cfg)
        print(f"config hash: {cfg_hash}")
        artifacts = RunArtifacts(args.command, cfg_hash, out=args.out)
        result = HANDLERS[args.command](args, cfg, artifacts)
        if result is not None and args.command not in ("pipeline", "ablate"):
            result = artifacts.write_metrics(result)
            artifacts.write_run_info()
        _emit(result)
    except LRQError as e:
        log.error("command_failed", command=args.command, error=str(e), error_type=type(e).__name__)
        return e.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
