"""
Stage orchestration shared by the CLI commands.

pretrain -> generate -> quantize (wrap + activation warm-up) -> finetune -> eval.
`run_pipeline` chains them in one process; `run_ablation` pretrains once per seed
and runs the eight generator/objective flag combinations against that model.
"""

import itertools
from concurrent.futures import ProcessPoolExecutor

import structlog

from components.data_export import arm_label, export_ablation, export_quant_report
from components.data_generation import run_data_generation
from components.data_loader import load_dataset
from components.evaluation import evaluate
from components.finetune import run_finetune, warm_up_activations
from components.pretrain import pretrain_fp
from components.quantizer import wrap_model
from models.generator import build_generator, generator_spec_from_config
from models.resnet import build_resnet_tiny
from services.checkpoint_store import load_checkpoint, save_checkpoint
from services.run_store import NullWriter, RunArtifacts
from utils.config import TrainConfig, config_hash, with_overrides
from utils.helpers import configure_logging

log = structlog.get_logger(__name__)


def _writer(artifacts, name):
    return artifacts.log_writer(name) if artifacts is not None else NullWriter()


def load_splits(cfg):
    m = cfg.model
    train = load_dataset(cfg.data, m.num_classes, m.image_size, cfg.seed, split="train")
    test = load_dataset(cfg.data, m.num_classes, m.image_size, cfg.seed, split="test")
    return train, test


def stage_pretrain(cfg, train_set, eval_set, artifacts=None):
    m = cfg.model
    fp = build_resnet_tiny(m.arch, m.num_classes, m.width_mult, m.image_size, seed=cfg.seed)
    log.info("classifier_built", arch=m.arch, params=fp.num_parameters(), bn_layers=len(fp.bn_layers()))
    with _writer(artifacts, "pretrain") as writer:
        fp, report = pretrain_fp(fp, train_set, cfg, writer, eval_set=eval_set)
    if artifacts is not None:
        save_checkpoint(fp, artifacts.checkpoint("fp"))
    return fp, report


def stage_generate(fp, cfg, artifacts=None):
    generator = build_generator(generator_spec_from_config(cfg), seed=cfg.seed)
    with _writer(artifacts, "generation") as writer:
        generator, report = run_data_generation(fp, generator, cfg, writer)
    if artifacts is not None:
        save_checkpoint(generator, artifacts.checkpoint("generator"))
    return generator, report


def stage_quantize(fp, generator, cfg):
    """Wrap M_FP at the configured bit-widths and freeze activation ranges on synthetic batches."""
    q = cfg.quant
    q_model = wrap_model(fp, q.weight_bits, q.act_bits, q.per_channel, q.drop_offset_dequant, q.act_ema_momentum)
    warm_up_activations(q_model, generator, cfg)
    return q_model


def stage_finetune(q_model, fp, generator, cfg, artifacts=None):
    with _writer(artifacts, "finetune") as writer:
        q_model, report = run_finetune(q_model, fp, generator, cfg, writer)
    if artifacts is not None:
        save_checkpoint(q_model, artifacts.checkpoint("quantized"))
    return q_model, report


def quantization_stages(fp, fp_top1, cfg, eval_set, artifacts=None):
    """Generation, wrapping and fine-tuning against an already pretrained M_FP; returns the metrics record."""
    generator, gen_report = stage_generate(fp, cfg, artifacts)
    q_model = stage_quantize(fp, generator, cfg)
    pre = evaluate(q_model, eval_set)
    q_model, ft_report = stage_finetune(q_model, fp, generator, cfg, artifacts)
    post = evaluate(q_model, eval_set)
    if artifacts is not None:
        export_quant_report(q_model, artifacts.path("quant_report.json"))
    return {
        "fp_top1": fp_top1,
        "q_top1_prefinetune": pre,
        "q_top1_postfinetune": post,
        "wbits": cfg.quant.weight_bits,
        "abits": cfg.quant.act_bits,
        "seed": cfg.seed,
        **cfg.ablation.model_dump(),
        "synthetic_dispersion": gen_report["synthetic_dispersion"],
        "L_BNS_first": gen_report["L_BNS_first"],
        "L_BNS_last": gen_report["L_BNS_last"],
        "ft_steps": ft_report["ft_steps"],
        "config_hash": config_hash(cfg),
    }


def run_pipeline(cfg, artifacts=None):
    """All stages end to end; writes checkpoints and metrics.json when `artifacts` is given."""
    train_set, test_set = load_splits(cfg)
    fp, pre_report = stage_pretrain(cfg, train_set, test_set, artifacts)
    metrics = quantization_stages(fp, pre_report["fp_top1"], cfg, test_set, artifacts)
    if artifacts is not None:
        metrics = artifacts.write_metrics(metrics)
        artifacts.write_run_info()
    log.info("pipeline_done", fp_top1=metrics["fp_top1"], pre=metrics["q_top1_prefinetune"],
             post=metrics["q_top1_postfinetune"])
    return metrics


def ablation_arms():
    """All eight (lrg_on, ama_on, dkd_on) combinations, all-off first."""
    return list(itertools.product((False, True), repeat=3))


def _run_arm(payload):
    """Worker entry: payload is plain data so it pickles into a subprocess."""
    cfg = TrainConfig.model_validate(payload["config"])
    fp = load_checkpoint(payload["fp_checkpoint"], expected_family="resnet")
    fp.freeze()
    _, test_set = load_splits(cfg)
    artifacts = RunArtifacts("arm", config_hash(cfg), out=payload["out"])
    metrics = quantization_stages(fp, payload["fp_top1"], cfg, test_set, artifacts)
    return artifacts.write_metrics(metrics)


def _worker_init(log_level, json_logs):
    configure_logging(log_level, json_logs)


def run_ablation(cfg, artifacts, seeds=None, workers=1, log_level=None, json_logs=False):
    """
    Pretrain once per seed, then run the eight flag combinations.

    Arms run sequentially, or in `workers` processes with one output directory each.
    Returns the per-arm median summary frame; per-seed records and tables are written
    under the run directory.
    """
    seeds = list(seeds or [cfg.seed])
    payloads = []
    for seed in seeds:
        seed_cfg = with_overrides(cfg, {"seed": seed})
        train_set, test_set = load_splits(seed_cfg)
        seed_dir = RunArtifacts("seed", config_hash(seed_cfg), out=artifacts.path(f"seed{seed}"))
        _, report = stage_pretrain(seed_cfg, train_set, test_set, seed_dir)
        for lrg_on, ama_on, dkd_on in ablation_arms():
            arm_cfg = with_overrides(seed_cfg, {"ablation.lrg_on": lrg_on, "ablation.ama_on": ama_on,
                                                "ablation.dkd_on": dkd_on})
            payloads.append({
                "config": arm_cfg.model_dump(mode="json"),
                "fp_checkpoint": str(seed_dir.checkpoint("fp")),
                "fp_top1": report["fp_top1"],
                "out": str(artifacts.path(f"seed{seed}") / f"arm-{arm_label(lrg_on, ama_on, dkd_on)}"),
            })

    log.info("ablation_start", seeds=seeds, arms=len(payloads), workers=workers)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers, initializer=_worker_init,
                                 initargs=(log_level, json_logs)) as pool:
            records = list(pool.map(_run_arm, payloads))
    else:
        records = [_run_arm(p) for p in payloads]

    summary = export_ablation(records, artifacts.dir)
    artifacts.write_metrics({"arms": len(summary), "seeds": seeds, "runs": len(records)})
    artifacts.write_run_info(workers=workers)
    return summary
