"""
Data generation: train the conditional generator against the frozen full-precision model.

Each step samples noise and labels, synthesizes a batch, runs it through M_FP with
statistics capture, and takes one Adam step on the generator for L_BNS + L_AMA.
M_FP is never updated; its parameters, buffers and BN store are digested before
and after the run.
"""

import numpy as np
import structlog

from components.evaluation import intra_class_dispersion
from components.losses import BNSTarget, CenterTracker, ama_config_from, generation_loss
from engine.optim import Adam, StepSchedule
from engine.tensor import no_grad
from models.generator import generate_batch
from services.run_store import NullWriter
from utils.errors import NumericalError
from utils.helpers import params_digest, rng_stream

log = structlog.get_logger(__name__)

LOG_TERMS = ("L_BNS", "L_AMA", "L_CE", "L_TCKD", "L_NCKD")
TREND_WINDOW = 100


def step_record(stage, step, terms, total, lr, **extra):
    """One JSON-lines record; terms a stage does not use are logged as 0."""
    record = {"stage": stage, "step": step, "total": total, "lr": lr, **extra}
    record.update({k: float(terms.get(k, 0.0)) for k in LOG_TERMS})
    return record


def make_generator_optimizer(generator, cfg):
    gc = cfg.generation
    schedule = StepSchedule(gc.lr, gc.lr_decay, cfg.gen_decay_every())
    return Adam(generator.parameters(), schedule, gc.beta1, gc.beta2, gc.eps)


class GeneratorTrainer:
    """Holds the pieces of one generator update so sequential and alternating modes share them."""

    def __init__(self, fp_model, generator, cfg):
        self.fp_model = fp_model
        self.generator = generator
        self.cfg = cfg
        self.target = BNSTarget.from_store(fp_model.bn_store)
        self.ama_cfg = ama_config_from(cfg) if cfg.ablation.ama_on else None
        self.tracker = None
        if self.ama_cfg is not None and self.ama_cfg.center_mode == "ema":
            self.tracker = CenterTracker(fp_model.num_classes, fp_model.feature_dim, self.ama_cfg.center_decay)
        self.optimizer = make_generator_optimizer(generator, cfg)
        fp_model.freeze()
        generator.unfreeze()

    def step(self, rng):
        """One Adam update of the generator; returns (total, terms, lr)."""
        self.optimizer.zero_grad()
        images, labels = generate_batch(self.generator, self.cfg.gen_batch_size(),
                                        self.cfg.generation.label_policy, rng)
        _, capture = self.fp_model(images, mode="eval", capture=True)
        total, terms = generation_loss(capture, self.target, capture.features, labels, self.ama_cfg, self.tracker)
        total.backward()
        assert all(p.grad is None for p in self.fp_model.params.values()), "gradient leaked into the frozen model"
        lr = self.optimizer.step()
        return total.item(), terms, lr


def measure_synthetic_dispersion(fp_model, generator, cfg, batch=None):
    """Intra-class cosine dispersion of M_FP features on one fresh synthetic batch."""
    rng = rng_stream(cfg.seed, "generation-dispersion", 0)
    with no_grad():
        images, labels = generate_batch(generator, batch or cfg.gen_batch_size(), cfg.generation.label_policy, rng)
        _, capture = fp_model(images, mode="eval", capture=True)
    return intra_class_dispersion(capture.features, labels)


def run_data_generation(fp_model, generator, cfg, writer=None):
    """
    Train `generator` for cfg.gen_steps() Adam updates.

    Returns:
        (generator, report): the generator is frozen on return; the report holds
        first/last-window L_BNS means and the synthetic feature dispersion.
    """
    writer = writer or NullWriter()
    before = params_digest(fp_model.named_arrays())
    trainer = GeneratorTrainer(fp_model, generator, cfg)
    steps = cfg.gen_steps()
    log.info("generation_start", steps=steps, batch=cfg.gen_batch_size(), ama=trainer.ama_cfg is not None,
             lra_blocks=sum(1 for l in generator.layers if l.kind == "lra"))

    bns_history = []
    for step in range(steps):
        try:
            total, terms, lr = trainer.step(rng_stream(cfg.seed, "generation", step))
        except NumericalError as e:
            raise NumericalError(f"Data generation diverged at step {step}: {e}") from e
        bns_history.append(terms["L_BNS"])
        writer.write(step_record("generation", step, terms, total, lr))
        if step % max(1, steps // 10) == 0 or step == steps - 1:
            log.info("generation_step", step=step, total=round(total, 5), lr=lr,
                     **{k: round(v, 5) for k, v in terms.items()})

    if params_digest(fp_model.named_arrays()) != before:
        raise AssertionError("full-precision model changed during data generation")
    generator.freeze()

    window = max(1, min(TREND_WINDOW, steps // 2))
    report = {
        "gen_steps": steps,
        "L_BNS_first": float(np.mean(bns_history[:window])),
        "L_BNS_last": float(np.mean(bns_history[-window:])),
        "synthetic_dispersion": measure_synthetic_dispersion(fp_model, generator, cfg),
    }
    log.info("generation_done", **report)
    return generator, report
