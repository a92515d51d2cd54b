"""
Fine-tuning of the quantized model M_Q on freshly generated batches.

Every step draws a new synthetic batch from the (frozen) generator using a seed
stream keyed by (epoch, step), so the optional prefetch thread produces exactly
the batches the sequential loop would. In alternating mode the generator takes
one update before each fine-tuning step and prefetch is off.
"""

import queue
import threading

import structlog

from components.data_generation import GeneratorTrainer, step_record
from components.losses import dkd_config_from, finetune_loss
from components.quantizer import warm_up_ranges
from engine.optim import SGD, StepSchedule
from engine.tensor import Tensor, no_grad
from models.generator import generate_batch
from services.run_store import NullWriter
from utils.errors import ConfigError, NumericalError
from utils.helpers import params_digest, rng_stream

log = structlog.get_logger(__name__)

_DONE = object()


def synthetic_batch(generator, cfg, stream, *keys, batch=None):
    """Detached (images, labels) from the generator for seed stream `stream` and `keys`."""
    with no_grad():
        images, labels = generate_batch(generator, batch or cfg.ft_batch_size(), cfg.generation.label_policy,
                                        rng_stream(cfg.seed, stream, *keys))
    return images.data, labels


class BatchPrefetcher:
    """
    Runs `make_batch(*key)` for each key on a worker thread, at most one batch ahead.

    Iteration yields batches in key order; an exception in the worker is re-raised
    in the consumer.
    """

    def __init__(self, make_batch, keys):
        self._queue = queue.Queue(maxsize=1)
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._produce, args=(make_batch, list(keys)), daemon=True)
        self._thread.start()

    def _put(self, item):
        while not self._stop.is_set():
            try:
                self._queue.put(item, timeout=0.1)
                return True
            except queue.Full:
                continue
        return False

    def _produce(self, make_batch, keys):
        for key in keys:
            try:
                item = ("ok", make_batch(*key))
            except Exception as e:  # handed to the consumer
                self._put(("error", e))
                return
            if not self._put(item):
                return
        self._put(("done", _DONE))

    def __iter__(self):
        while True:
            kind, item = self._queue.get()
            if kind == "done":
                return
            if kind == "error":
                raise item
            yield item

    def close(self):
        self._stop.set()
        self._thread.join(timeout=5)


def warm_up_activations(q_model, generator, cfg):
    """Observe activation ranges on `act_warmup_batches` synthetic batches, then freeze them."""
    batches = (Tensor(synthetic_batch(generator, cfg, "act-warmup", i)[0])
               for i in range(cfg.finetune.act_warmup_batches))
    return warm_up_ranges(q_model, batches)


def _batch_source(generator, cfg, keys, use_prefetch):
    def make(epoch, step):
        return synthetic_batch(generator, cfg, "finetune", epoch, step)

    if use_prefetch:
        return BatchPrefetcher(make, keys)
    return (make(*key) for key in keys)


def run_finetune(q_model, fp_model, generator, cfg, writer=None):
    """
    Minimise L_CE + lambda * L_DKD on M_Q with SGD-Nesterov.

    lambda is cfg.hyper.kd_lambda, forced to 0 when the DKD arm is off. The
    learning rate decays per epoch. M_Q runs with eval-mode BN so no running
    buffer moves; its BN affine parameters still train.

    Returns:
        (q_model, report)
    """
    if q_model.quant is None:
        raise ConfigError("run_finetune needs a quantized model (wrap_model first)")
    writer = writer or NullWriter()
    ft = cfg.finetune
    lam = cfg.hyper.kd_lambda if cfg.ablation.dkd_on else 0.0
    dkd_cfg = dkd_config_from(cfg)
    alternate = ft.alternate_generator
    use_prefetch = ft.prefetch and not alternate
    if ft.prefetch and alternate:
        log.warning("prefetch_disabled", reason="alternating generator updates")

    fp_model.freeze()
    teacher_before = params_digest(fp_model.named_arrays())
    if not q_model.quant.frozen:
        warm_up_activations(q_model, generator, cfg)
    gen_trainer = GeneratorTrainer(fp_model, generator, cfg) if alternate else None

    q_model.unfreeze()
    opt = SGD(q_model.parameters(), StepSchedule(ft.lr, ft.lr_decay, cfg.ft_decay_every()), ft.momentum,
              ft.weight_decay)
    epochs = cfg.ft_epochs()
    keys = [(epoch, step) for epoch in range(epochs) for step in range(ft.steps_per_epoch)]
    log.info("finetune_start", epochs=epochs, steps_per_epoch=ft.steps_per_epoch, batch=cfg.ft_batch_size(),
             lam=lam, distill=ft.distill, alternate=alternate, prefetch=use_prefetch)

    if alternate:
        source = ((epoch, step) for epoch, step in keys)
    else:
        source = _batch_source(generator, cfg, keys, use_prefetch)

    global_step = 0
    total_value = float("nan")
    try:
        for key, item in zip(keys, source):
            epoch, step = key
            gen_terms = {}
            if alternate:
                _, gen_terms, _ = gen_trainer.step(rng_stream(cfg.seed, "generation-alt", epoch, step))
                item = synthetic_batch(generator, cfg, "finetune", epoch, step)
            images, labels = item
            opt.zero_grad()
            try:
                q_logits, _ = q_model(Tensor(images), mode="eval")
                with no_grad():
                    fp_logits, _ = fp_model(Tensor(images), mode="eval")
                total, terms = finetune_loss(q_logits, fp_logits, labels, lam, dkd_cfg, ft.distill)
                total.backward()
            except NumericalError as e:
                raise NumericalError(f"Fine-tuning diverged at epoch {epoch}, step {step}: {e}") from e
            lr = opt.step(epoch)
            total_value = total.item()
            writer.write(step_record("finetune", global_step, {**gen_terms, **terms}, total_value, lr, epoch=epoch))
            global_step += 1
            if step == ft.steps_per_epoch - 1:
                log.info("finetune_epoch", epoch=epoch, steps=global_step, total=round(total_value, 5), lr=lr)
    finally:
        if isinstance(source, BatchPrefetcher):
            source.close()

    if params_digest(fp_model.named_arrays()) != teacher_before:
        raise AssertionError("full-precision model changed during fine-tuning")
    if alternate:
        generator.freeze()
    q_model.zero_grad()
    report = {"ft_steps": global_step, "ft_epochs": epochs, "final_loss": total_value, "lambda": lam}
    log.info("finetune_done", **report)
    return q_model, report
