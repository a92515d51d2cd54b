"""Full-precision pretraining of the classifier M_FP."""

import numpy as np
import structlog

from components.data_loader import iterate_batches
from components.evaluation import evaluate
from components.losses import cross_entropy
from engine.optim import SGD, StepSchedule
from engine.tensor import Tensor
from models.graph import pretrain_snapshot
from services.run_store import NullWriter
from utils.errors import NumericalError
from utils.helpers import rng_stream

log = structlog.get_logger(__name__)


def pretrain_fp(model, dataset, cfg, writer=None, eval_set=None):
    """
    Train with cross-entropy and SGD-Nesterov, updating BN running statistics,
    then freeze them into the model's BN store.

    Returns:
        (model, report): report holds the final train loss and FP top-1 in percent.
    """
    pc = cfg.pretrain
    writer = writer or NullWriter()
    opt = SGD(model.parameters(), StepSchedule(pc.lr, pc.lr_decay, pc.decay_every), pc.momentum, pc.weight_decay)
    model.unfreeze()

    step = 0
    loss_value = float("nan")
    for epoch in range(pc.epochs):
        shuffle = rng_stream(cfg.seed, "pretrain-shuffle", epoch)
        epoch_losses = []
        for images, labels in iterate_batches(dataset, pc.batch_size, shuffle):
            opt.zero_grad()
            try:
                logits, _ = model(Tensor(images), mode="train")
                loss = cross_entropy(logits, labels)
                loss.backward()
            except NumericalError as e:
                raise NumericalError(f"Pretraining diverged at epoch {epoch}, step {step}: {e}") from e
            lr = opt.step(step)
            loss_value = loss.item()
            epoch_losses.append(loss_value)
            writer.write({"stage": "pretrain", "epoch": epoch, "step": step, "L_CE": loss_value, "lr": lr})
            step += 1
        log.info("pretrain_epoch", epoch=epoch, steps=step, mean_loss=round(float(np.mean(epoch_losses)), 5))

    pretrain_snapshot(model)
    model.zero_grad()
    report = {"pretrain_steps": step, "final_loss": loss_value,
              "fp_top1": evaluate(model, eval_set if eval_set is not None else dataset)}
    log.info("pretrain_done", **report)
    return model, report
