"""Top-1 accuracy and feature dispersion measurements."""

import numpy as np
import structlog

from components.data_loader import iterate_batches
from engine.tensor import Tensor, no_grad
from utils.errors import DataError

log = structlog.get_logger(__name__)


def evaluate(model, dataset, batch_size=256):
    """Top-1 accuracy in percent."""
    if len(dataset) == 0:
        raise DataError(f"Cannot evaluate on empty dataset {dataset.name}")
    correct = 0
    with no_grad():
        for images, labels in iterate_batches(dataset, batch_size):
            logits, _ = model(Tensor(images), mode="eval")
            correct += int(np.sum(np.argmax(logits.data, axis=1) == labels))
    top1 = 100.0 * correct / len(dataset)
    log.info("evaluated", dataset=dataset.name, samples=len(dataset), top1=round(top1, 4))
    return top1


def intra_class_dispersion(features, labels):
    """
    Mean pairwise cosine distance between features of the same class.

    Classes with fewer than two samples are skipped; returns 0.0 if none remain.
    """
    features = np.asarray(features.data if isinstance(features, Tensor) else features, dtype=np.float64)
    labels = np.asarray(labels)
    unit = features / np.maximum(np.linalg.norm(features, axis=1, keepdims=True), 1e-12)
    per_class = []
    for c in np.unique(labels):
        rows = unit[labels == c]
        n = rows.shape[0]
        if n < 2:
            continue
        sim = rows @ rows.T
        mean_sim = (sim.sum() - np.trace(sim)) / (n * (n - 1))
        per_class.append(1.0 - mean_sim)
    return float(np.mean(per_class)) if per_class else 0.0
