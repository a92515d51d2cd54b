"""
Objective terms for data generation and fine-tuning.

Generation minimises  L_BNS + L_AMA  on the frozen full-precision model;
fine-tuning minimises  L_CE + lambda * L_DKD  on the quantized copy.
Teacher-side quantities are plain numpy constants, so gradients only reach
the generator (generation) or the student (fine-tuning).
"""

import math
from dataclasses import dataclass

import numpy as np
import structlog

from engine import functional as F
from engine.tensor import Tensor
from utils.errors import ConfigError, ShapeError

log = structlog.get_logger(__name__)

NORM_EPS = 1e-12
PROB_FLOOR = 1e-30


# Batch-norm statistics matching


@dataclass(frozen=True)
class BNSTarget:
    """Stored per-BN (mean, std) of the pretrained model, ordered by BN index."""

    means: tuple
    stds: tuple

    @classmethod
    def from_store(cls, bn_store):
        if bn_store is None or len(bn_store) == 0:
            raise ConfigError("Model has no frozen BN statistics; pretrain it first")
        keys = sorted(bn_store)
        return cls(tuple(bn_store.mean(k) for k in keys), tuple(bn_store.std(k) for k in keys))

    def __len__(self):
        return len(self.means)


def bns_loss(capture, target):
    """Sum over BN layers of ||mu_S - mu_P||^2 + ||sigma_S - sigma_P||^2."""
    stats = capture.bn_batch_stats
    if len(stats) != len(target):
        raise ConfigError(f"Capture has {len(stats)} BN layers, target has {len(target)}")
    total = None
    for k, (s, mu_p, sigma_p) in enumerate(zip(stats, target.means, target.stds)):
        if s.mean.shape != mu_p.shape:
            raise ConfigError(f"BN layer {k}: {s.mean.shape[0]} channels in capture, {mu_p.shape[0]} in target")
        d_mu = s.mean - Tensor(mu_p, dtype=s.mean.dtype)
        d_sigma = s.std - Tensor(sigma_p, dtype=s.std.dtype)
        term = F.sum(F.square(d_mu)) + F.sum(F.square(d_sigma))
        total = term if total is None else total + term
    return total


# Class centers and adversarial margin


@dataclass(frozen=True)
class AMAConfig:
    margin: float = 0.6
    lambda_low: float = 0.75
    lambda_high: float = 0.95
    center_mode: str = "batch"
    center_decay: float = 0.9

    def __post_init__(self):
        if self.margin < 0:
            raise ConfigError(f"AMA margin must be >= 0, got {self.margin}")
        if not -1.0 <= self.lambda_low < self.lambda_high <= 1.0:
            raise ConfigError(f"AMA bounds need -1 <= lambda_low < lambda_high <= 1, got "
                              f"{self.lambda_low}, {self.lambda_high}")
        if self.center_mode not in ("batch", "ema"):
            raise ConfigError(f"Unknown center mode '{self.center_mode}'")
        if not 0 < self.center_decay < 1:
            raise ConfigError(f"center_decay must be in (0, 1), got {self.center_decay}")


@dataclass
class ClassCenters:
    """Centers of the classes present in a batch; `index[b]` is the center row of sample b."""

    classes: np.ndarray
    centers: Tensor
    index: np.ndarray

    def per_sample(self):
        return F.embedding(self.centers, self.index)


def class_centers(features, labels):
    """Mean feature row per present class, as a differentiable P x D tensor."""
    labels = np.asarray(labels, dtype=np.int64)
    if features.ndim != 2 or features.shape[0] != labels.shape[0]:
        raise ShapeError(f"features {features.shape} do not match {labels.shape[0]} labels")
    if features.shape[0] == 0:
        raise ShapeError("class_centers needs at least one sample")
    classes, index, counts = np.unique(labels, return_inverse=True, return_counts=True)
    averaging = np.zeros((classes.size, labels.size), dtype=features.dtype)
    averaging[index, np.arange(labels.size)] = 1.0 / counts[index]
    centers = F.matmul(Tensor(averaging), features)
    return ClassCenters(classes, centers, index.reshape(-1))


class CenterTracker:
    """EMA of class centers across generation steps (the `ema` center mode)."""

    def __init__(self, num_classes, dim, decay=0.9):
        self.decay = decay
        self.values = np.zeros((num_classes, dim))
        self.seen = np.zeros(num_classes, dtype=bool)

    def blend(self, batch):
        """Mix stored centers into the batch centers; unseen classes use the batch center alone."""
        rows = batch.centers
        seen = self.seen[batch.classes]
        weight = np.where(seen, 1.0 - self.decay, 1.0)[:, None] * np.ones((1, rows.shape[1]))
        stored = np.where(seen[:, None], self.decay * self.values[batch.classes], 0.0)
        mixed = F.elementwise_mul(rows, Tensor(weight, dtype=rows.dtype)) + Tensor(stored, dtype=rows.dtype)
        self.values[batch.classes] = mixed.data
        self.seen[batch.classes] = True
        return ClassCenters(batch.classes, mixed, batch.index)


def _row_norms(x):
    return F.sqrt(F.add_scalar(F.sum(F.square(x), axis=1), NORM_EPS))


def cosine_similarity(features, centers):
    """Row-wise cosine between two B x D tensors, eps-guarded against zero norms."""
    dot = F.sum(F.elementwise_mul(features, centers), axis=1)
    return dot / F.elementwise_mul(_row_norms(features), _row_norms(centers))


def ama_loss(features, centers, cfg):
    """
    Hinge on cos(theta + m) outside [lambda_low, lambda_high], averaged over the batch.

    Args:
        features: B x D feature rows of the frozen model.
        centers: ClassCenters for the batch (one center per present class).
        cfg: AMAConfig.
    """
    per_sample = centers.per_sample()
    cos = F.clip(cosine_similarity(features, per_sample), -1.0, 1.0)
    theta = F.clip(F.add_scalar(F.arccos(cos), cfg.margin), 0.0, math.pi)
    shifted = F.cos(theta)
    below = F.relu(F.add_scalar(-shifted, cfg.lambda_low))
    above = F.relu(F.add_scalar(shifted, -cfg.lambda_high))
    return F.mean(below + above)


# Distillation


@dataclass(frozen=True)
class DKDConfig:
    alpha: float = 1.0
    beta: float = 8.0
    temperature: float = 1.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError(f"DKD weights must be >= 0, got alpha={self.alpha}, beta={self.beta}")
        if self.temperature <= 0:
            raise ConfigError(f"DKD temperature must be positive, got {self.temperature}")


def _teacher_array(logits):
    return np.asarray(logits.data if isinstance(logits, Tensor) else logits)


def _softmax_np(x):
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _nontarget_index(labels, num_classes):
    cols = np.tile(np.arange(num_classes), (labels.size, 1))
    keep = cols != labels[:, None]
    return cols[keep].reshape(labels.size, num_classes - 1)


def _check_logits(student_logits, teacher, labels):
    if student_logits.ndim != 2 or student_logits.shape != teacher.shape:
        raise ShapeError(f"student logits {student_logits.shape} and teacher logits {teacher.shape} differ")
    if student_logits.shape[1] < 2:
        raise ConfigError("Decoupled distillation needs at least 2 classes")
    if labels.shape != (student_logits.shape[0],):
        raise ShapeError(f"Expected {student_logits.shape[0]} labels, got {labels.shape}")


def _kl_const(p):
    """sum p log p per row, batch-averaged (teacher entropy side of a KL)."""
    return float(np.mean(np.sum(p * np.log(np.maximum(p, PROB_FLOOR)), axis=1)))


def _cross_term(p, log_q):
    """-mean_b sum_j p[b, j] log_q[b, j] with p constant."""
    return -F.mean(F.sum(F.elementwise_mul(Tensor(p, dtype=log_q.dtype), log_q), axis=1))


def dkd_components(student_logits, teacher_logits, labels, temperature=1.0):
    """
    Target-class and non-target-class KL terms, each scaled by T^2.

    Returns:
        (tckd, nckd) scalar tensors.
    """
    labels = np.asarray(labels, dtype=np.int64)
    teacher = _teacher_array(teacher_logits)
    _check_logits(student_logits, teacher, labels)
    t2 = temperature * temperature
    target = labels[:, None]
    nontarget = _nontarget_index(labels, teacher.shape[1])

    z = F.mul_scalar(student_logits, 1.0 / temperature)
    p_s = F.softmax(z, axis=1)
    pt_s = F.gather(p_s, target)
    rest_s = F.sum(F.gather(p_s, nontarget), axis=1, keepdims=True)
    log_binary_s = F.concat([F.log(pt_s), F.log(rest_s)], axis=1)

    p_t = _softmax_np(teacher / temperature)
    pt_t = np.take_along_axis(p_t, target, axis=1)
    binary_t = np.concatenate([pt_t, 1.0 - pt_t], axis=1)
    tckd = F.add_scalar(_cross_term(binary_t, log_binary_s), _kl_const(binary_t))

    log_q_s = F.log_softmax(F.gather(z, nontarget), axis=1)
    q_t = _softmax_np(np.take_along_axis(teacher, nontarget, axis=1) / temperature)
    nckd = F.add_scalar(_cross_term(q_t, log_q_s), _kl_const(q_t))
    return F.mul_scalar(tckd, t2), F.mul_scalar(nckd, t2)


def dkd_loss(student_logits, teacher_logits, labels, cfg):
    """alpha * TCKD + beta * NCKD, batch-averaged."""
    tckd, nckd = dkd_components(student_logits, teacher_logits, labels, cfg.temperature)
    return F.mul_scalar(tckd, cfg.alpha) + F.mul_scalar(nckd, cfg.beta)


def kd_loss(student_logits, teacher_logits, temperature=1.0):
    """Classic distillation: T^2 * KL(softmax(t/T) || softmax(s/T)), batch-averaged."""
    teacher = _teacher_array(teacher_logits)
    if student_logits.shape != teacher.shape:
        raise ShapeError(f"student logits {student_logits.shape} and teacher logits {teacher.shape} differ")
    p_t = _softmax_np(teacher / temperature)
    log_p_s = F.log_softmax(F.mul_scalar(student_logits, 1.0 / temperature), axis=1)
    kl = F.add_scalar(_cross_term(p_t, log_p_s), _kl_const(p_t))
    return F.mul_scalar(kl, temperature * temperature)


def cross_entropy(logits, labels):
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} do not match labels {labels.shape}")
    return -F.mean(F.gather(F.log_softmax(logits, axis=1), labels[:, None]))


# Combined objectives


def generation_loss(capture, target, features, labels, ama_cfg=None, tracker=None):
    """
    L_BNS + L_AMA for one synthetic batch; AMA is skipped when `ama_cfg` is None.

    Returns:
        (total, terms): the scalar tensor and a dict of float values for logging.
    """
    l_bns = bns_loss(capture, target)
    if ama_cfg is None:
        return l_bns, {"L_BNS": l_bns.item(), "L_AMA": 0.0}
    centers = class_centers(features, labels)
    if tracker is not None:
        centers = tracker.blend(centers)
    l_ama = ama_loss(features, centers, ama_cfg)
    total = l_bns + l_ama
    return total, {"L_BNS": l_bns.item(), "L_AMA": l_ama.item()}


def finetune_loss(q_logits, fp_logits, labels, lam=0.9, dkd_cfg=None, distill="dkd"):
    """
    L_CE + lambda * L_distill for the quantized model on one synthetic batch.

    `distill="kd"` swaps the decoupled term for classic temperature distillation.
    With lambda == 0 only the cross-entropy term is built.
    """
    if lam < 0:
        raise ConfigError(f"distillation weight must be >= 0, got {lam}")
    dkd_cfg = dkd_cfg or DKDConfig()
    l_ce = cross_entropy(q_logits, labels)
    terms = {"L_CE": l_ce.item(), "L_TCKD": 0.0, "L_NCKD": 0.0}
    if lam == 0:
        return l_ce, terms
    if distill == "kd":
        l_kd = kd_loss(q_logits, fp_logits, dkd_cfg.temperature)
        terms["L_KD"] = l_kd.item()
        return l_ce + F.mul_scalar(l_kd, lam), terms
    if distill != "dkd":
        raise ConfigError(f"Unknown distillation objective '{distill}'")
    tckd, nckd = dkd_components(q_logits, fp_logits, labels, dkd_cfg.temperature)
    terms["L_TCKD"], terms["L_NCKD"] = tckd.item(), nckd.item()
    l_dkd = F.mul_scalar(tckd, dkd_cfg.alpha) + F.mul_scalar(nckd, dkd_cfg.beta)
    return l_ce + F.mul_scalar(l_dkd, lam), terms


def ama_config_from(cfg):
    low, high = cfg.ama_bounds()
    return AMAConfig(margin=cfg.hyper.margin, lambda_low=low, lambda_high=high,
                     center_mode=cfg.hyper.center_mode, center_decay=cfg.hyper.center_decay)


def dkd_config_from(cfg):
    return DKDConfig(alpha=cfg.hyper.alpha_dkd, beta=cfg.hyper.beta_dkd, temperature=cfg.hyper.temperature)
