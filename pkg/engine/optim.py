"""Optimizers and the step learning-rate schedule used by both training loops."""

import numpy as np


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """
    One Adam update, in place.

    Args:
        params: List of parameter arrays.
        grads: Matching list of gradient arrays (None entries are skipped).
        state: Dict carrying "t", "m" and "v" between calls; initialised on first use.
    """
    if "m" not in state:
        state["t"] = 0
        state["m"] = [np.zeros_like(p) for p in params]
        state["v"] = [np.zeros_like(p) for p in params]
    state["t"] += 1
    t = state["t"]
    bias1 = 1.0 - beta1**t
    bias2 = 1.0 - beta2**t
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        if g is None:
            continue
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= (lr * (m / bias1) / (np.sqrt(v / bias2) + eps)).astype(p.dtype)
    return params


def sgd_nesterov_step(params, grads, state, lr, momentum=0.9, weight_decay=0.0):
    """One SGD step with Nesterov momentum and L2 weight decay, in place."""
    if "buf" not in state:
        state["buf"] = [np.zeros_like(p) for p in params]
    for p, g, buf in zip(params, grads, state["buf"]):
        if g is None:
            continue
        d = g + weight_decay * p
        buf *= momentum
        buf += d
        p -= (lr * (d + momentum * buf)).astype(p.dtype)
    return params


class StepSchedule:
    """lr(t) = lr0 * gamma ** floor(t / period), computed from t so it never drifts."""

    def __init__(self, lr0, gamma, period):
        self.lr0 = lr0
        self.gamma = gamma
        self.period = period

    def lr_at(self, t):
        return self.lr0 * self.gamma ** (t // self.period)


class Adam:
    """Adam over a list of leaf tensors."""

    def __init__(self, tensors, schedule, beta1=0.9, beta2=0.999, eps=1e-8):
        self.tensors = list(tensors)
        self.schedule = schedule
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state = {}
        self.step_count = 0

    def step(self):
        lr = self.schedule.lr_at(self.step_count)
        adam_step([t.data for t in self.tensors], [t.grad for t in self.tensors], self.state,
                  lr, self.beta1, self.beta2, self.eps)
        self.step_count += 1
        return lr

    def zero_grad(self):
        for t in self.tensors:
            t.zero_grad()


class SGD:
    """SGD-Nesterov over a list of leaf tensors; the schedule is indexed by epoch."""

    def __init__(self, tensors, schedule, momentum=0.9, weight_decay=0.0):
        self.tensors = list(tensors)
        self.schedule = schedule
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.state = {}

    def step(self, t):
        lr = self.schedule.lr_at(t)
        sgd_nesterov_step([p.data for p in self.tensors], [p.grad for p in self.tensors], self.state,
                          lr, self.momentum, self.weight_decay)
        return lr

    def zero_grad(self):
        for t in self.tensors:
            t.zero_grad()
