"""Central finite-difference oracle for checking analytic gradients."""

import numpy as np

from engine.tensor import no_grad


def numerical_gradient(fn, inputs, target, eps=1e-4):
    """d fn(*inputs) / d inputs[target] by central differences, perturbing in place."""
    inputs[target].data = np.ascontiguousarray(inputs[target].data)
    x = inputs[target].data
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            plus = fn(*inputs).item()
            flat[i] = orig - eps
            minus = fn(*inputs).item()
            flat[i] = orig
            out[i] = (plus - minus) / (2.0 * eps)
    return grad


def relative_error(analytic, numeric, floor=1e-6):
    diff = np.linalg.norm(analytic - numeric)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(diff / scale)


def gradient_errors(fn, inputs, eps=1e-4):
    """
    Compare analytic and numerical gradients for every input that requires grad.

    Returns:
        Dict of input position -> relative error.
    """
    for t in inputs:
        t.zero_grad()
    loss = fn(*inputs)
    loss.backward()
    errors = {}
    for i, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        errors[i] = relative_error(analytic, numerical_gradient(fn, inputs, i, eps))
    return errors


def gradcheck(fn, inputs, eps=1e-4, rtol=1e-5):
    """True when every input's analytic gradient is within `rtol` of the numerical one."""
    return all(err <= rtol for err in gradient_errors(fn, inputs, eps).values())
