"""
Asymmetric uniform quantization.

    S = (beta - alpha) / (2^N - 1),  Z = round(alpha / S)
    codes = clamp(round(x / S - Z), 0, 2^N - 1)
    x_bar = (codes + Z) * S

Z is kept as a signed integer offset, so the grid stays anchored to [alpha, beta].
With `drop_offset=True` dequantization drops the offset (x_bar = codes * S),
which only round-trips for alpha == 0 ranges.
Rounding is half away from zero everywhere.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
import structlog

from engine.tensor import Function, Tensor, no_grad
from models.graph import clone_for_quantization
from utils.errors import ConfigError, RangeError
from utils.helpers import round_half_away

log = structlog.get_logger(__name__)

MIN_BITS, MAX_BITS = 2, 8
DEGENERATE_EPS = 1e-8


@dataclass(frozen=True)
class QuantParams:
    bit_width: int
    clip_lo: np.ndarray
    clip_hi: np.ndarray
    scale: np.ndarray
    zero_point: np.ndarray
    granularity: str = "per-tensor"
    axis: Optional[int] = None
    drop_offset: bool = False

    @property
    def qmax(self):
        return 2**self.bit_width - 1

    def _view(self, arr, ndim):
        if self.granularity == "per-tensor":
            return arr
        shape = [1] * ndim
        shape[self.axis] = -1
        return arr.reshape(shape)

    def broadcast(self, ndim):
        """(alpha, beta, S, Z) shaped to broadcast against an ndim-dimensional tensor."""
        return tuple(self._view(a, ndim) for a in (self.clip_lo, self.clip_hi, self.scale, self.zero_point))

    def to_report(self):
        def plain(a):
            return a.item() if a.ndim == 0 else a.tolist()

        return {
            "N": self.bit_width,
            "alpha": plain(self.clip_lo),
            "beta": plain(self.clip_hi),
            "S": plain(self.scale),
            "Z": plain(self.zero_point),
            "granularity": self.granularity if self.axis is None else f"{self.granularity}(axis={self.axis})",
        }


def compute_qparams(alpha, beta, bits, granularity="per-tensor", axis=None, drop_offset=False):
    """
    Quantization parameters for clip range [alpha, beta] at `bits` bits.

    Args:
        alpha, beta: Scalars for per-tensor, 1-D arrays for per-channel.
        granularity: "per-tensor" or "per-channel" (then `axis` is required).
    """
    if not isinstance(bits, (int, np.integer)) or not MIN_BITS <= bits <= MAX_BITS:
        raise ConfigError(f"bit width must be an integer in [{MIN_BITS}, {MAX_BITS}], got {bits}")
    if granularity not in ("per-tensor", "per-channel"):
        raise ConfigError(f"Unknown granularity '{granularity}'")
    if granularity == "per-channel" and axis is None:
        raise ConfigError("per-channel quantization needs an axis")
    alpha = np.asarray(alpha, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    if alpha.shape != beta.shape:
        raise ConfigError(f"alpha {alpha.shape} and beta {beta.shape} differ in shape")
    if np.any(alpha >= beta):
        raise RangeError(f"Quantization range needs alpha < beta, got alpha={alpha}, beta={beta}")
    scale = (beta - alpha) / (2**bits - 1)
    zero_point = round_half_away(alpha / scale).astype(np.int64)
    return QuantParams(int(bits), alpha, beta, scale, zero_point,
                       granularity, axis if granularity == "per-channel" else None, drop_offset)


def quantize(x, qp):
    """Integer codes in [0, 2^N - 1]; values outside the clip range saturate."""
    x = np.asarray(x.data if isinstance(x, Tensor) else x)
    _, _, scale, zp = qp.broadcast(x.ndim)
    codes = round_half_away(x / scale - zp)
    return np.clip(codes, 0, qp.qmax).astype(np.int64)


def dequantize(codes, qp):
    codes = np.asarray(codes)
    _, _, scale, zp = qp.broadcast(codes.ndim)
    if qp.drop_offset:
        return codes * scale
    return (codes + zp) * scale


class FakeQuantize(Function):
    """Quantize-dequantize forward; clipped straight-through backward."""

    def forward(self, x, qp):
        alpha, beta, _, _ = qp.broadcast(x.ndim)
        self.mask = (x >= alpha) & (x <= beta)
        return dequantize(quantize(x, qp), qp).astype(x.dtype)

    def backward(self, grad):
        return (grad * self.mask,)


def fake_quantize(x, qp):
    x = x if isinstance(x, Tensor) else Tensor(x)
    return FakeQuantize.apply(x, qp=qp)


def _expand_degenerate(lo, hi, what):
    lo = np.array(lo, dtype=np.float64)
    hi = np.array(hi, dtype=np.float64)
    flat = lo == hi
    if np.any(flat):
        log.warning("constant_range_expanded", tensor=what, eps=DEGENERATE_EPS, count=int(np.sum(flat)))
        lo = np.where(flat, lo - DEGENERATE_EPS, lo)
        hi = np.where(flat, hi + DEGENERATE_EPS, hi)
    return lo, hi


def weight_qparams(w, bits, per_channel=False, drop_offset=False, name="weight", quiet=False):
    """Min/max calibration of one weight array (per output channel when per_channel)."""
    if per_channel:
        flat = w.reshape(w.shape[0], -1)
        lo, hi = flat.min(axis=1), flat.max(axis=1)
    else:
        lo, hi = w.min(), w.max()
    if quiet:
        lo, hi = np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)
        flat = lo == hi
        lo, hi = np.where(flat, lo - DEGENERATE_EPS, lo), np.where(flat, hi + DEGENERATE_EPS, hi)
    else:
        lo, hi = _expand_degenerate(lo, hi, name)
    if per_channel:
        return compute_qparams(lo, hi, bits, "per-channel", axis=0, drop_offset=drop_offset)
    return compute_qparams(lo, hi, bits, drop_offset=drop_offset)


def calibrate_weights(model, bits, per_channel=False, drop_offset=False):
    """Per-layer weight QuantParams for every conv and linear layer of the model."""
    return {
        layer.name: weight_qparams(model.params[f"{layer.name}.weight"].data, bits, per_channel, drop_offset,
                                   name=layer.name)
        for layer in model.layers
        if layer.kind in ("conv", "linear")
    }


class RangeTracker:
    """EMA of per-batch min/max for one activation tensor; frozen after warm-up."""

    def __init__(self, momentum=0.9):
        if not 0 < momentum < 1:
            raise ConfigError(f"EMA momentum must be in (0, 1), got {momentum}")
        self.momentum = momentum
        self.lo = None
        self.hi = None
        self.batches = 0
        self.frozen = False

    def observe(self, arr):
        if self.frozen:
            return
        bmin, bmax = float(np.min(arr)), float(np.max(arr))
        if self.lo is None:
            self.lo, self.hi = bmin, bmax
        else:
            m = self.momentum
            self.lo = m * self.lo + (1.0 - m) * bmin
            self.hi = m * self.hi + (1.0 - m) * bmax
        self.batches += 1

    def freeze(self):
        self.frozen = True

    def qparams(self, bits, drop_offset=False):
        lo, hi = self.lo, self.hi
        if lo == hi:
            lo, hi = lo - DEGENERATE_EPS, hi + DEGENERATE_EPS
        return compute_qparams(lo, hi, bits, drop_offset=drop_offset)

    def state(self):
        return {"lo": self.lo, "hi": self.hi, "batches": self.batches, "frozen": self.frozen, "momentum": self.momentum}

    @classmethod
    def from_state(cls, state):
        t = cls(state["momentum"])
        t.lo, t.hi, t.batches, t.frozen = state["lo"], state["hi"], state["batches"], state["frozen"]
        return t


class ModelQuantizer:
    """
    Quantization scheme attached to a ModelGraph as `model.quant`.

    Weights of conv/linear layers are fake-quantized on every forward from their
    current min/max. Activation outputs of layers flagged `quant_act` are
    fake-quantized with a RangeTracker range; while `observing` is set the trackers
    update first. Before a tracker has seen any batch its activation passes through.
    """

    def __init__(self, weight_bits, act_bits, act_layers, per_channel=False, drop_offset=False, momentum=0.9):
        for bits in (weight_bits, act_bits):
            if not MIN_BITS <= bits <= MAX_BITS:
                raise ConfigError(f"bit width must be in [{MIN_BITS}, {MAX_BITS}], got {bits}")
        self.weight_bits = weight_bits
        self.act_bits = act_bits
        self.per_channel = per_channel
        self.drop_offset = drop_offset
        self.trackers = {name: RangeTracker(momentum) for name in act_layers}
        self.observing = False
        self._act_qparams = {}

    def weight(self, name, w):
        qp = weight_qparams(w.data, self.weight_bits, self.per_channel, self.drop_offset, name=name, quiet=True)
        return fake_quantize(w, qp)

    def activation(self, name, x):
        tracker = self.trackers[name]
        if self.observing and not tracker.frozen:
            tracker.observe(x.data)
            self._act_qparams.pop(name, None)
        if tracker.lo is None:
            return x
        qp = self._act_qparams.get(name)
        if qp is None:
            qp = tracker.qparams(self.act_bits, self.drop_offset)
            if tracker.frozen:
                self._act_qparams[name] = qp
        return fake_quantize(x, qp)

    @property
    def frozen(self):
        return all(t.frozen for t in self.trackers.values())

    def freeze(self):
        for t in self.trackers.values():
            t.freeze()
        self.observing = False
        self._act_qparams.clear()

    def clone(self):
        other = ModelQuantizer(self.weight_bits, self.act_bits, [], self.per_channel, self.drop_offset)
        other.trackers = {k: RangeTracker.from_state(t.state()) for k, t in self.trackers.items()}
        return other

    def state(self):
        return {
            "weight_bits": self.weight_bits,
            "act_bits": self.act_bits,
            "per_channel": self.per_channel,
            "drop_offset": self.drop_offset,
            "trackers": {k: t.state() for k, t in self.trackers.items()},
        }

    @classmethod
    def from_state(cls, state):
        q = cls(state["weight_bits"], state["act_bits"], [], state["per_channel"], state["drop_offset"])
        q.trackers = {k: RangeTracker.from_state(v) for k, v in state["trackers"].items()}
        return q

    def report(self, model):
        """Layer -> {N, alpha, beta, S, Z, granularity} for weights and calibrated activations."""
        out = {}
        for name, qp in calibrate_weights(model, self.weight_bits, self.per_channel, self.drop_offset).items():
            out[f"{name}.weight"] = qp.to_report()
        for name, tracker in self.trackers.items():
            if tracker.lo is not None:
                out[f"{name}.activation"] = tracker.qparams(self.act_bits, self.drop_offset).to_report()
        return out


def wrap_model(model, weight_bits, act_bits, per_channel=False, drop_offset=False, momentum=0.9):
    """Quantized copy M_Q of a pretrained model at W{weight_bits}A{act_bits}; the original is untouched."""
    q_model = clone_for_quantization(model)
    act_layers = [layer.name for layer in q_model.layers if layer.quant_act]
    q_model.quant = ModelQuantizer(weight_bits, act_bits, act_layers, per_channel, drop_offset, momentum)
    q_model.meta["quant"] = {"weight_bits": weight_bits, "act_bits": act_bits}
    log.info("model_wrapped", wbits=weight_bits, abits=act_bits, act_layers=len(act_layers),
             weight_layers=sum(1 for l in q_model.layers if l.kind in ("conv", "linear")))
    return q_model


def unwrap_model(model):
    """Full-precision copy of a wrapped model (same weights, no quantizers)."""
    fp = model.clone()
    fp.quant = None
    fp.meta.pop("quant", None)
    return fp


def warm_up_ranges(model, batches):
    """Observe activation ranges on an iterable of input batches (forward only), then freeze them."""
    count = 0
    model.quant.observing = True
    with no_grad():
        for images in batches:
            model(images, mode="eval")
            count += 1
    model.quant.freeze()
    log.info("activation_ranges_frozen", batches=count)
    return count
