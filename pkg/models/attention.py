"""
Long-range attention block.

A K x K receptive field is approximated by three cheap convolutions: a
(2d-1) x (2d-1) depthwise conv, a ceil(K/d) x ceil(K/d) depthwise conv with
dilation d, and a 1 x 1 channel conv. The result gates the block input elementwise.
"""

import math
from dataclasses import dataclass

import numpy as np

from engine import functional as F
from engine.tensor import Tensor
from utils.errors import ConfigError, ShapeError


@dataclass(frozen=True)
class LongRangeAttentionSpec:
    K: int = 21
    d: int = 3
    sigmoid_gate: bool = False
    bottleneck_ratio: float = 1.0

    def __post_init__(self):
        if self.K < 1 or self.d < 1:
            raise ConfigError(f"Long-range attention needs K >= 1 and d >= 1, got K={self.K}, d={self.d}")
        if not 0 < self.bottleneck_ratio <= 1:
            raise ConfigError(f"bottleneck_ratio must be in (0, 1], got {self.bottleneck_ratio}")

    @property
    def local_kernel(self):
        return 2 * self.d - 1

    @property
    def long_kernel(self):
        return math.ceil(self.K / self.d)

    @property
    def receptive_field(self):
        return self.local_kernel + (self.long_kernel - 1) * self.d

    def local_padding(self):
        return self.d - 1

    def long_padding(self):
        # odd totals (even kernels) get the extra row/column on the bottom/right
        total = self.d * (self.long_kernel - 1)
        lo, hi = total // 2, total - total // 2
        return (lo, hi, lo, hi)

    def bottleneck_channels(self, channels):
        return max(1, int(round(channels * self.bottleneck_ratio)))


def lra_param_count(channels, spec):
    """Weights plus biases of the decomposed block."""
    count = channels * (spec.local_kernel**2 + 1) + channels * (spec.long_kernel**2 + 1)
    mid = spec.bottleneck_channels(channels)
    count += mid * channels + mid
    if mid != channels:
        count += channels * mid + channels
    return count


def dense_conv_param_count(channels, kernel):
    return channels * channels * kernel * kernel + channels


def init_lra_params(rng, channels, spec, prefix, dtype=np.float32):
    """He-normal depthwise/pointwise weights and zero biases, keyed `<prefix>.<part>.<weight|bias>`."""

    def he(shape, fan_in):
        return Tensor(rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape).astype(dtype), requires_grad=True)

    def zeros(n):
        return Tensor(np.zeros(n, dtype=dtype), requires_grad=True)

    l, k = spec.local_kernel, spec.long_kernel
    mid = spec.bottleneck_channels(channels)
    params = {
        f"{prefix}.local.weight": he((channels, 1, l, l), l * l),
        f"{prefix}.local.bias": zeros(channels),
        f"{prefix}.long.weight": he((channels, 1, k, k), k * k),
        f"{prefix}.long.bias": zeros(channels),
        f"{prefix}.channel.weight": he((mid, channels, 1, 1), channels),
        f"{prefix}.channel.bias": zeros(mid),
    }
    if mid != channels:
        params[f"{prefix}.expand.weight"] = he((channels, mid, 1, 1), mid)
        params[f"{prefix}.expand.bias"] = zeros(channels)
    return params


def attention_map(V, spec, params, prefix="lra"):
    """LA = channel_conv(long_range_conv(local_conv(V)))."""
    c = V.shape[1]
    if params[f"{prefix}.local.weight"].shape[0] != c:
        raise ShapeError(f"Attention parameters expect {params[f'{prefix}.local.weight'].shape[0]} channels, got {c}")
    a = F.conv2d(V, params[f"{prefix}.local.weight"], params[f"{prefix}.local.bias"],
                 padding=spec.local_padding(), groups=c)
    a = F.conv2d(a, params[f"{prefix}.long.weight"], params[f"{prefix}.long.bias"],
                 padding=spec.long_padding(), dilation=spec.d, groups=c)
    a = F.conv2d(a, params[f"{prefix}.channel.weight"], params[f"{prefix}.channel.bias"])
    if f"{prefix}.expand.weight" in params:
        a = F.conv2d(a, params[f"{prefix}.expand.weight"], params[f"{prefix}.expand.bias"])
    if spec.sigmoid_gate:
        a = F.sigmoid(a)
    return a


def lra_forward(V, spec, params, prefix="lra"):
    """Gate V by its long-range attention map: V~ = LA * V, same shape as V."""
    return F.elementwise_mul(attention_map(V, spec, params, prefix), V)
