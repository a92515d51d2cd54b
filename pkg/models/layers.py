"""Per-kind layer execution and the builder used to assemble ModelGraphs."""

import math

import numpy as np

from engine import functional as F
from engine.tensor import Tensor
from models.attention import LongRangeAttentionSpec, init_lra_params, lra_forward
from models.graph import BatchStats, LayerSpec
from utils.errors import ConfigError, ShapeError

_ACTIVATIONS = {
    "relu": lambda x, h: F.relu(x),
    "leaky_relu": lambda x, h: F.leaky_relu(x, h.get("slope", 0.2)),
    "tanh": lambda x, h: F.tanh(x),
    "sigmoid": lambda x, h: F.sigmoid(x),
}


def _weight(model, layer):
    w = model.params[f"{layer.name}.weight"]
    if model.quant is not None:
        w = model.quant.weight(layer.name, w)
    return w


def run_layer(model, layer, sources, mode, labels, update_running):
    """Execute one layer; returns (output, BatchStats or None)."""
    h = layer.hyper
    x = sources[0]
    kind = layer.kind

    if kind == "conv":
        bias = model.params.get(f"{layer.name}.bias")
        out = F.conv2d(x, _weight(model, layer), bias, stride=h.get("stride", 1), padding=h.get("padding", 0),
                       dilation=h.get("dilation", 1), groups=h.get("groups", 1))
        return out, None

    if kind == "bn":
        batch_stats_only = h.get("batch_stats", False)
        out, mean, var = F.batch_norm(
            x,
            model.params[f"{layer.name}.gamma"],
            model.params[f"{layer.name}.beta"],
            model.buffers[f"{layer.name}.running_mean"],
            model.buffers[f"{layer.name}.running_var"],
            mode="train" if batch_stats_only else mode,
            momentum=model.bn_momentum,
            eps=model.bn_eps,
            update_running=update_running and not batch_stats_only,
        )
        std = F.sqrt(F.add_scalar(var, model.bn_eps))
        return out, BatchStats(mean=mean, var=var, std=std)

    if kind == "linear":
        return F.linear(x, _weight(model, layer), model.params.get(f"{layer.name}.bias")), None

    if kind == "activation":
        fn = _ACTIVATIONS.get(h["fn"])
        if fn is None:
            raise ConfigError(f"Unknown activation '{h['fn']}'")
        return fn(x, h), None

    if kind == "residual-add":
        main, skip = sources
        if h.get("shortcut_stride", 1) != 1 or skip.shape[1] != main.shape[1]:
            skip = F.shortcut_pad(skip, h.get("shortcut_stride", 1), main.shape[1])
        return F.add(main, skip), None

    if kind == "pool":
        return F.global_avg_pool(x), None

    if kind == "flatten":
        return F.flatten(x), None

    if kind == "embed":
        if labels is None:
            raise ShapeError(f"Layer '{layer.name}' needs conditioning labels")
        emb = F.embedding(model.params[f"{layer.name}.weight"], labels)
        if emb.dtype != x.dtype:
            raise ShapeError(f"Noise dtype {x.dtype} does not match embedding dtype {emb.dtype}")
        return F.concat([x, emb], axis=1), None

    if kind == "reshape":
        return F.reshape(x, (x.shape[0], *h["shape"])), None

    if kind == "upsample":
        return F.upsample_nearest(x, h.get("factor", 2)), None

    if kind == "lra":
        spec = LongRangeAttentionSpec(**h["spec"])
        return lra_forward(x, spec, model.params, prefix=layer.name), None

    raise ConfigError(f"Unhandled layer kind '{kind}'")


class GraphBuilder:
    """Accumulates layers and seeded parameter initialisations."""

    def __init__(self, rng, dtype=np.float32):
        self.rng = rng
        self.dtype = dtype
        self.layers = []
        self.params = {}
        self.buffers = {}
        self._bn_count = 0

    def _tensor(self, arr):
        return Tensor(np.asarray(arr, dtype=self.dtype), requires_grad=True)

    def _add(self, name, kind, inputs=(), hyper=None, bn_index=None, quant_act=False):
        self.layers.append(LayerSpec(name, kind, tuple(inputs), dict(hyper or {}), bn_index, quant_act))
        return name

    def conv(self, name, cin, cout, kernel, stride=1, padding=0, dilation=1, groups=1, bias=False, inputs=()):
        fan_in = (cin // groups) * kernel * kernel
        self.params[f"{name}.weight"] = self._tensor(
            self.rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(cout, cin // groups, kernel, kernel)))
        if bias:
            self.params[f"{name}.bias"] = self._tensor(np.zeros(cout))
        return self._add(name, "conv", inputs,
                         {"stride": stride, "padding": padding, "dilation": dilation, "groups": groups})

    def bn(self, name, channels, batch_stats=False):
        self.params[f"{name}.gamma"] = self._tensor(np.ones(channels))
        self.params[f"{name}.beta"] = self._tensor(np.zeros(channels))
        self.buffers[f"{name}.running_mean"] = np.zeros(channels, dtype=self.dtype)
        self.buffers[f"{name}.running_var"] = np.ones(channels, dtype=self.dtype)
        bn_index = None
        if not batch_stats:
            bn_index = self._bn_count
            self._bn_count += 1
        return self._add(name, "bn", hyper={"batch_stats": batch_stats}, bn_index=bn_index)

    def linear(self, name, din, dout, bias=True):
        bound = 1.0 / math.sqrt(din)
        self.params[f"{name}.weight"] = self._tensor(self.rng.uniform(-bound, bound, size=(dout, din)))
        if bias:
            self.params[f"{name}.bias"] = self._tensor(self.rng.uniform(-bound, bound, size=dout))
        return self._add(name, "linear")

    def act(self, name, fn, quant_act=False, **hyper):
        return self._add(name, "activation", hyper={"fn": fn, **hyper}, quant_act=quant_act)

    def residual(self, name, main, skip, shortcut_stride=1):
        return self._add(name, "residual-add", (main, skip), {"shortcut_stride": shortcut_stride})

    def pool(self, name):
        return self._add(name, "pool")

    def flatten(self, name):
        return self._add(name, "flatten")

    def embed(self, name, num_classes, dim):
        self.params[f"{name}.weight"] = self._tensor(self.rng.normal(0.0, 1.0, size=(num_classes, dim)))
        return self._add(name, "embed")

    def reshape(self, name, shape):
        return self._add(name, "reshape", hyper={"shape": tuple(shape)})

    def upsample(self, name, factor=2):
        return self._add(name, "upsample", hyper={"factor": factor})

    def lra(self, name, channels, spec):
        self.params.update(init_lra_params(self.rng, channels, spec, name, dtype=self.dtype))
        return self._add(name, "lra", hyper={"spec": {
            "K": spec.K, "d": spec.d, "sigmoid_gate": spec.sigmoid_gate, "bottleneck_ratio": spec.bottleneck_ratio,
        }})
