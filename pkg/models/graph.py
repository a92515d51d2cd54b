"""
Layer-list model representation shared by the classifier and the generator.

A `ModelGraph` is an ordered list of `LayerSpec`s. Each layer reads the output of the
previous layer unless it names its inputs explicitly (residual skips). Parameters are
named leaf tensors, BN running buffers are plain arrays, and the frozen pretraining
statistics live in a read-only `BNStore`.
"""

import copy
from collections.abc import Mapping
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import structlog

from engine.tensor import Tensor
from utils.errors import EmptyStatsError, FrozenStoreError, ShapeError

log = structlog.get_logger(__name__)

LAYER_KINDS = (
    "conv", "bn", "linear", "activation", "residual-add", "pool", "flatten",
    "embed", "reshape", "upsample", "lra",
)


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    inputs: tuple = ()
    hyper: dict = field(default_factory=dict)
    bn_index: Optional[int] = None
    quant_act: bool = False

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ShapeError(f"Unknown layer kind '{self.kind}' for layer '{self.name}'")


@dataclass
class BatchStats:
    """Statistics of one BN layer's input on the current batch (differentiable)."""

    mean: Tensor
    var: Tensor
    std: Tensor


@dataclass
class ForwardCapture:
    bn_batch_stats: list
    features: Tensor
    logits: Tensor


class BNStore(Mapping):
    """
    Read-only per-BN (mean, var) snapshot keyed by BN index.

    Arrays are copied and marked non-writeable; item assignment raises.
    """

    def __init__(self, entries, eps):
        self._entries = {}
        for k, (mean, var) in sorted(entries.items()):
            mean = np.array(mean, copy=True)
            var = np.array(var, copy=True)
            mean.flags.writeable = False
            var.flags.writeable = False
            self._entries[int(k)] = (mean, var)
        self.eps = eps

    def __getitem__(self, k):
        return self._entries[k]

    def __iter__(self):
        return iter(self._entries)

    def __len__(self):
        return len(self._entries)

    def __setitem__(self, k, value):
        raise FrozenStoreError("BN statistics are frozen after the pretraining snapshot")

    def __delitem__(self, k):
        raise FrozenStoreError("BN statistics are frozen after the pretraining snapshot")

    def mean(self, k):
        return self._entries[k][0]

    def std(self, k):
        return np.sqrt(self._entries[k][1] + self.eps)

    def equals(self, other):
        return (
            other is not None
            and list(self) == list(other)
            and all(np.array_equal(self[k][0], other[k][0]) and np.array_equal(self[k][1], other[k][1]) for k in self)
        )


class ModelGraph:
    """Ordered layers plus named parameters, BN buffers and the frozen BN store."""

    def __init__(self, layers, params, buffers, meta, feature_tap, input_shape, bn_eps=1e-5, bn_momentum=0.1):
        self.layers = list(layers)
        self.params = dict(params)
        self.buffers = dict(buffers)
        self.meta = dict(meta)
        self.feature_tap = feature_tap
        self.input_shape = tuple(input_shape)
        self.bn_eps = bn_eps
        self.bn_momentum = bn_momentum
        self.bn_store = None
        self.quant = None
        self.stats_updates = 0
        self._check_layers()

    def _check_layers(self):
        names = set()
        bn_indices = []
        for layer in self.layers:
            if layer.name in names or layer.name == "input":
                raise ShapeError(f"Duplicate layer name '{layer.name}'")
            for src in layer.inputs:
                if src != "input" and src not in names:
                    raise ShapeError(f"Layer '{layer.name}' reads '{src}' before it is defined")
            names.add(layer.name)
            if layer.kind == "bn" and not layer.hyper.get("batch_stats"):
                bn_indices.append(layer.bn_index)
        if len(set(bn_indices)) != len(bn_indices) or None in bn_indices:
            raise ShapeError("Every classifier BN layer needs a unique bn_index")
        if self.feature_tap is not None and self.feature_tap not in names:
            raise ShapeError(f"Feature tap '{self.feature_tap}' is not a layer")

    # Introspection

    def bn_layers(self):
        """Classifier BN layers (those with stored statistics), ordered by index."""
        layers = [l for l in self.layers if l.kind == "bn" and l.bn_index is not None]
        return sorted(layers, key=lambda l: l.bn_index)

    def parameters(self):
        return [self.params[k] for k in sorted(self.params)]

    def num_parameters(self):
        return int(sum(p.size for p in self.params.values()))

    def named_arrays(self):
        arrays = {f"param.{k}": v.data for k, v in self.params.items()}
        arrays.update({f"buffer.{k}": v for k, v in self.buffers.items()})
        if self.bn_store is not None:
            for k, (mean, var) in self.bn_store.items():
                arrays[f"bn_store.{k}.mean"] = mean
                arrays[f"bn_store.{k}.var"] = var
        return arrays

    @property
    def num_classes(self):
        return self.meta.get("num_classes")

    @property
    def feature_dim(self):
        return self.meta.get("feature_dim")

    # Training state

    def freeze(self):
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None
        return self

    def unfreeze(self):
        for p in self.params.values():
            p.requires_grad = True
        return self

    @property
    def frozen(self):
        return not any(p.requires_grad for p in self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def to_dtype(self, dtype):
        for name, p in self.params.items():
            self.params[name] = Tensor(p.data.astype(dtype), requires_grad=p.requires_grad)
        for name, b in self.buffers.items():
            self.buffers[name] = b.astype(dtype)
        return self

    def clone(self):
        other = copy.copy(self)
        other.layers = list(self.layers)
        other.params = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.params.items()}
        other.buffers = {k: v.copy() for k, v in self.buffers.items()}
        other.meta = copy.deepcopy(self.meta)
        other.bn_store = None if self.bn_store is None else BNStore(dict(self.bn_store.items()), self.bn_store.eps)
        other.quant = None if self.quant is None else self.quant.clone()
        return other

    def __call__(self, x, labels=None, mode="eval", capture=False):
        return forward(self, x, mode=mode, capture=capture, labels=labels)


def _check_input(model, x):
    if x.ndim != len(model.input_shape) + 1 or tuple(x.shape[1:]) != model.input_shape:
        raise ShapeError(f"Model expects input (N, {', '.join(map(str, model.input_shape))}), got {x.shape}")


def forward(model, batch, mode="eval", capture=False, labels=None):
    """
    Run the model.

    Args:
        model: The ModelGraph.
        batch: Input tensor (images for classifiers, noise for generators).
        mode: "train" normalizes BN by batch statistics, "eval" by running buffers.
        capture: Also return a ForwardCapture with per-BN batch statistics, the
            feature tap output and the logits. Capture never touches running buffers.
        labels: Integer labels, needed by generators for conditioning.

    Returns:
        (logits, capture or None)
    """
    from models.layers import run_layer

    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    _check_input(model, x)
    update_running = mode == "train" and not capture and not model.frozen

    outputs = {"input": x}
    prev = "input"
    bn_stats = {}
    for layer in model.layers:
        sources = [outputs[name] for name in (layer.inputs or (prev,))]
        out, stats = run_layer(model, layer, sources, mode=mode, labels=labels, update_running=update_running)
        if stats is not None and layer.bn_index is not None:
            bn_stats[layer.bn_index] = stats
        if layer.quant_act and model.quant is not None:
            out = model.quant.activation(layer.name, out)
        outputs[layer.name] = out
        prev = layer.name

    if update_running and bn_stats:
        model.stats_updates += 1

    logits = outputs[prev]
    if not capture:
        return logits, None
    features = outputs[model.feature_tap] if model.feature_tap else logits
    return logits, ForwardCapture(
        bn_batch_stats=[bn_stats[k] for k in sorted(bn_stats)],
        features=features,
        logits=logits,
    )


def pretrain_snapshot(model):
    """Freeze the current running BN statistics into the model's immutable store."""
    if model.stats_updates == 0:
        raise EmptyStatsError("No training forward has updated the BN running statistics yet")
    entries = {
        layer.bn_index: (model.buffers[f"{layer.name}.running_mean"], model.buffers[f"{layer.name}.running_var"])
        for layer in model.bn_layers()
    }
    model.bn_store = BNStore(entries, model.bn_eps)
    log.info("bn_store_frozen", layers=len(entries))
    return model.bn_store


def clone_for_quantization(model):
    """Deep copy with independent parameters and a copied BN store, ready for wrapping."""
    other = model.clone()
    other.quant = None
    other.unfreeze()
    return other
