"""CIFAR-style residual classifiers (ResNet-8 and ResNet-20)."""

import numpy as np

from models.graph import ModelGraph
from models.layers import GraphBuilder
from utils.errors import ConfigError
from utils.helpers import rng_stream

BLOCKS_PER_STAGE = {"resnet8": 1, "resnet20": 3}
STAGE_WIDTHS = (16, 32, 64)


def _basic_block(b, name, cin, cout, stride, prev):
    # Activation quantizers sit on the relu outputs only: those are the tensors
    # every conv reads. bn2 enters the residual add unquantized and the sum is
    # quantized once, after relu2.
    b.conv(f"{name}.conv1", cin, cout, 3, stride=stride, padding=1, inputs=(prev,))
    b.bn(f"{name}.bn1", cout)
    b.act(f"{name}.relu1", "relu", quant_act=True)
    b.conv(f"{name}.conv2", cout, cout, 3, padding=1)
    b.bn(f"{name}.bn2", cout)
    b.residual(f"{name}.add", f"{name}.bn2", prev, shortcut_stride=stride)
    return b.act(f"{name}.relu2", "relu", quant_act=True)


def build_resnet_tiny(depth_class="resnet20", num_classes=10, width_mult=1.0, image_size=32, seed=0, dtype=np.float32):
    """
    Build a CIFAR ResNet: 3x3 stem, three stages of basic blocks (16/32/64 channels
    scaled by width_mult), global average pool and a linear head.

    Shortcuts that change shape are parameter-free (strided subsample plus zero
    channel padding), which gives the usual 0.27M parameters for ResNet-20.
    The feature tap is the pooled vector feeding the head.
    """
    if depth_class not in BLOCKS_PER_STAGE:
        raise ConfigError(f"Unknown architecture '{depth_class}', expected one of {sorted(BLOCKS_PER_STAGE)}")
    if num_classes < 2:
        raise ConfigError(f"num_classes must be >= 2, got {num_classes}")
    widths = [max(1, int(round(w * width_mult))) for w in STAGE_WIDTHS]

    b = GraphBuilder(rng_stream(seed, "init", 0), dtype=dtype)
    b.conv("stem.conv", 3, widths[0], 3, padding=1)
    b.bn("stem.bn", widths[0])
    prev = b.act("stem.relu", "relu", quant_act=True)

    cin = widths[0]
    for stage, cout in enumerate(widths):
        for block in range(BLOCKS_PER_STAGE[depth_class]):
            stride = 2 if stage > 0 and block == 0 else 1
            prev = _basic_block(b, f"stage{stage + 1}.block{block + 1}", cin, cout, stride, prev)
            cin = cout

    b.pool("pool")
    b.linear("fc", cin, num_classes)

    meta = {
        "family": "resnet",
        "depth_class": depth_class,
        "num_classes": num_classes,
        "width_mult": width_mult,
        "image_size": image_size,
        "seed": seed,
        "feature_dim": cin,
    }
    return ModelGraph(b.layers, b.params, b.buffers, meta, feature_tap="pool", input_shape=(3, image_size, image_size))
