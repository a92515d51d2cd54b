"""
Conditional long-range generator.

Noise concatenated with a label embedding goes through a linear seed layer, is
reshaped to a small feature map, and grows to the image size through
upsample-conv-BN-LeakyReLU blocks. A long-range attention block follows each block
listed in `lra_positions`. A final 3x3 conv and tanh produce images in [-1, 1].
"""

from dataclasses import asdict, dataclass, field

import numpy as np

from engine.tensor import Tensor
from models.attention import LongRangeAttentionSpec
from models.graph import ModelGraph
from models.layers import GraphBuilder
from utils.errors import ConfigError
from utils.helpers import rng_stream


@dataclass(frozen=True)
class GeneratorSpec:
    noise_dim: int = 100
    num_classes: int = 10
    base_channels: int = 128
    image_size: int = 32
    image_channels: int = 3
    num_blocks: int = 2
    lra_positions: tuple = (0, 1)
    lra: LongRangeAttentionSpec = field(default_factory=LongRangeAttentionSpec)
    leaky_slope: float = 0.2

    @property
    def init_size(self):
        return self.image_size // 2**self.num_blocks

    def block_channels(self, i):
        return max(1, self.base_channels // 2**i)

    def validate(self):
        if self.noise_dim < 1 or self.num_classes < 2 or self.base_channels < 1:
            raise ConfigError("Generator needs noise_dim >= 1, num_classes >= 2 and base_channels >= 1")
        if self.init_size < 1 or self.init_size * 2**self.num_blocks != self.image_size:
            raise ConfigError(f"image_size {self.image_size} is not reachable with {self.num_blocks} x2 upsampling blocks")
        bad = [p for p in self.lra_positions if not 0 <= p < self.num_blocks]
        if bad:
            raise ConfigError(f"lra_positions {bad} outside 0..{self.num_blocks - 1}")
        return self

    def to_dict(self):
        d = asdict(self)
        d["lra_positions"] = list(self.lra_positions)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["lra"] = LongRangeAttentionSpec(**d["lra"])
        d["lra_positions"] = tuple(d["lra_positions"])
        return cls(**d)


def generator_spec_from_config(cfg):
    """GeneratorSpec for a TrainConfig; the LRG ablation flag clears the attention placement."""
    g = cfg.generator
    return GeneratorSpec(
        noise_dim=g.noise_dim,
        num_classes=cfg.model.num_classes,
        base_channels=g.base_channels,
        image_size=cfg.model.image_size,
        lra_positions=tuple(g.lra_positions) if cfg.ablation.lrg_on else (),
        lra=LongRangeAttentionSpec(K=cfg.hyper.K, d=cfg.hyper.d, sigmoid_gate=g.sigmoid_gate,
                                   bottleneck_ratio=g.bottleneck_ratio),
    )


def build_generator(spec, seed=0, dtype=np.float32):
    """Seeded conditional generator; an empty `lra_positions` gives the plain baseline."""
    spec.validate()
    b = GraphBuilder(rng_stream(seed, "generator-init", 0), dtype=dtype)
    c0 = spec.base_channels
    s0 = spec.init_size

    b.embed("embed", spec.num_classes, spec.noise_dim)
    b.linear("seed", 2 * spec.noise_dim, c0 * s0 * s0)
    b.reshape("seed.reshape", (c0, s0, s0))
    b.bn("seed.bn", c0, batch_stats=True)

    cin = c0
    for i in range(spec.num_blocks):
        cout = spec.block_channels(i)
        b.upsample(f"block{i}.up", 2)
        b.conv(f"block{i}.conv", cin, cout, 3, padding=1, bias=True)
        b.bn(f"block{i}.bn", cout, batch_stats=True)
        b.act(f"block{i}.act", "leaky_relu", slope=spec.leaky_slope)
        if i in spec.lra_positions:
            b.lra(f"block{i}.lra", cout, spec.lra)
        cin = cout

    b.conv("out.conv", cin, spec.image_channels, 3, padding=1, bias=True)
    b.act("out.tanh", "tanh")

    meta = {"family": "generator", "spec": spec.to_dict(), "seed": seed, "num_classes": spec.num_classes}
    return ModelGraph(b.layers, b.params, b.buffers, meta, feature_tap=None, input_shape=(spec.noise_dim,))


def draw_labels(num_classes, batch, label_policy, rng):
    if label_policy == "balanced":
        if batch < num_classes:
            raise ConfigError(f"balanced labels need batch >= num_classes ({batch} < {num_classes})")
        labels = np.concatenate([
            np.tile(np.arange(num_classes), batch // num_classes),
            rng.choice(num_classes, size=batch % num_classes, replace=False),
        ])
        return rng.permutation(labels).astype(np.int64)
    if label_policy == "uniform":
        return rng.integers(0, num_classes, size=batch).astype(np.int64)
    raise ConfigError(f"Unknown label policy '{label_policy}'")


def generate_batch(gen, batch, label_policy, rng):
    """
    Sample noise and labels and run the generator.

    Returns:
        (images, labels): images N x 3 x H x W in [-1, 1]; labels are the conditioning classes.
    """
    spec = GeneratorSpec.from_dict(gen.meta["spec"])
    labels = draw_labels(spec.num_classes, batch, label_policy, rng)
    dtype = gen.params["seed.weight"].dtype
    noise = Tensor(rng.standard_normal((batch, spec.noise_dim)).astype(dtype))
    images, _ = gen(noise, labels=labels, mode="train")
    return images, labels
