import json

import numpy as np
import pytest

from components.data_loader import make_toy_blobs
from engine.tensor import Tensor
from models.generator import GeneratorSpec, build_generator
from models.resnet import build_resnet_tiny
from utils.config import load_config

TINY_CONFIG = {
    "seed": 0,
    "model": {"arch": "resnet8", "num_classes": 3, "image_size": 8, "width_mult": 0.5},
    "data": {"kind": "toy-blobs", "per_class": 8, "test_per_class": 4},
    "pretrain": {"epochs": 1, "batch_size": 12},
    "generation": {"total_steps": 3, "batch_size": 6, "lr": 0.01, "decay_every": 2},
    "finetune": {"epochs": 2, "decay_every_epochs": 1, "steps_per_epoch": 2, "batch_size": 6,
                 "act_warmup_batches": 2, "lr": 0.001},
    "generator": {"noise_dim": 8, "base_channels": 8},
}


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def tiny_config_payload():
    return json.loads(json.dumps(TINY_CONFIG))


@pytest.fixture
def tiny_config_file(tmp_path, tiny_config_payload):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(tiny_config_payload))
    return path


@pytest.fixture
def tiny_cfg(tiny_config_file):
    return load_config(tiny_config_file)


@pytest.fixture
def tiny_classifier():
    """ResNet-8 on 8x8 inputs with 8/16/32 channels."""
    return build_resnet_tiny("resnet8", num_classes=3, width_mult=0.5, image_size=8, seed=0)


@pytest.fixture
def pretrained_classifier(tiny_classifier, rng):
    """Tiny classifier with a few train-mode forwards behind it and a frozen BN store."""
    from models.graph import pretrain_snapshot

    for _ in range(3):
        tiny_classifier(Tensor(rng.normal(size=(6, 3, 8, 8)).astype(np.float32)), mode="train")
    pretrain_snapshot(tiny_classifier)
    return tiny_classifier


@pytest.fixture
def tiny_generator():
    spec = GeneratorSpec(noise_dim=8, num_classes=3, base_channels=8, image_size=8)
    return build_generator(spec, seed=0)


@pytest.fixture
def toy_dataset():
    return make_toy_blobs(num_classes=3, per_class=10, image_size=8, seed=0)
