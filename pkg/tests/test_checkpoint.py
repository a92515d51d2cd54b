import numpy as np
import pytest

from components.quantizer import warm_up_ranges, wrap_model
from engine.tensor import Tensor
from services.checkpoint_store import MAGIC, load_checkpoint, read_header, save_checkpoint
from services.run_store import require_checkpoint
from utils.errors import DataError, MissingCheckpointError


def assert_same_arrays(a, b):
    left, right = a.named_arrays(), b.named_arrays()
    assert sorted(left) == sorted(right)
    for name in left:
        assert left[name].dtype == right[name].dtype, name
        np.testing.assert_array_equal(left[name], right[name], err_msg=name)


class TestClassifierCheckpoint:

    def test_round_trip_is_bit_exact(self, pretrained_classifier, tmp_path):
        path = save_checkpoint(pretrained_classifier, tmp_path / "fp.ckpt")
        restored = load_checkpoint(path, expected_family="resnet")
        assert_same_arrays(pretrained_classifier, restored)
        assert restored.meta == pretrained_classifier.meta
        assert restored.stats_updates == pretrained_classifier.stats_updates
        assert restored.bn_store.equals(pretrained_classifier.bn_store)

    def test_restored_model_gives_identical_logits(self, pretrained_classifier, tmp_path, rng):
        restored = load_checkpoint(save_checkpoint(pretrained_classifier, tmp_path / "fp.ckpt"))
        x = Tensor(rng.normal(size=(3, 3, 8, 8)).astype(np.float32))
        np.testing.assert_array_equal(restored(x, mode="eval")[0].data,
                                      pretrained_classifier(x, mode="eval")[0].data)

    def test_header_lists_every_tensor(self, pretrained_classifier, tmp_path):
        header, payload = read_header(save_checkpoint(pretrained_classifier, tmp_path / "fp.ckpt"))
        names = {entry["name"] for entry in header["tensors"]}
        assert names == set(pretrained_classifier.named_arrays())
        assert sum(entry["nbytes"] for entry in header["tensors"]) == len(payload)
        assert header["quant"] is None


class TestQuantizedCheckpoint:

    def test_quantizer_state_survives(self, pretrained_classifier, tmp_path, rng):
        q_model = wrap_model(pretrained_classifier, 4, 4)
        warm_up_ranges(q_model, [Tensor(rng.normal(size=(4, 3, 8, 8)).astype(np.float32))])
        restored = load_checkpoint(save_checkpoint(q_model, tmp_path / "q.ckpt"), expected_family="resnet")
        assert restored.quant.state() == q_model.quant.state()
        assert restored.meta["quant"] == {"weight_bits": 4, "act_bits": 4}
        x = Tensor(rng.normal(size=(2, 3, 8, 8)).astype(np.float32))
        np.testing.assert_array_equal(restored(x, mode="eval")[0].data, q_model(x, mode="eval")[0].data)


class TestGeneratorCheckpoint:

    def test_round_trip(self, tiny_generator, tmp_path):
        restored = load_checkpoint(save_checkpoint(tiny_generator, tmp_path / "g.ckpt"), expected_family="generator")
        assert_same_arrays(tiny_generator, restored)
        assert restored.meta["spec"] == tiny_generator.meta["spec"]

    def test_same_noise_same_images(self, tiny_generator, tmp_path):
        restored = load_checkpoint(save_checkpoint(tiny_generator, tmp_path / "g.ckpt"))
        noise = Tensor(np.random.default_rng(0).normal(size=(3, 8)).astype(np.float32))
        labels = np.array([0, 1, 2])
        np.testing.assert_array_equal(restored(noise, labels=labels, mode="train")[0].data,
                                      tiny_generator(noise, labels=labels, mode="train")[0].data)


class TestCorruptCheckpoints:

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOTACKPT" + bytes(32))
        with pytest.raises(DataError, match="bad magic"):
            load_checkpoint(path)

    def test_truncated_header(self, tmp_path):
        path = tmp_path / "short.ckpt"
        path.write_bytes(MAGIC + (1000).to_bytes(8, "little") + b"{}")
        with pytest.raises(DataError, match="truncated"):
            load_checkpoint(path)

    def test_truncated_payload(self, pretrained_classifier, tmp_path):
        path = save_checkpoint(pretrained_classifier, tmp_path / "fp.ckpt")
        path.write_bytes(path.read_bytes()[:-16])
        with pytest.raises(DataError, match="truncated"):
            load_checkpoint(path)

    def test_family_mismatch(self, tiny_generator, tmp_path):
        path = save_checkpoint(tiny_generator, tmp_path / "g.ckpt")
        with pytest.raises(DataError):
            load_checkpoint(path, expected_family="resnet")

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            load_checkpoint(tmp_path / "absent.ckpt")

    def test_require_checkpoint_names_producer(self, tmp_path):
        with pytest.raises(MissingCheckpointError, match="pretrain"):
            require_checkpoint(tmp_path / "fp.ckpt", "pretrain")
