import numpy as np
import pytest

from components.quantizer import (
    ModelQuantizer,
    RangeTracker,
    calibrate_weights,
    compute_qparams,
    dequantize,
    fake_quantize,
    quantize,
    unwrap_model,
    warm_up_ranges,
    weight_qparams,
    wrap_model,
)
from engine import functional as F
from engine.tensor import Tensor
from utils.errors import ConfigError, RangeError
from utils.helpers import params_digest


class TestComputeQparams:

    def test_unit_scale(self):
        qp = compute_qparams(0.0, 15.0, 4)
        assert float(qp.scale) == pytest.approx(1.0)
        assert int(qp.zero_point) == 0
        assert qp.qmax == 15

    def test_symmetric_range_zero_point(self):
        qp = compute_qparams(-1.0, 1.0, 4)
        assert float(qp.scale) == pytest.approx(2.0 / 15.0)
        assert int(qp.zero_point) == -8

    def test_empty_range_raises(self):
        with pytest.raises(RangeError):
            compute_qparams(0.3, 0.3, 4)
        with pytest.raises(RangeError):
            compute_qparams(1.0, -1.0, 4)

    @pytest.mark.parametrize("bits", [1, 9, 4.0])
    def test_bits_out_of_bounds_raise(self, bits):
        with pytest.raises(ConfigError):
            compute_qparams(0.0, 1.0, bits)

    def test_per_channel_needs_axis(self):
        with pytest.raises(ConfigError):
            compute_qparams(np.zeros(2), np.ones(2), 4, granularity="per-channel")

    def test_report_fields(self):
        report = compute_qparams(-1.0, 1.0, 4).to_report()
        assert set(report) == {"N", "alpha", "beta", "S", "Z", "granularity"}
        assert report["Z"] == -8


class TestQuantizeDequantize:

    def test_rounds_to_nearest_code(self):
        assert quantize(np.array([7.3]), compute_qparams(0.0, 15.0, 4))[0] == 7

    def test_alpha_maps_to_code_zero_and_back(self):
        qp = compute_qparams(-4.0, 3.5, 4)
        assert float(qp.scale) == 0.5 and int(qp.zero_point) == -8
        assert quantize(np.array([-4.0]), qp)[0] == 0
        assert dequantize(np.array([0]), qp)[0] == -4.0

    def test_saturates_outside_range(self):
        qp = compute_qparams(0.0, 15.0, 4)
        np.testing.assert_array_equal(quantize(np.array([-3.0, 40.0]), qp), [0, 15])

    def test_strict_dequant_drops_offset(self):
        qp = compute_qparams(-1.0, 1.0, 4, drop_offset=True)
        codes = quantize(np.array([-1.0, 1.0]), qp)
        np.testing.assert_allclose(dequantize(codes, qp), codes * qp.scale)

    def test_strict_dequant_round_trips_from_zero(self):
        qp = compute_qparams(0.0, 15.0, 4, drop_offset=True)
        np.testing.assert_allclose(dequantize(quantize(np.array([3.0, 9.0]), qp), qp), [3.0, 9.0])


class TestFakeQuantize:

    @pytest.mark.parametrize("bits", [3, 4, 5, 8])
    def test_dense_grid_error_codes_and_monotonicity(self, bits):
        rng = np.random.default_rng(bits)
        for _ in range(5):
            alpha = rng.uniform(-3.0, 0.5)
            beta = alpha + rng.uniform(0.1, 5.0)
            qp = compute_qparams(alpha, beta, bits)
            x = np.linspace(alpha, beta, 100_000)
            codes = quantize(x, qp)
            assert codes.min() >= 0 and codes.max() <= 2**bits - 1
            x_bar = fake_quantize(Tensor(x), qp).data
            assert np.max(np.abs(x_bar - x)) <= float(qp.scale) / 2 + 1e-6
            assert np.all(np.diff(x_bar) >= 0)

    def test_idempotent(self, rng):
        qp = compute_qparams(-1.3, 2.1, 4)
        once = fake_quantize(Tensor(rng.uniform(-2, 3, size=50)), qp)
        twice = fake_quantize(once, qp)
        np.testing.assert_allclose(twice.data, once.data, atol=1e-12)

    def test_tight_range_at_eight_bits(self, rng):
        x = rng.uniform(-0.1, 0.1, size=200)
        qp = compute_qparams(x.min(), x.max(), 8)
        np.testing.assert_allclose(fake_quantize(Tensor(x), qp).data, x, atol=float(qp.scale) / 2 + 1e-12)

    def test_straight_through_gradient(self):
        qp = compute_qparams(-1.0, 1.0, 4)
        x = Tensor(np.array([-0.5, 0.0, 0.7, 2.0, -3.0]), requires_grad=True)
        F.sum(fake_quantize(x, qp)).backward()
        np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0, 0.0, 0.0])

    def test_keeps_dtype(self):
        qp = compute_qparams(-1.0, 1.0, 4)
        assert fake_quantize(Tensor(np.zeros(3, dtype=np.float32)), qp).dtype == np.float32


class TestWeightCalibration:

    def test_range_minus_half_to_half(self):
        qp = weight_qparams(np.array([-0.5, 0.1, 0.5]), 4)
        assert float(qp.scale) == pytest.approx(1.0 / 15.0)

    def test_constant_weights_are_expanded(self):
        qp = weight_qparams(np.zeros(4), 4)
        assert float(qp.clip_lo) < 0.0 < float(qp.clip_hi)
        np.testing.assert_array_equal(dequantize(quantize(np.zeros(4), qp), qp), 0.0)

    def test_per_channel_scales(self):
        w = np.array([[-1.0, 1.0, 0.0], [0.0, 0.3, 0.15]])
        qp = weight_qparams(w, 4, per_channel=True)
        assert qp.scale.shape == (2,)
        np.testing.assert_allclose(qp.scale, [2.0 / 15.0, 0.3 / 15.0])
        np.testing.assert_allclose(dequantize(quantize(w, qp), qp), w, atol=0.5 * 2.0 / 15.0)

    def test_calibrate_covers_conv_and_linear(self, tiny_classifier):
        qps = calibrate_weights(tiny_classifier, 4)
        expected = {l.name for l in tiny_classifier.layers if l.kind in ("conv", "linear")}
        assert set(qps) == expected
        assert all(qp.bit_width == 4 for qp in qps.values())


class TestRangeTracker:

    def test_ema_update(self):
        tracker = RangeTracker(momentum=0.9)
        tracker.observe(np.array([0.0, 1.0]))
        tracker.observe(np.array([0.0, 2.0]))
        assert tracker.lo == 0.0
        assert tracker.hi == pytest.approx(1.1)
        assert tracker.batches == 2

    def test_frozen_tracker_ignores_batches(self):
        tracker = RangeTracker()
        tracker.observe(np.array([0.0, 1.0]))
        tracker.freeze()
        tracker.observe(np.array([-5.0, 5.0]))
        assert (tracker.lo, tracker.hi) == (0.0, 1.0)

    def test_state_round_trip(self):
        tracker = RangeTracker(0.8)
        tracker.observe(np.array([-1.0, 3.0]))
        restored = RangeTracker.from_state(tracker.state())
        assert restored.state() == tracker.state()

    def test_bad_momentum_raises(self):
        with pytest.raises(ConfigError):
            RangeTracker(1.0)


class TestWrapModel:

    def test_wrap_leaves_original_untouched(self, pretrained_classifier):
        before = params_digest(pretrained_classifier.named_arrays())
        q_model = wrap_model(pretrained_classifier, 4, 4)
        assert pretrained_classifier.quant is None
        assert isinstance(q_model.quant, ModelQuantizer)
        assert q_model.meta["quant"] == {"weight_bits": 4, "act_bits": 4}
        assert params_digest(pretrained_classifier.named_arrays()) == before

    def test_activations_pass_through_until_observed(self, pretrained_classifier, rng):
        x = Tensor(rng.normal(size=(4, 3, 8, 8)).astype(np.float32))
        q_model = wrap_model(pretrained_classifier, 8, 8)
        assert all(t.lo is None for t in q_model.quant.trackers.values())
        q_model(x, mode="eval")
        assert all(t.lo is None for t in q_model.quant.trackers.values())

    def test_warm_up_freezes_ranges(self, pretrained_classifier, rng):
        q_model = wrap_model(pretrained_classifier, 4, 4)
        batches = [Tensor(rng.normal(size=(4, 3, 8, 8)).astype(np.float32)) for _ in range(3)]
        assert warm_up_ranges(q_model, batches) == 3
        assert q_model.quant.frozen and not q_model.quant.observing
        state = q_model.quant.state()
        q_model(batches[0], mode="eval")
        assert q_model.quant.state() == state
        assert all(t.batches == 3 for t in q_model.quant.trackers.values())

    def test_w8a8_stays_close_to_full_precision(self, pretrained_classifier, rng):
        x = Tensor(rng.normal(size=(6, 3, 8, 8)).astype(np.float32))
        fp_logits, _ = pretrained_classifier(x, mode="eval")
        q_model = wrap_model(pretrained_classifier, 8, 8)
        warm_up_ranges(q_model, [x])
        q_logits, _ = q_model(x, mode="eval")
        scale = np.abs(fp_logits.data).max()
        assert np.max(np.abs(q_logits.data - fp_logits.data)) < 0.2 * scale

    def test_unwrap_restores_full_precision_forward(self, pretrained_classifier, rng):
        x = Tensor(rng.normal(size=(2, 3, 8, 8)).astype(np.float32))
        q_model = wrap_model(pretrained_classifier, 4, 4)
        fp = unwrap_model(q_model)
        assert fp.quant is None and "quant" not in fp.meta
        np.testing.assert_array_equal(fp(x)[0].data, pretrained_classifier(x)[0].data)

    def test_gradients_flow_to_quantized_weights(self, pretrained_classifier, rng):
        q_model = wrap_model(pretrained_classifier, 4, 4)
        warm_up_ranges(q_model, [Tensor(rng.normal(size=(4, 3, 8, 8)).astype(np.float32))])
        logits, _ = q_model(Tensor(rng.normal(size=(2, 3, 8, 8)).astype(np.float32)), mode="eval")
        logits.sum().backward()
        assert q_model.params["fc.weight"].grad is not None
        assert np.any(q_model.params["stem.conv.weight"].grad != 0)

    def test_report_lists_weights_and_activations(self, pretrained_classifier, rng):
        q_model = wrap_model(pretrained_classifier, 4, 4)
        warm_up_ranges(q_model, [Tensor(rng.normal(size=(4, 3, 8, 8)).astype(np.float32))])
        report = q_model.quant.report(q_model)
        assert "fc.weight" in report and "stem.relu.activation" in report
        assert report["stem.relu.activation"]["N"] == 4

    def test_bits_out_of_range(self):
        with pytest.raises(ConfigError):
            ModelQuantizer(1, 4, [])
