import math

import numpy as np
import pytest

from components.losses import (
    AMAConfig,
    BNSTarget,
    CenterTracker,
    ClassCenters,
    DKDConfig,
    ama_loss,
    bns_loss,
    class_centers,
    cross_entropy,
    dkd_components,
    dkd_loss,
    finetune_loss,
    generation_loss,
    kd_loss,
)
from engine import functional as F
from engine.gradcheck import gradcheck
from engine.tensor import Tensor
from models.graph import BatchStats, ForwardCapture
from utils.errors import ConfigError

GRAD_RTOL = 1e-4
TRIALS = range(20)


def trial_rng(seed):
    return np.random.default_rng(2000 + seed)


def stats_of(mean, std):
    mean = Tensor(np.asarray(mean, dtype=np.float64))
    std = Tensor(np.asarray(std, dtype=np.float64))
    return BatchStats(mean=mean, var=F.square(std), std=std)


def capture_from(x, eps=1e-5):
    """Single-BN capture whose statistics are the channel stats of x."""
    mean = F.channel_mean(x)
    var = F.channel_var(x)
    return ForwardCapture([BatchStats(mean, var, F.sqrt(F.add_scalar(var, eps)))], features=None, logits=None)


class TestBNSLoss:

    def test_mean_offset_of_three_gives_nine(self):
        capture = ForwardCapture([stats_of([3.0], [1.0])], None, None)
        target = BNSTarget((np.array([0.0]),), (np.array([1.0]),))
        assert bns_loss(capture, target).item() == pytest.approx(9.0)

    def test_matching_statistics_give_zero(self):
        capture = ForwardCapture([stats_of([0.2, -1.0], [0.5, 2.0]), stats_of([1.0], [1.0])], None, None)
        target = BNSTarget((np.array([0.2, -1.0]), np.array([1.0])), (np.array([0.5, 2.0]), np.array([1.0])))
        assert bns_loss(capture, target).item() == pytest.approx(0.0)

    def test_sums_over_layers(self):
        capture = ForwardCapture([stats_of([1.0], [1.0]), stats_of([0.0], [3.0])], None, None)
        target = BNSTarget((np.array([0.0]), np.array([0.0])), (np.array([1.0]), np.array([1.0])))
        assert bns_loss(capture, target).item() == pytest.approx(1.0 + 4.0)

    def test_nonnegative(self, rng):
        for _ in range(1000):
            layers = int(rng.integers(1, 4))
            capture = ForwardCapture([stats_of(rng.normal(size=2), rng.uniform(0.0, 3.0, size=2))
                                      for _ in range(layers)], None, None)
            target = BNSTarget(tuple(rng.normal(size=2) for _ in range(layers)),
                               tuple(rng.uniform(0.0, 3.0, size=2) for _ in range(layers)))
            assert bns_loss(capture, target).item() >= 0.0

    def test_layer_count_mismatch_raises(self):
        capture = ForwardCapture([stats_of([0.0], [1.0])] * 2, None, None)
        target = BNSTarget((np.array([0.0]),), (np.array([1.0]),))
        with pytest.raises(ConfigError):
            bns_loss(capture, target)

    def test_channel_mismatch_raises(self):
        capture = ForwardCapture([stats_of([0.0, 0.0], [1.0, 1.0])], None, None)
        target = BNSTarget((np.array([0.0]),), (np.array([1.0]),))
        with pytest.raises(ConfigError):
            bns_loss(capture, target)

    def test_target_needs_a_store(self):
        with pytest.raises(ConfigError):
            BNSTarget.from_store(None)

    def test_target_from_pretrained_store(self, pretrained_classifier):
        target = BNSTarget.from_store(pretrained_classifier.bn_store)
        assert len(target) == len(pretrained_classifier.bn_layers())

    def test_real_capture_against_own_store_is_finite(self, pretrained_classifier, rng):
        target = BNSTarget.from_store(pretrained_classifier.bn_store)
        x = Tensor(rng.normal(size=(4, 3, 8, 8)).astype(np.float32))
        _, capture = pretrained_classifier(x, mode="eval", capture=True)
        value = bns_loss(capture, target).item()
        assert np.isfinite(value) and value >= 0.0

    @pytest.mark.parametrize("seed", TRIALS)
    def test_gradcheck(self, seed):
        rng = trial_rng(seed)
        target = BNSTarget((np.array([0.1, -0.2]),), (np.array([0.8, 1.3]),))

        def fn(x):
            return bns_loss(capture_from(x), target)

        assert gradcheck(fn, [Tensor(rng.normal(size=(3, 2, 2, 2)), requires_grad=True)], rtol=GRAD_RTOL)


class TestClassCenters:

    def test_two_samples_same_class(self):
        centers = class_centers(Tensor(np.array([[1.0, 0.0], [0.0, 1.0]])), [0, 0])
        np.testing.assert_allclose(centers.centers.data, [[0.5, 0.5]])
        np.testing.assert_array_equal(centers.classes, [0])

    def test_one_sample_per_class_is_its_own_center(self, rng):
        feats = rng.normal(size=(3, 4))
        centers = class_centers(Tensor(feats), [2, 0, 1])
        np.testing.assert_allclose(centers.per_sample().data, feats)

    def test_only_present_classes(self):
        centers = class_centers(Tensor(np.ones((3, 2))), [4, 4, 7])
        np.testing.assert_array_equal(centers.classes, [4, 7])
        assert centers.centers.shape == (2, 2)

    def test_center_tracker_blends_with_history(self):
        tracker = CenterTracker(num_classes=3, dim=2, decay=0.5)
        first = tracker.blend(class_centers(Tensor(np.array([[1.0, 0.0]])), [0]))
        np.testing.assert_allclose(first.centers.data, [[1.0, 0.0]])
        second = tracker.blend(class_centers(Tensor(np.array([[0.0, 1.0]])), [0]))
        np.testing.assert_allclose(second.centers.data, [[0.5, 0.5]])
        assert tracker.seen.tolist() == [True, False, False]


class TestAMALoss:

    def test_below_lower_bound(self):
        feats = Tensor(np.array([[1.0, 0.0]]))
        cfg = AMAConfig(margin=0.6, lambda_low=0.85, lambda_high=0.95)
        loss = ama_loss(feats, class_centers(feats, [0]), cfg)
        assert loss.item() == pytest.approx(0.85 - math.cos(0.6), abs=1e-5)
        assert loss.item() == pytest.approx(0.0247, abs=1e-4)

    def test_vacuous_bounds_give_zero(self, rng):
        feats = Tensor(rng.normal(size=(8, 5)))
        cfg = AMAConfig(margin=0.0, lambda_low=-1.0, lambda_high=1.0)
        assert ama_loss(feats, class_centers(feats, rng.integers(0, 3, size=8)), cfg).item() == 0.0

    def test_dead_zone_gives_zero(self):
        feats = Tensor(np.array([[1.0, 0.0], [1.0, 0.1]]))
        cfg = AMAConfig(margin=0.0, lambda_low=0.5, lambda_high=1.0)
        assert ama_loss(feats, class_centers(feats, [0, 0]), cfg).item() == 0.0

    def test_nonnegative(self, rng):
        for _ in range(1000):
            feats = Tensor(rng.normal(size=(4, 3)))
            low = rng.uniform(-1.0, 0.9)
            cfg = AMAConfig(margin=rng.uniform(0.0, 1.5), lambda_low=low, lambda_high=rng.uniform(low + 0.01, 1.0))
            labels = rng.integers(0, 2, size=4)
            assert ama_loss(feats, class_centers(feats, labels), cfg).item() >= 0.0

    def test_per_sample_loss_ignores_feature_scale(self, rng):
        raw = rng.normal(size=(6, 4))
        centers = class_centers(Tensor(raw), [0, 1, 0, 1, 2, 2])
        cfg = AMAConfig(margin=0.6, lambda_low=0.99, lambda_high=1.0)
        factors = np.array([1.0, 0.3, 1.0, 12.0, 5.0, 0.01])[:, None]

        def per_sample(feats):
            return np.array([
                ama_loss(Tensor(feats[b:b + 1]), ClassCenters(centers.classes, centers.centers, centers.index[b:b + 1]),
                         cfg).item()
                for b in range(feats.shape[0])
            ])

        before, after = per_sample(raw), per_sample(raw * factors)
        assert np.all(before > 0.0)
        np.testing.assert_allclose(after, before, atol=1e-9)

    def test_zero_features_stay_finite(self):
        feats = Tensor(np.zeros((2, 3)), requires_grad=True)
        loss = ama_loss(feats, class_centers(feats, [0, 1]), AMAConfig())
        assert np.isfinite(loss.item())
        loss.backward()
        assert np.all(np.isfinite(feats.grad))

    @pytest.mark.parametrize("low,high", [(0.9, 0.9), (0.95, 0.75), (-1.5, 0.5), (0.5, 1.2)])
    def test_bad_bounds_raise(self, low, high):
        with pytest.raises(ConfigError):
            AMAConfig(lambda_low=low, lambda_high=high)

    @pytest.mark.parametrize("seed", TRIALS)
    def test_gradcheck(self, seed):
        rng = trial_rng(seed)
        cfg = AMAConfig(margin=0.6, lambda_low=0.99, lambda_high=1.0)
        labels = [0, 0, 1, 1, 2, 2]

        def fn(feats):
            return ama_loss(feats, class_centers(feats, labels), cfg)

        feats = Tensor(rng.uniform(0.1, 1.0, size=(6, 4)), requires_grad=True)
        assert gradcheck(fn, [feats], rtol=GRAD_RTOL)


class TestDKDLoss:

    @pytest.mark.parametrize("temperature", [1.0, 4.0])
    def test_decomposes_classic_kd(self, temperature):
        rng = np.random.default_rng(int(temperature))
        for _ in range(100):
            s = rng.normal(scale=2.0, size=(1, 5))
            t = rng.normal(scale=2.0, size=(1, 5))
            label = rng.integers(0, 5, size=1)
            tckd, nckd = dkd_components(Tensor(s), t, label, temperature)
            p = np.exp(t / temperature - np.max(t / temperature))
            p_target = (p / p.sum())[0, label[0]]
            kd = kd_loss(Tensor(s), t, temperature).item()
            assert kd == pytest.approx(tckd.item() + (1.0 - p_target) * nckd.item(), rel=1e-6, abs=1e-9)

    def test_identical_logits_give_zero(self, rng):
        logits = rng.normal(size=(4, 6))
        loss = dkd_loss(Tensor(logits), logits, [0, 1, 2, 3], DKDConfig())
        assert loss.item() == pytest.approx(0.0, abs=1e-9)

    def test_alpha_zero_is_beta_times_nckd(self, rng):
        s, t = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        labels = [1, 3, 0]
        _, nckd = dkd_components(Tensor(s), t, labels)
        loss = dkd_loss(Tensor(s), t, labels, DKDConfig(alpha=0.0, beta=8.0))
        assert loss.item() == pytest.approx(8.0 * nckd.item(), rel=1e-12)

    def test_components_are_nonnegative(self, rng):
        tckd, nckd = dkd_components(Tensor(rng.normal(size=(5, 4))), rng.normal(size=(5, 4)), [0, 1, 2, 3, 0])
        assert tckd.item() >= -1e-12 and nckd.item() >= -1e-12

    def test_single_class_raises(self):
        with pytest.raises(ConfigError):
            dkd_loss(Tensor(np.zeros((2, 1))), np.zeros((2, 1)), [0, 0], DKDConfig())

    def test_bad_temperature_raises(self):
        with pytest.raises(ConfigError):
            DKDConfig(temperature=0.0)

    @pytest.mark.parametrize("seed", TRIALS)
    def test_gradcheck(self, seed):
        rng = trial_rng(seed)
        teacher = rng.normal(size=(3, 5))
        labels = [4, 0, 2]

        def fn(s):
            return dkd_loss(s, teacher, labels, DKDConfig(alpha=1.0, beta=8.0, temperature=2.0))

        assert gradcheck(fn, [Tensor(rng.normal(size=(3, 5)), requires_grad=True)], rtol=GRAD_RTOL)


class TestCrossEntropy:

    def test_uniform_logits(self):
        assert cross_entropy(Tensor(np.zeros((2, 4))), [0, 3]).item() == pytest.approx(math.log(4))

    def test_confident_correct_prediction_is_small(self):
        logits = np.array([[20.0, 0.0, 0.0]])
        assert cross_entropy(Tensor(logits), [0]).item() < 1e-6

    @pytest.mark.parametrize("seed", TRIALS)
    def test_gradcheck(self, seed):
        rng = trial_rng(seed)

        def fn(logits):
            return cross_entropy(logits, [1, 0, 2])

        assert gradcheck(fn, [Tensor(rng.normal(size=(3, 3)), requires_grad=True)], rtol=GRAD_RTOL)


class TestCombinedObjectives:

    def test_finetune_without_distillation_is_cross_entropy(self, rng):
        q = Tensor(rng.normal(size=(4, 3)))
        labels = [0, 1, 2, 1]
        total, terms = finetune_loss(q, rng.normal(size=(4, 3)), labels, lam=0.0)
        assert total.item() == pytest.approx(cross_entropy(q, labels).item())
        assert terms["L_TCKD"] == terms["L_NCKD"] == 0.0

    def test_finetune_adds_weighted_dkd(self, rng):
        q, fp = Tensor(rng.normal(size=(4, 3))), rng.normal(size=(4, 3))
        labels = [0, 1, 2, 1]
        total, terms = finetune_loss(q, fp, labels, lam=0.9)
        expected = terms["L_CE"] + 0.9 * (terms["L_TCKD"] + 8.0 * terms["L_NCKD"])
        assert total.item() == pytest.approx(expected, rel=1e-9)

    def test_finetune_classic_kd_variant(self, rng):
        q, fp = Tensor(rng.normal(size=(4, 3))), rng.normal(size=(4, 3))
        total, terms = finetune_loss(q, fp, [0, 1, 2, 1], lam=0.5, distill="kd")
        assert total.item() == pytest.approx(terms["L_CE"] + 0.5 * terms["L_KD"], rel=1e-9)

    def test_finetune_rejects_negative_weight(self, rng):
        with pytest.raises(ConfigError):
            finetune_loss(Tensor(rng.normal(size=(2, 3))), rng.normal(size=(2, 3)), [0, 1], lam=-0.1)

    def test_generation_without_ama_is_bns(self, rng):
        x = Tensor(rng.normal(size=(4, 2, 2, 2)))
        target = BNSTarget((np.zeros(2),), (np.ones(2),))
        capture = capture_from(x)
        total, terms = generation_loss(capture, target, None, None, ama_cfg=None)
        assert total.item() == pytest.approx(bns_loss(capture, target).item())
        assert terms["L_AMA"] == 0.0

    @pytest.mark.parametrize("seed", TRIALS)
    def test_generation_gradcheck(self, seed):
        rng = trial_rng(seed)
        target = BNSTarget((np.array([0.5, 0.4]),), (np.array([0.3, 0.2]),))
        cfg = AMAConfig(margin=0.6, lambda_low=0.99, lambda_high=1.0)
        labels = [0, 0, 1, 1]

        def fn(x):
            feats = F.reshape(x, (4, 8))
            return generation_loss(capture_from(x), target, feats, labels, ama_cfg=cfg)[0]

        x = Tensor(rng.uniform(0.2, 1.0, size=(4, 2, 2, 2)), requires_grad=True)
        assert gradcheck(fn, [x], rtol=GRAD_RTOL)

    @pytest.mark.parametrize("seed", TRIALS)
    def test_finetune_gradcheck(self, seed):
        rng = trial_rng(seed)
        fp = rng.normal(size=(4, 5))
        labels = [0, 3, 1, 4]

        def fn(q):
            return finetune_loss(q, fp, labels, lam=0.9)[0]

        assert gradcheck(fn, [Tensor(rng.normal(size=(4, 5)), requires_grad=True)], rtol=GRAD_RTOL)
