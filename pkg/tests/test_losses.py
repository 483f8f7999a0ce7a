import math

import numpy as np
import pytest

from xfdreid.config import LossWeights
from xfdreid.exceptions import DegenerateBatchError, EmptyBatchError, LabelOutOfRangeError
from xfdreid.gradcheck import numeric_gradient, relative_error
from xfdreid.losses import (
    cross_modal_losses,
    id_loss,
    pairwise_euclidean,
    total_loss,
    triplet_loss,
)
from xfdreid.pooling import AttentionPoolParams, NeckParams
from xfdreid.trainer import TrainableParams


def _params(rng, num_ids=4, dim=6, neck=True):
    return TrainableParams(
        attention=AttentionPoolParams(0.3 * rng.standard_normal(dim)),
        neck=NeckParams(neck, 1e-5, 1.0 + 0.1 * rng.standard_normal(dim),
                        0.1 * rng.standard_normal(dim)),
        classifier_weight=0.5 * rng.standard_normal((num_ids, dim)),
        classifier_bias=0.1 * rng.standard_normal(num_ids),
        identity_memory=rng.standard_normal((num_ids, dim)),
        log_temperature=np.asarray(math.log(0.5)),
        person_ids=tuple(range(num_ids)),
    )


def _brute_force_triplet(feats, labels):
    y = feats / np.linalg.norm(feats, axis=1, keepdims=True)
    losses = []
    for a in range(len(labels)):
        pos = [np.linalg.norm(y[a] - y[p]) for p in range(len(labels))
               if p != a and labels[p] == labels[a]]
        neg = [np.linalg.norm(y[a] - y[n]) for n in range(len(labels)) if labels[n] != labels[a]]
        if pos and neg:
            losses.append(math.log1p(math.exp(max(pos) - min(neg))))
    return sum(losses) / len(losses)


class TestIdentityLoss:
    def test_uniform_logits_give_log_classes(self):
        term = id_loss(np.ones((3, 5)), [0, 1, 3], np.zeros((4, 5)), np.zeros(4),
                       label_smoothing=0.0)
        assert term.value == pytest.approx(math.log(4), rel=1e-12)

    def test_smoothing_keeps_uniform_value(self):
        term = id_loss(np.ones((2, 5)), [0, 1], np.zeros((4, 5)), np.zeros(4),
                       label_smoothing=0.1)
        assert term.value == pytest.approx(math.log(4), rel=1e-12)

    def test_label_out_of_range(self):
        with pytest.raises(LabelOutOfRangeError):
            id_loss(np.ones((2, 5)), [0, 4], np.zeros((4, 5)), np.zeros(4))

    def test_empty_batch(self):
        with pytest.raises(EmptyBatchError):
            id_loss(np.ones((0, 5)), [], np.zeros((4, 5)), np.zeros(4))

    def test_gradients(self, rng):
        feats = rng.standard_normal((6, 5))
        weight = rng.standard_normal((4, 5))
        bias = rng.standard_normal(4)
        labels = [0, 0, 1, 2, 3, 3]

        def loss():
            return id_loss(feats, labels, weight, bias).value

        grads = id_loss(feats, labels, weight, bias).grads
        assert relative_error(grads["feats"], numeric_gradient(loss, feats)) < 1e-6
        assert relative_error(grads["classifier_weight"], numeric_gradient(loss, weight)) < 1e-6
        assert relative_error(grads["classifier_bias"], numeric_gradient(loss, bias)) < 1e-6


class TestTripletLoss:
    def test_collapsed_embeddings_give_log_two(self):
        feats = np.tile([1.0, 2.0, 3.0], (4, 1))
        term = triplet_loss(feats, [0, 0, 1, 1])
        assert term.value == pytest.approx(math.log(2), rel=1e-12)
        assert np.all(np.isfinite(term.grads["feats"]))

    def test_matches_brute_force(self, rng):
        for _ in range(20):
            feats = rng.standard_normal((16, 8))
            labels = np.repeat(np.arange(4), 4)
            assert triplet_loss(feats, labels).value == pytest.approx(
                _brute_force_triplet(feats, labels), rel=1e-12)

    def test_skips_anchors_without_positive(self, rng):
        feats = rng.standard_normal((5, 4))
        labels = np.array([0, 0, 1, 1, 2])
        assert triplet_loss(feats, labels).value == pytest.approx(
            _brute_force_triplet(feats, labels), rel=1e-12)

    def test_degenerate_batch(self, rng):
        with pytest.raises(DegenerateBatchError):
            triplet_loss(rng.standard_normal((3, 4)), [0, 1, 2])

    def test_hinge_margin(self, rng):
        feats = rng.standard_normal((8, 4))
        labels = np.repeat(np.arange(2), 4)
        assert triplet_loss(feats, labels, margin=10.0).value > 0.0
        y = feats / np.linalg.norm(feats, axis=1, keepdims=True)
        dist = pairwise_euclidean(y)
        np.testing.assert_allclose(np.diag(dist), 0.0)

    def test_gradient(self, rng):
        feats = rng.standard_normal((8, 5))
        labels = np.repeat(np.arange(2), 4)

        def loss():
            return triplet_loss(feats, labels).value

        grad = triplet_loss(feats, labels).grads["feats"]
        assert relative_error(grad, numeric_gradient(loss, feats)) < 1e-6


class TestCrossModal:
    def test_orthogonal_memory_gives_log_two(self):
        memory = np.eye(4)[:2]
        feats = np.array([[0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]])
        i2t, _ = cross_modal_losses(feats, [0, 1], memory, np.asarray(math.log(0.07)))
        assert i2t.value == pytest.approx(math.log(2), rel=1e-12)

    def test_perfect_alignment_goes_to_zero(self):
        memory = np.array([[1.0, 0.0], [-1.0, 0.0]])
        i2t, t2i = cross_modal_losses(memory.copy(), [0, 1], memory, np.asarray(math.log(0.07)))
        assert i2t.value < 1e-6
        assert t2i.value < 1e-6

    def test_gradients(self, rng):
        feats = rng.standard_normal((6, 5))
        memory = rng.standard_normal((3, 5))
        log_tau = np.asarray(math.log(0.3))
        labels = [0, 0, 1, 1, 2, 2]

        for which in (0, 1):
            def loss():
                return cross_modal_losses(feats, labels, memory, log_tau)[which].value

            grads = cross_modal_losses(feats, labels, memory, log_tau)[which].grads
            assert relative_error(grads["feats"], numeric_gradient(loss, feats)) < 1e-6
            assert relative_error(grads["identity_memory"],
                                  numeric_gradient(loss, memory)) < 1e-6
            assert relative_error(grads["log_temperature"],
                                  numeric_gradient(loss, log_tau)) < 1e-6


class TestTotalLoss:
    def _batch(self, rng):
        return rng.standard_normal((8, 3, 6)), np.repeat(np.arange(4), 2)

    def test_zero_weights_give_zero_loss_and_gradients(self, rng):
        frames, labels = self._batch(rng)
        result = total_loss(frames, labels, _params(rng), LossWeights(0.0, 0.0, 0.0, 0.0))
        assert result.value == 0.0
        for grad in result.grads.values():
            assert np.all(grad == 0.0)

    def test_value_is_weighted_sum_of_terms(self, rng):
        frames, labels = self._batch(rng)
        weights = LossWeights(0.25, 1.0, 0.5, 2.0)
        result = total_loss(frames, labels, _params(rng), weights)
        expected = (0.25 * result.terms["id"] + result.terms["tri"]
                    + 0.5 * result.terms["i2t"] + 2.0 * result.terms["t2i"])
        assert result.value == pytest.approx(expected, rel=1e-12)

    def test_doubling_weights_doubles_loss_and_gradients(self, rng):
        frames, labels = self._batch(rng)
        params = _params(rng)
        single = total_loss(frames, labels, params, LossWeights())
        double = total_loss(frames, labels, params, LossWeights().scaled(2.0))
        assert double.value == pytest.approx(2.0 * single.value, rel=1e-12)
        for name, grad in single.grads.items():
            np.testing.assert_allclose(double.grads[name], 2.0 * grad, rtol=1e-10, atol=1e-14)

    def test_mean_mode_leaves_attention_gradient_zero(self, rng):
        frames, labels = self._batch(rng)
        result = total_loss(frames, labels, _params(rng), LossWeights(), pooling_mode="mean")
        assert np.all(result.grads["attention_w"] == 0.0)

    @pytest.mark.parametrize("neck", [True, False])
    def test_gradients_match_finite_differences(self, neck):
        rng = np.random.default_rng(7 if neck else 8)
        frames, labels = self._batch(rng)
        params = _params(rng, neck=neck)

        def loss():
            return total_loss(frames, labels, params, LossWeights()).value

        analytic = total_loss(frames, labels, params, LossWeights()).grads
        for name, tensor in params.tensors().items():
            if name.startswith("neck_") and not neck:
                continue
            assert relative_error(analytic[name], numeric_gradient(loss, tensor)) < 1e-5, name
