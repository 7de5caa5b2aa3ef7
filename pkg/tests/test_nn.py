import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gradcheck import layer_gradient_errors, model_gradient_errors, random_simplex
from label_refinery.checkpoint import model_hash
from label_refinery.exceptions import DegenerateBatchError, InvalidInputError, ProtocolError
from label_refinery.losses import LOSS_CHOICES
from label_refinery.nn import (
    SGD,
    BatchNorm,
    Classifier,
    Conv3x3,
    GlobalAvgPool,
    Linear,
    MaxPool2,
    ReLU,
    build_arch,
    sgd_step,
    softmax,
)


class TestSoftmax:
    def test_symmetric(self):
        np.testing.assert_allclose(softmax(np.array([[0.0, 0.0]])), [[0.5, 0.5]])

    def test_log_ratio(self):
        # softmax([ln 1, ln 3]) = [1/4, 3/4] exactly in real arithmetic
        out = softmax(np.array([[np.log(1.0), np.log(3.0)]]))
        np.testing.assert_allclose(out, [[0.25, 0.75]], rtol=1e-15)

    def test_large_logits_do_not_overflow(self):
        out = softmax(np.array([[1000.0, 0.0]], dtype=np.float32))
        assert np.all(np.isfinite(out))
        assert out[0, 0] == pytest.approx(1.0)
        assert out[0, 1] == pytest.approx(0.0, abs=1e-30)

    def test_rejects_non_finite(self):
        with pytest.raises(InvalidInputError):
            softmax(np.array([[np.nan, 1.0]]))
        with pytest.raises(InvalidInputError):
            softmax(np.array([[np.inf, 1.0]]))

    @settings(max_examples=200, deadline=None)
    @given(arrays(np.float32, st.tuples(st.integers(1, 6), st.integers(1, 12)),
                  elements=st.floats(-80, 80, width=32)))
    def test_rows_on_simplex(self, logits):
        out = softmax(logits)
        assert np.all(out >= 0)
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)


class TestLayers:
    def test_identity_linear(self):
        fc = Linear(2, 2)
        fc.weights[...] = np.eye(2)
        y, _ = fc.forward(np.array([[1.0, 2.0]], np.float32), "eval", False)
        np.testing.assert_array_equal(y, [[1.0, 2.0]])

    def test_linear_input_grad_is_transpose(self, rng):
        fc = Linear(3, 4, rng)
        x = rng.standard_normal((2, 3)).astype(np.float32)
        up = rng.standard_normal((2, 4)).astype(np.float32)
        _, cache = fc.forward(x, "eval", False)
        dx, _ = fc.backward(up, cache)
        np.testing.assert_allclose(dx, up @ fc.weights, rtol=1e-6)

    def test_conv_all_ones(self):
        conv = Conv3x3(1, 1)
        conv.weights[...] = 1.0
        x = np.ones((1, 3, 3, 1), np.float32)
        y, _ = conv.forward(x, "eval", False)
        assert y[0, 1, 1, 0] == 9.0
        # zero padding: a corner sees a 2x2 window
        assert y[0, 0, 0, 0] == 4.0

    def test_conv_matches_direct_sum(self, rng):
        conv = Conv3x3(2, 3, rng)
        conv.bias[...] = rng.standard_normal(3)
        x = rng.standard_normal((1, 5, 4, 2)).astype(np.float32)
        y, _ = conv.forward(x, "eval", False)
        xp = np.pad(x[0].astype(np.float64), ((1, 1), (1, 1), (0, 0)))
        for o in range(3):
            for i in range(5):
                for j in range(4):
                    patch = xp[i:i + 3, j:j + 3, :]  # (3, 3, c)
                    ref = np.sum(patch.transpose(2, 0, 1) * conv.weights[o]) + conv.bias[o]
                    assert y[0, i, j, o] == pytest.approx(ref, rel=1e-5, abs=1e-5)

    @pytest.mark.parametrize("v", [-3.0, 0.0, 2.5, 1e4])
    def test_batchnorm_constant_feature_is_zero(self, v):
        bn = BatchNorm(2)
        x = np.full((4, 2, 2, 2), v, np.float32)
        x[..., 1] = np.arange(16, dtype=np.float32).reshape(4, 2, 2)
        y, _ = bn.forward(x, "train", False)
        np.testing.assert_array_equal(y[..., 0], 0.0)

    def test_batchnorm_eval_uses_running_stats(self):
        bn = BatchNorm(1)
        bn.running_mean[...] = 2.0
        bn.running_var[...] = 4.0
        y, _ = bn.forward(np.full((1, 1, 1, 1), 6.0, np.float32), "eval", False)
        assert y.item() == pytest.approx(4.0 / np.sqrt(4.0 + 1e-5))

    def test_batchnorm_running_update(self):
        bn = BatchNorm(1)
        x = np.array([1.0, 3.0], np.float32).reshape(2, 1, 1, 1)
        bn.forward(x, "train", True)
        # mean 2, unbiased variance 2
        assert bn.running_mean[0] == pytest.approx(0.1 * 2.0)
        assert bn.running_var[0] == pytest.approx(0.9 + 0.1 * 2.0)
        assert bn.stat_writes == 1

    def test_batchnorm_degenerate_batch(self):
        with pytest.raises(DegenerateBatchError):
            BatchNorm(1).forward(np.ones((1, 2, 2, 1), np.float32), "train", False)

    def test_maxpool_routes_to_first_max(self):
        x = np.array([[5.0, 5.0], [1.0, 5.0]], np.float32).reshape(1, 2, 2, 1)
        y, cache = MaxPool2().forward(x, "eval", False)
        assert y.item() == 5.0
        dx, _ = MaxPool2().backward(np.ones((1, 1, 1, 1), np.float32), cache)
        np.testing.assert_array_equal(dx.reshape(2, 2), [[1, 0], [0, 0]])

    @pytest.mark.parametrize("name,make,shape", [
        ("conv", lambda dt: Conv3x3(2, 3, np.random.default_rng(7), dt), (2, 4, 4, 2)),
        ("linear", lambda dt: Linear(5, 3, np.random.default_rng(7), dt), (3, 5)),
        ("relu", lambda dt: ReLU(), (2, 3, 3, 2)),
        ("maxpool", lambda dt: MaxPool2(), (2, 4, 4, 2)),
        ("gap", lambda dt: GlobalAvgPool(), (2, 3, 3, 2)),
        ("batchnorm", lambda dt: BatchNorm(3, dt), (3, 2, 2, 3)),
    ])
    def test_layer_gradients_exhaustive(self, name, make, shape, rng):
        errors = layer_gradient_errors(make, shape, rng)
        assert max(errors.values()) <= 1e-3, errors

    def test_batchnorm_eval_gradients(self, rng):
        def make(dt):
            bn = BatchNorm(3, dt)
            bn.running_mean[...] = [0.5, -1.0, 2.0]
            bn.running_var[...] = [0.3, 2.0, 1.5]
            bn.weights[...] = [1.5, -0.5, 2.0]
            return bn
        errors = layer_gradient_errors(make, (2, 2, 2, 3), rng, bn_mode="eval")
        assert max(errors.values()) <= 1e-3, errors


class TestClassifier:
    def test_logit_shape(self, smallnet, rng):
        x = rng.standard_normal((3, 3, 32, 32)).astype(np.float32)
        assert smallnet.forward(x, bn_mode="train").shape == (3, 10)

    def test_final_layer_emits_k_logits(self, rng):
        for name in ("smallnet", "bignet"):
            m = Classifier.create(name, 7, rng=rng)
            assert m.layers[-1].kind == "fullyconnected"
            assert m.layers[-1].out_features == 7

    def test_conv_followed_by_bn_relu(self):
        for name in ("smallnet", "bignet"):
            seq = [k for k, _ in build_arch(name, 10).layer_sequence]
            for i, kind in enumerate(seq):
                if kind == "conv3x3":
                    assert seq[i + 1:i + 3] == ["batchnorm", "relu"]

    def test_bignet_has_extra_block(self):
        widths = [w for k, w in build_arch("bignet", 10).layer_sequence if k == "conv3x3"]
        assert widths == [32, 64, 128, 128]

    def test_rejects_wrong_shape(self, smallnet):
        with pytest.raises(InvalidInputError):
            smallnet.forward(np.zeros((2, 3, 28, 28), np.float32))
        with pytest.raises(InvalidInputError):
            smallnet.forward(np.zeros((2, 1, 32, 32), np.float32))

    def test_single_sample_train_mode_is_degenerate(self, smallnet):
        with pytest.raises(DegenerateBatchError):
            smallnet.forward(np.zeros((1, 3, 32, 32), np.float32), bn_mode="train")
        smallnet.forward(np.zeros((1, 3, 32, 32), np.float32), bn_mode="eval")

    def test_backward_without_forward(self, smallnet):
        with pytest.raises(ProtocolError):
            smallnet.backward(np.zeros((2, 10), np.float32))

    def test_eval_is_pure(self, smallnet, rng):
        x = rng.standard_normal((4, 3, 32, 32)).astype(np.float32)
        a = smallnet.forward(x, bn_mode="eval")
        b = smallnet.forward(x, bn_mode="eval")
        assert a.tobytes() == b.tobytes()

    def test_frozen_train_forward_keeps_stats(self, smallnet, rng):
        x = rng.standard_normal((4, 3, 32, 32)).astype(np.float32)
        before = model_hash(smallnet)
        smallnet.forward(x, bn_mode="train")
        assert model_hash(smallnet) == before
        assert smallnet.stat_writes == 0

    def test_training_model_updates_stats(self, smallnet, rng):
        smallnet.is_training = True
        before = [b.copy() for _, _, b in smallnet.buffers()]
        smallnet.forward(rng.standard_normal((4, 3, 32, 32)).astype(np.float32), bn_mode="train")
        after = [b for _, _, b in smallnet.buffers()]
        assert any(not np.array_equal(x, y) for x, y in zip(before, after))
        assert smallnet.stat_writes == 3

    def test_zero_upstream_gives_zero_grads(self, smallnet, rng):
        smallnet.forward(rng.standard_normal((2, 3, 32, 32)).astype(np.float32), bn_mode="train")
        grads, dx = smallnet.backward(np.zeros((2, 10), np.float32))
        assert all(not g.any() for g in grads)
        assert not dx.any()

    def test_outputs_finite(self, smallnet, rng):
        x = 50 * rng.standard_normal((4, 3, 32, 32)).astype(np.float32)
        logits = smallnet.forward(x, bn_mode="train")
        grads, dx = smallnet.backward(np.ones_like(logits))
        assert np.all(np.isfinite(logits)) and np.all(np.isfinite(dx))
        assert all(np.all(np.isfinite(g)) for g in grads)

    def test_copy_is_deep(self, smallnet):
        clone = smallnet.copy()
        clone.layers[0].weights += 1
        assert not np.array_equal(clone.layers[0].weights, smallnet.layers[0].weights)
        assert model_hash(smallnet.copy()) == model_hash(smallnet)

    def test_forward_modes_are_counted(self, smallnet, rng):
        x = rng.standard_normal((2, 3, 32, 32)).astype(np.float32)
        smallnet.forward(x, bn_mode="train")
        smallnet.predict_logits(x)
        assert smallnet.forward_modes == {"train": 1, "eval": 1}

    @pytest.mark.parametrize("choice", LOSS_CHOICES)
    @pytest.mark.parametrize("bn_mode", ["train", "eval"])
    def test_full_smallnet_gradients(self, choice, bn_mode):
        rng = np.random.default_rng([LOSS_CHOICES.index(choice), bn_mode == "train"])
        model = Classifier.create("smallnet", 10, rng=rng)
        x = rng.standard_normal((4, 3, 32, 32))
        target = random_simplex(rng, 4, 10)
        errors = model_gradient_errors(model, x, target, choice, rng, bn_mode=bn_mode, coords=2)
        assert max(errors.values()) <= 1e-3, errors


class TestSGD:
    def _scalar_model(self, w):
        m = Classifier.create("smallnet", 2, rng=np.random.default_rng(0))
        m.layers[-1].bias[...] = w
        return m

    def _grads(self, m, bias_grad):
        grads = [np.zeros_like(a) for _, _, a in m.parameters()]
        grads[-1][...] = bias_grad
        return grads

    def test_plain_step(self):
        m = self._scalar_model(1.0)
        sgd_step(m, self._grads(m, 2.0), lr=0.1)
        np.testing.assert_allclose(m.layers[-1].bias, 0.8, rtol=1e-6)

    def test_weight_decay(self):
        m = self._scalar_model(1.0)
        sgd_step(m, self._grads(m, 0.0), lr=0.1, weight_decay=0.1)
        np.testing.assert_allclose(m.layers[-1].bias, 0.99, rtol=1e-6)

    def test_zero_lr_is_noop(self, smallnet, rng):
        before = model_hash(smallnet)
        grads = [rng.standard_normal(a.shape).astype(np.float32) for _, _, a in smallnet.parameters()]
        sgd_step(smallnet, grads, lr=0.0, momentum=0.9, weight_decay=0.1)
        assert model_hash(smallnet) == before

    def test_momentum_accumulates(self):
        m = self._scalar_model(0.0)
        opt = SGD(momentum=0.5)
        opt.step(m, self._grads(m, 1.0), lr=1.0)
        opt.step(m, self._grads(m, 1.0), lr=1.0)
        # v1 = 1, v2 = 0.5 * 1 + 1 = 1.5  ->  w = -(1 + 1.5)
        np.testing.assert_allclose(m.layers[-1].bias, -2.5)

    def test_running_stats_untouched(self, smallnet, rng):
        before = [b.copy() for _, _, b in smallnet.buffers()]
        grads = [rng.standard_normal(a.shape).astype(np.float32) for _, _, a in smallnet.parameters()]
        sgd_step(smallnet, grads, lr=0.1, momentum=0.9)
        assert all(np.array_equal(x, y) for x, (_, _, y) in zip(before, smallnet.buffers()))

    def test_shape_mismatch(self, smallnet):
        grads = [np.zeros(3, np.float32) for _ in smallnet.parameters()]
        with pytest.raises(InvalidInputError):
            sgd_step(smallnet, grads, lr=0.1)
