import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pdcreid import checks
from pdcreid.errors import ConfigError, ShapeError, StateError
from pdcreid.nn import (SGD, AvgPool2d, BatchNorm2d, Conv2d, GlobalAvgPool, Linear, MaxPool2d, ReLU,
                        SgdConfig, Sequential, Tanh, sgd_step, softmax_xent)
from pdcreid.nn.gradcheck import numeric_grad, rel_error


def direct_conv(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for ni in range(n):
        for oi in range(o):
            for i in range(ho):
                for j in range(wo):
                    acc = b[oi]
                    for ci in range(c):
                        for di in range(k):
                            for dj in range(k):
                                acc += xp[ni, ci, i * stride + di, j * stride + dj] * w[oi, ci, di, dj]
                    out[ni, oi, i, j] = acc
    return out


class TestConv:
    def test_ones(self):
        conv = Conv2d(1, 1, 3, bias=False)
        conv.params["W"][:] = 1.0
        assert conv.forward(np.ones((1, 1, 3, 3))).tolist() == [[[[9.0]]]]

    def test_unit_kernel_is_identity(self):
        conv = Conv2d(2, 2, 1, bias=False)
        conv.params["W"][:] = np.eye(2).reshape(2, 2, 1, 1)
        x = np.random.default_rng(0).normal(size=(3, 2, 4, 5))
        assert np.array_equal(conv.forward(x), x)

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
    def test_direct_oracle(self, stride, pad):
        rng = np.random.default_rng(stride * 10 + pad)
        conv = Conv2d(2, 3, 3, stride=stride, pad=pad, rng=rng)
        conv.params["b"][:] = rng.normal(size=3)
        x = rng.normal(size=(1, 2, 5, 5))
        ref = direct_conv(x, conv.params["W"], conv.params["b"], stride, pad)
        assert np.max(np.abs(conv.forward(x) - ref)) < 1e-12

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError, match="channels"):
            Conv2d(3, 4, 3).forward(np.zeros((1, 2, 5, 5)))

    def test_kernel_larger_than_input(self):
        with pytest.raises(ShapeError, match="does not fit"):
            Conv2d(1, 1, 5).forward(np.zeros((1, 1, 3, 3)))


class TestBackwardBasics:
    def test_dead_relu(self):
        r = ReLU()
        r.forward(np.array([[-1.0]]))
        assert r.backward(np.array([[1.0]])).tolist() == [[0.0]]

    def test_gap_constant(self):
        g = GlobalAvgPool()
        g.forward(np.full((1, 1, 3, 4), 7.0))
        assert np.all(g.backward(np.array([[2.4]])) == 2.4 / 12)

    @pytest.mark.parametrize("layer", [ReLU(), Conv2d(1, 1, 1), BatchNorm2d(1), MaxPool2d(2), Linear(2, 2)])
    def test_backward_before_forward(self, layer):
        with pytest.raises(StateError):
            layer.backward(np.zeros((1, 1)))

    def test_parameter_gradients_match_shapes(self):
        for layer in (Conv2d(2, 3, 3), BatchNorm2d(3), Linear(4, 2)):
            for k, v in layer.params.items():
                assert layer.grads[k].shape == v.shape

    def test_gradients_accumulate(self):
        fc = Linear(3, 2)
        x = np.ones((1, 3))
        fc.forward(x)
        fc.backward(np.ones((1, 2)))
        first = fc.grads["W"].copy()
        fc.backward(np.ones((1, 2)))
        assert np.array_equal(fc.grads["W"], 2 * first)
        fc.zero_grad()
        assert not fc.grads["W"].any()


def test_every_layer_matches_finite_differences():
    for name, err, tol in checks.check_layers():
        assert err < tol, name


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(3, 8), st.integers(3, 8), st.integers(0, 10**6))
def test_pointwise_layers_gradients(n, c, h, w, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, c, h, w))
    x[np.abs(x) < 1e-3] = 0.5
    for layer in (ReLU(), Tanh()):
        r = rng.normal(size=x.shape)
        layer.forward(x)
        g = layer.backward(r)
        num = numeric_grad(lambda: float(np.sum(r * layer.fwd(x)[0])), x)
        assert rel_error(g, num) < 1e-6


class TestPooling:
    def test_maxpool_first_max_wins(self):
        mp = MaxPool2d(2, 2)
        x = np.array([[[[1.0, 1.0], [0.0, 1.0]]]])
        assert mp.forward(x).item() == 1.0
        assert mp.backward(np.ones((1, 1, 1, 1))).tolist() == [[[[1.0, 0.0], [0.0, 0.0]]]]

    def test_avgpool_counts_padding(self):
        ap = AvgPool2d(3, 1, pad=1)
        y = ap.forward(np.ones((1, 1, 2, 2)))
        assert np.allclose(y, 4.0 / 9.0)

    def test_maxpool_values(self):
        x = np.arange(16.0).reshape(1, 1, 4, 4)
        assert MaxPool2d(2, 2).forward(x).tolist() == [[[[5.0, 7.0], [13.0, 15.0]]]]


class TestBatchNorm:
    def test_inference_identity_with_unit_stats(self):
        bn = BatchNorm2d(3)
        x = np.random.default_rng(1).normal(size=(2, 3, 4, 4))
        y = bn.forward(x, train=False)
        assert np.allclose(y, x / math.sqrt(1 + bn.eps), rtol=0, atol=1e-15)

    def test_training_normalizes(self):
        bn = BatchNorm2d(2)
        x = np.random.default_rng(2).normal(3.0, 2.0, size=(4, 2, 5, 5))
        y = bn.forward(x)
        assert np.allclose(y.mean(axis=(0, 2, 3)), 0, atol=1e-12)
        assert np.allclose(y.var(axis=(0, 2, 3)), 1, atol=1e-3)

    def test_running_stats_update(self):
        bn = BatchNorm2d(1, momentum=0.9)
        x = np.arange(8.0).reshape(2, 1, 2, 2)
        bn.forward(x)
        assert bn.running_mean[0] == pytest.approx(0.1 * 3.5)
        assert bn.running_var[0] == pytest.approx(0.9 + 0.1 * np.var(np.arange(8.0), ddof=1))

    def test_deterministic(self):
        x = np.random.default_rng(3).normal(size=(2, 3, 4, 4))
        a, b = BatchNorm2d(3), BatchNorm2d(3)
        assert np.array_equal(a.forward(x), b.forward(x))


class TestSoftmax:
    def test_uniform(self):
        loss, _ = softmax_xent(np.zeros((1, 2)), np.array([0]))
        assert loss == pytest.approx(math.log(2), abs=1e-15)

    @pytest.mark.parametrize("k", [2, 3, 7, 10])
    def test_uniform_is_log_k(self, k):
        loss, _ = softmax_xent(np.zeros((3, k)), np.arange(3) % k)
        assert loss == math.log(k)

    def test_saturated(self):
        loss, grad = softmax_xent(np.array([[1000.0, 0.0]]), np.array([0]))
        assert loss == 0.0 and np.all(np.isfinite(grad))

    def test_finite_difference(self):
        rng = np.random.default_rng(4)
        logits = rng.normal(size=(4, 7))
        labels = rng.integers(0, 7, 4)
        _, g = softmax_xent(logits, labels)
        num = numeric_grad(lambda: softmax_xent(logits, labels)[0], logits)
        assert rel_error(g, num) < 1e-6

    def test_label_out_of_range(self):
        with pytest.raises(IndexError):
            softmax_xent(np.zeros((1, 3)), np.array([3]))

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=6), st.integers(0, 5))
    def test_non_negative_and_finite(self, row, label):
        logits = np.array([row])
        loss, grad = softmax_xent(logits, np.array([label % len(row)]))
        assert loss >= 0 and math.isfinite(loss) and np.all(np.isfinite(grad))


class TestSgd:
    def test_schedule(self):
        cfg = SgdConfig(base_lr=0.01, lr_decay_factor=0.1, decay_interval=20000)
        assert cfg.lr_at(0) == 0.01
        assert cfg.lr_at(19999) == 0.01
        assert cfg.lr_at(20000) == pytest.approx(0.001, rel=1e-15)
        assert cfg.lr_at(0, 0.001) == pytest.approx(1e-5, rel=1e-15)

    @pytest.mark.parametrize("kwargs", [dict(base_lr=0), dict(lr_decay_factor=0), dict(lr_decay_factor=1.5),
                                        dict(decay_interval=0), dict(momentum=1.0), dict(weight_decay=-1)])
    def test_validation(self, kwargs):
        with pytest.raises(ConfigError):
            SgdConfig(**kwargs)

    def test_negative_multiplier(self):
        with pytest.raises(ConfigError):
            SgdConfig().lr_at(0, -1)

    def test_momentum_update(self):
        p = {"w": np.array([1.0])}
        opt = SGD(SgdConfig(base_lr=0.1, momentum=0.5))
        opt.step(p, {"w": np.array([1.0])}, 0)
        assert p["w"][0] == pytest.approx(0.9)
        opt.step(p, {"w": np.array([1.0])}, 1)
        assert p["w"][0] == pytest.approx(0.9 - (0.5 * 0.1 + 0.1))

    def test_zero_multiplier_is_bit_exact_noop(self):
        p = {"w": np.array([0.1, 0.2, 0.3])}
        before = p["w"].copy()
        SGD(SgdConfig(weight_decay=0.1)).step(p, {"w": np.ones(3)}, 0, {"w": 0.0})
        assert p["w"].tobytes() == before.tobytes()

    def test_functional_form(self):
        params = {"a": np.array([1.0, 2.0])}
        new, vel = sgd_step(params, {"a": np.array([1.0, -1.0])}, SgdConfig(base_lr=0.5, momentum=0.0), 0)
        assert new["a"].tolist() == [0.5, 2.5]
        assert params["a"].tolist() == [1.0, 2.0]
        assert vel["a"].tolist() == [0.5, -0.5]

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            SGD(SgdConfig()).step({"a": np.zeros(2)}, {"a": np.zeros(3)}, 0)


def test_sequential_chains():
    rng = np.random.default_rng(5)
    seq = Sequential([Conv2d(1, 2, 3, pad=1, rng=rng), ReLU(), GlobalAvgPool(), Linear(2, 3, rng=rng)])
    x = rng.normal(size=(2, 1, 4, 4))
    y = seq.forward(x)
    assert y.shape == (2, 3)
    assert seq.backward(np.ones((2, 3))).shape == x.shape
    assert [n for n, _ in seq.named_layers("m.")] == ["m.0", "m.1", "m.2", "m.3"]
