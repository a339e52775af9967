import math

import numpy as np
import pytest

from fugato import autodiff as ad
from fugato.autodiff import Tensor
from fugato.errors import ConfigError, DataError
from fugato.gradcheck import (
    check_parameter_gradients,
    max_relative_error,
    numeric_gradient,
)
from fugato.nn import Parameter

TOL = 1e-4


@pytest.fixture(autouse=True)
def float64_mode():
    with ad.use_dtype("float64"):
        yield


def weighted_sum(t, rng):
    w = rng.normal(size=t.shape)
    return (t * Tensor(w)).sum()


def assert_gradcheck(loss_fn, named_params):
    errors = check_parameter_gradients(loss_fn, named_params)
    worst = max(errors.values())
    assert worst < TOL, errors


class TestPrimitiveGradients:
    """Every differentiable op against central finite differences."""

    def run(self, build, shapes, seed=0):
        rng = np.random.default_rng(seed)
        params = [Parameter(rng.normal(size=s)) for s in shapes]
        out_probe = {}

        def loss():
            out = build(*params)
            if "w" not in out_probe:
                out_probe["w"] = np.random.default_rng(123).normal(
                    size=out.shape
                )
            return (out * Tensor(out_probe["w"])).sum()

        assert_gradcheck(loss, [(f"p{i}", p) for i, p in enumerate(params)])

    def test_add_broadcast(self):
        self.run(lambda a, b: ad.add(a, b), [(4, 5), (5,)])

    def test_mul_broadcast(self):
        self.run(lambda a, b: ad.mul(a, b), [(4, 5), (4, 1)])

    def test_scale(self):
        self.run(lambda a: ad.scale(a, -2.5), [(3, 3)])

    def test_matmul_batched(self):
        self.run(lambda a, b: ad.matmul(a, b), [(2, 3, 4), (4, 5)])

    def test_reshape_swapaxes_slice(self):
        self.run(lambda a: ad.swapaxes(a.reshape(2, 6), 0, 1)[1:4], [(3, 4)])

    def test_concat(self):
        self.run(lambda a, b: ad.concat([a, b], axis=1), [(2, 3), (2, 4)])

    def test_sum_and_mean(self):
        self.run(lambda a: ad.mean(a, axis=0) + ad.sum_(a, axis=1, keepdims=False)
                 .reshape(1, 4) * 0.0 + ad.mean(a, axis=0), [(4, 4)])

    def test_embedding_lookup(self):
        idx = np.array([[0, 2], [1, 2]])
        self.run(lambda t: ad.embedding_lookup(t, idx), [(3, 5)])

    def test_sigmoid_tanh_gelu(self):
        self.run(lambda a: ad.sigmoid(a) + ad.tanh(a) + ad.gelu(a), [(4, 6)])

    def test_softmax(self):
        self.run(lambda a: ad.softmax(a, axis=-1), [(5, 7)])

    def test_layer_norm(self):
        self.run(lambda x, g, b: ad.layer_norm(x, g, b), [(8, 16), (16,), (16,)])


class TestOpSemantics:
    def test_identity_matmul(self):
        x = np.arange(10, dtype=np.float64).reshape(2, 5)
        out = ad.matmul(Tensor(np.eye(2)), Tensor(x))
        assert np.array_equal(out.data, x)

    def test_softmax_of_zeros_is_uniform(self):
        out = ad.softmax(Tensor(np.zeros(4)))
        assert np.allclose(out.data, 0.25, atol=1e-12)

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        out = ad.softmax(Tensor(rng.normal(size=(6, 9)) * 10))
        assert np.abs(out.data.sum(axis=-1) - 1.0).max() < 1e-6

    def test_shape_mismatch_names_op(self):
        with pytest.raises(DataError, match="add"):
            ad.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))
        with pytest.raises(DataError, match="matmul"):
            ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))

    def test_grad_accumulates_over_reuse(self):
        x = Parameter(np.array([3.0]))
        y = (x * x) + x * Tensor(np.array([2.0]))
        y.backward(np.ones(1))
        assert np.allclose(x.grad, [8.0])  # d(x^2 + 2x)/dx at 3

    def test_no_grad_builds_no_graph(self):
        x = Parameter(np.ones((2, 2)))
        with ad.no_grad():
            y = (x * x).sum()
        assert not y.requires_grad


class TestDropout:
    def test_eval_mode_is_bitwise_identity(self):
        x = Tensor(np.random.default_rng(0).normal(size=(16, 16)))
        out = ad.dropout(x, 0.5, train=False)
        assert out is x

    def test_train_mode_masks_and_rescales(self):
        rng = np.random.default_rng(0)
        x = Tensor(np.ones((2000,)))
        out = ad.dropout(x, 0.25, rng=rng, train=True)
        kept = out.data != 0.0
        assert abs(kept.mean() - 0.75) < 0.05
        assert np.allclose(out.data[kept], 1.0 / 0.75)

    def test_invalid_rate(self):
        with pytest.raises(ConfigError):
            ad.dropout(Tensor(np.ones(3)), 1.0, train=True)

    def test_gradient_uses_same_mask(self):
        x = Parameter(np.ones(64))
        out = ad.dropout(x, 0.5, rng=np.random.default_rng(1), train=True)
        out.sum().backward()
        assert np.array_equal(x.grad != 0.0, out.data != 0.0)


class TestCrossEntropy:
    def test_uniform_logits_give_log_vocab(self):
        loss = ad.softmax_cross_entropy(Tensor(np.zeros((3, 10))),
                                        np.array([0, 5, 9]))
        assert abs(float(loss.data) - math.log(10)) < 1e-12

    def test_ignore_index_contributes_nothing(self):
        rng = np.random.default_rng(0)
        logits = rng.normal(size=(4, 7))
        full = ad.softmax_cross_entropy(Tensor(logits[:2]), np.array([1, 2]))
        padded = ad.softmax_cross_entropy(
            Tensor(logits), np.array([1, 2, -1, -1]), ignore_index=-1
        )
        assert abs(float(full.data) - float(padded.data)) < 1e-12

    def test_ignored_targets_get_zero_gradient(self):
        logits = Parameter(np.random.default_rng(0).normal(size=(3, 5)))
        loss = ad.softmax_cross_entropy(logits, np.array([1, -1, 2]),
                                        ignore_index=-1)
        loss.backward()
        assert np.all(logits.grad[1] == 0.0)

    def test_gradient_is_softmax_minus_onehot(self):
        rng = np.random.default_rng(4)
        logits = Parameter(rng.normal(size=(1, 6)))
        loss = ad.softmax_cross_entropy(logits, np.array([2]))
        loss.backward()
        probs = np.exp(ad.log_softmax_values(logits.data))[0]
        expected = probs.copy()
        expected[2] -= 1.0
        assert np.allclose(logits.grad[0], expected, atol=1e-12)

    def test_out_of_range_target(self):
        with pytest.raises(DataError):
            ad.softmax_cross_entropy(Tensor(np.zeros((1, 4))), np.array([4]))

    def test_all_ignored_is_an_error(self):
        with pytest.raises(DataError):
            ad.softmax_cross_entropy(Tensor(np.zeros((2, 4))),
                                     np.array([-1, -1]), ignore_index=-1)

    def test_finite_difference(self):
        rng = np.random.default_rng(8)
        logits = Parameter(rng.normal(size=(5, 9)))
        targets = np.array([0, 3, -1, 8, 2])

        def loss():
            return ad.softmax_cross_entropy(logits, targets, ignore_index=-1)

        assert_gradcheck(loss, [("logits", logits)])


class TestDtypeControl:
    def test_default_dtype_switch(self):
        assert ad.default_dtype() is np.float64  # fixture
        with ad.use_dtype("float32"):
            assert Tensor(np.zeros(1)).data.dtype == np.float32
        assert Tensor(np.zeros(1)).data.dtype == np.float64

    def test_mask_value_matches_dtype(self):
        with ad.use_dtype("float64"):
            assert ad._mask_value() == -math.inf
        with ad.use_dtype("float32"):
            assert ad._mask_value() == -1e9
