#!/usr/bin/env python3
"""
Unit tests for the autodiff engine

Tests cover:
- Tensor storage and the backward pass
- Forward values of every layer op
- Finite-difference gradients of every op in double precision
"""

import math
import sys
import unittest
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent.parent))

from megspike.lib.common import InvalidArgumentError, InvalidStateError
from megspike.lib.tensor import (
    BatchNormState,
    Tensor,
    backward,
    batchnorm,
    bce_loss,
    conv_time,
    dropout,
    leaky_relu,
    linear,
    maxpool_time,
    sigmoid,
)
from tests.gradcheck import check_op


def _row(values):
    """[1, 1, nt] tensor holding a single sensor row"""
    return Tensor(np.asarray(values, dtype=np.float32).reshape(1, 1, -1))


def _kernel(taps):
    return Tensor(np.asarray(taps, dtype=np.float32).reshape(1, 1, 1, 5))


class TestTensor(unittest.TestCase):
    """Test Tensor storage and backward"""

    def test_item_of_scalar(self):
        """Test item() reads a one-element tensor of any rank"""
        self.assertEqual(Tensor(np.array([[2.5]])).item(), 2.5)

    def test_item_rejects_non_scalar(self):
        """Test item() on several elements raises instead of returning nan"""
        with self.assertRaises(InvalidArgumentError):
            Tensor(np.array([1.0, 2.0])).item()
        with self.assertRaises(InvalidArgumentError):
            Tensor(np.zeros((0,))).item()

    def test_default_dtype_is_float32(self):
        """Test python lists are stored as float32"""
        self.assertEqual(Tensor([1, 2, 3]).dtype, np.float32)

    def test_float64_is_preserved(self):
        """Test float64 arrays keep their precision"""
        self.assertEqual(Tensor(np.zeros(3)).dtype, np.float64)

    def test_sum_gradient_is_ones(self):
        """Test d(sum x)/dx = 1 for any shape"""
        x = Tensor(np.random.default_rng(0).standard_normal((2, 3, 4)), requires_grad=True)
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))

    def test_sigmoid_gradient_at_zero(self):
        """Test d sigmoid(w)/dw = 0.25 at w=0"""
        w = Tensor(np.zeros(1), requires_grad=True)
        sigmoid(w).sum().backward()
        self.assertAlmostEqual(float(w.grad[0]), 0.25, places=12)

    def test_backward_releases_graph(self):
        """Test creators are dropped after backward"""
        x = Tensor(np.ones(3), requires_grad=True)
        y = leaky_relu(x)
        loss = y.sum()
        loss.backward()
        self.assertIsNone(loss.creator)
        self.assertIsNone(y.creator)

    def test_backward_on_unconnected_tensor(self):
        """Test backward on a constant gives no gradients and no error"""
        x = Tensor(np.ones(3))
        loss = x.sum()
        backward(loss)
        self.assertIsNone(x.grad)

    def test_gradients_accumulate(self):
        """Test two backward passes add into .grad"""
        x = Tensor(np.ones(2), requires_grad=True)
        x.sum().backward()
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, [2.0, 2.0])

    def test_shared_input_gradient(self):
        """Test a tensor used twice receives both contributions"""
        x = Tensor(np.array([3.0]), requires_grad=True)
        (x * x).sum().backward()
        self.assertAlmostEqual(float(x.grad[0]), 6.0)


class TestConvTime(unittest.TestCase):
    """Test per-sensor temporal convolution"""

    def test_zero_input(self):
        """Test zero input and zero bias give zero output"""
        rng = np.random.default_rng(1)
        x = Tensor(np.zeros((3, 4, 10), dtype=np.float32))
        w = Tensor(rng.standard_normal((8, 3, 1, 5)).astype(np.float32))
        out = conv_time(x, w, Tensor(np.zeros(8, dtype=np.float32)))
        self.assertEqual(out.shape, (8, 4, 10))
        self.assertFalse(out.values.any())

    def test_identity_kernel(self):
        """Test the centre tap reproduces the input"""
        out = conv_time(_row([1, 2, 3, 4, 5, 6]), _kernel([0, 0, 1, 0, 0]), Tensor(np.zeros(1)))
        np.testing.assert_array_equal(out.values.ravel(), [1, 2, 3, 4, 5, 6])

    def test_box_kernel_with_zero_padding(self):
        """Test a box kernel over ones sees the zero padding at both edges"""
        out = conv_time(_row([1] * 6), _kernel([1] * 5), Tensor(np.zeros(1)))
        np.testing.assert_array_equal(out.values.ravel(), [3, 4, 5, 5, 4, 3])

    def test_batched_input(self):
        """Test [B, C, ns, nt] input keeps the batch axis"""
        x = Tensor(np.ones((2, 1, 3, 7), dtype=np.float32))
        out = conv_time(x, Tensor(np.ones((4, 1, 1, 5), dtype=np.float32)), Tensor(np.zeros(4)))
        self.assertEqual(out.shape, (2, 4, 3, 7))

    def test_rows_do_not_mix(self):
        """Test changing one sensor row leaves other output rows bit-identical"""
        rng = np.random.default_rng(2)
        x = rng.standard_normal((2, 5, 12)).astype(np.float32)
        w = Tensor(rng.standard_normal((3, 2, 1, 5)).astype(np.float32))
        b = Tensor(rng.standard_normal(3).astype(np.float32))
        before = conv_time(Tensor(x), w, b).values
        x[:, 3, :] += 1.0
        after = conv_time(Tensor(x), w, b).values
        np.testing.assert_array_equal(np.delete(before, 3, axis=1), np.delete(after, 3, axis=1))
        self.assertFalse(np.array_equal(before[:, 3], after[:, 3]))

    def test_channel_mismatch(self):
        """Test kernels with the wrong input channel count are rejected"""
        with self.assertRaises(InvalidArgumentError):
            conv_time(Tensor(np.ones((2, 3, 6))), Tensor(np.ones((4, 1, 1, 5))), Tensor(np.zeros(4)))

    def test_kernel_width_must_be_five(self):
        """Test kernels that are not 1 x 5 are rejected"""
        with self.assertRaises(InvalidArgumentError):
            conv_time(_row([1, 2, 3]), Tensor(np.ones((1, 1, 1, 3))), Tensor(np.zeros(1)))


class TestBatchNorm(unittest.TestCase):
    """Test batch normalization"""

    def test_constant_input_train(self):
        """Test a constant channel normalizes to zero"""
        x = Tensor(np.full((4, 2, 3, 5), 7.0, dtype=np.float32))
        out = batchnorm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), BatchNormState.fresh(2), train=True)
        self.assertLessEqual(np.abs(out.values).max(), 1e-3)

    def test_affine_of_standardized_input(self):
        """Test input with batch mean 0 and variance 1 maps to 2x + 1"""
        rng = np.random.default_rng(3)
        raw = rng.standard_normal((8, 1, 4, 6))
        raw = (raw - raw.mean()) / raw.std()
        out = batchnorm(Tensor(raw), Tensor(np.array([2.0])), Tensor(np.array([1.0])),
                        BatchNormState.fresh(1, np.float64), train=True)
        np.testing.assert_allclose(out.values, 2 * raw + 1, atol=1e-4)

    def test_zero_gamma_gives_beta(self):
        """Test gamma = 0 outputs beta everywhere"""
        x = Tensor(np.random.default_rng(4).standard_normal((3, 2, 2, 4)))
        beta = np.array([0.5, -1.5])
        out = batchnorm(x, Tensor(np.zeros(2)), Tensor(beta), BatchNormState.fresh(2, np.float64), train=True)
        np.testing.assert_allclose(out.values, np.broadcast_to(beta.reshape(1, 2, 1, 1), x.shape))

    def test_running_stats_update(self):
        """Test running stats move by momentum 0.1 towards batch mean and unbiased variance"""
        x = np.random.default_rng(5).standard_normal((4, 1, 2, 3))
        state = BatchNormState.fresh(1, np.float64)
        batchnorm(Tensor(x), Tensor(np.ones(1)), Tensor(np.zeros(1)), state, train=True)
        self.assertAlmostEqual(float(state.running_mean[0]), 0.1 * x.mean(), places=10)
        self.assertAlmostEqual(float(state.running_var[0]), 0.9 + 0.1 * x.var(ddof=1), places=10)

    def test_eval_uses_running_stats(self):
        """Test eval mode normalizes with the stored statistics only"""
        state = BatchNormState(np.array([1.0]), np.array([4.0]))
        x = Tensor(np.full((2, 1, 1, 3), 5.0))
        out = batchnorm(x, Tensor(np.ones(1)), Tensor(np.zeros(1)), state, train=False)
        np.testing.assert_allclose(out.values, (5.0 - 1.0) / math.sqrt(4.0 + 1e-5))
        self.assertEqual(float(state.running_mean[0]), 1.0)

    def test_eval_without_running_stats(self):
        """Test eval mode on an uninitialized state raises InvalidStateError"""
        with self.assertRaises(InvalidStateError):
            batchnorm(Tensor(np.ones((2, 1, 1, 3))), Tensor(np.ones(1)), Tensor(np.zeros(1)),
                      BatchNormState(), train=False)

    def test_first_update_initializes_state(self):
        """Test a bare state takes the first batch statistics"""
        state = BatchNormState()
        x = np.arange(6, dtype=np.float64).reshape(2, 1, 1, 3)
        batchnorm(Tensor(x), Tensor(np.ones(1)), Tensor(np.zeros(1)), state, train=True)
        self.assertTrue(state.initialized)
        self.assertAlmostEqual(float(state.running_mean[0]), 2.5)

    def test_train_needs_two_elements(self):
        """Test train mode rejects a single element per channel"""
        with self.assertRaises(InvalidArgumentError):
            batchnorm(Tensor(np.ones((1, 2))), Tensor(np.ones(2)), Tensor(np.zeros(2)),
                      BatchNormState.fresh(2), train=True)


class TestPointwiseOps(unittest.TestCase):
    """Test leaky ReLU, max pooling, linear, sigmoid, dropout and BCE"""

    def test_leaky_relu_values(self):
        """Test x >= 0 passes and x < 0 is scaled by 0.01"""
        out = leaky_relu(Tensor(np.array([5.0, -1.0, 0.0])))
        np.testing.assert_allclose(out.values, [5.0, -0.01, 0.0])

    def test_maxpool_pairs(self):
        """Test pairwise maxima with stride 2"""
        np.testing.assert_array_equal(maxpool_time(_row([1, 3, 2, 5])).values.ravel(), [3, 5])

    def test_maxpool_lengths(self):
        """Test 30 -> 15 -> 7"""
        x = _row(np.arange(30))
        once = maxpool_time(x)
        self.assertEqual(once.shape[-1], 15)
        self.assertEqual(maxpool_time(once).shape[-1], 7)

    def test_maxpool_constant_row(self):
        """Test a constant row stays constant at half length"""
        np.testing.assert_array_equal(maxpool_time(_row([2.0] * 6)).values.ravel(), [2.0] * 3)

    def test_maxpool_tie_routes_to_first(self):
        """Test gradient goes to the first maximum on ties"""
        x = Tensor(np.array([[[4.0, 4.0, 1.0, 2.0]]]), requires_grad=True)
        maxpool_time(x).sum().backward()
        np.testing.assert_array_equal(x.grad.ravel(), [1.0, 0.0, 0.0, 1.0])

    def test_maxpool_too_short(self):
        """Test nt < 2 is rejected"""
        with self.assertRaises(InvalidArgumentError):
            maxpool_time(_row([1.0]))

    def test_linear_values(self):
        """Test y = x W^T + b by hand"""
        out = linear(Tensor(np.array([[1.0, 2.0]])), Tensor(np.array([[1.0, 1.0]])), Tensor(np.array([1.0])))
        np.testing.assert_array_equal(out.values, [[4.0]])

    def test_linear_identity_and_zero(self):
        """Test identity weights copy the input and zero input returns the bias"""
        x = np.array([[0.5, -2.0, 3.0]])
        out = linear(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3)))
        np.testing.assert_array_equal(out.values, x)
        out = linear(Tensor(np.zeros((1, 3))), Tensor(np.eye(3)), Tensor(np.array([1.0, 2.0, 3.0])))
        np.testing.assert_array_equal(out.values, [[1.0, 2.0, 3.0]])

    def test_linear_mismatch(self):
        """Test input width must match the weight"""
        with self.assertRaises(InvalidArgumentError):
            linear(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))), Tensor(np.zeros(4)))

    def test_sigmoid_values(self):
        """Test sigmoid at 0, ln 3 and saturation"""
        out = sigmoid(Tensor(np.array([0.0, math.log(3.0), 40.0, -88.0], dtype=np.float32)))
        self.assertEqual(float(out.values[0]), 0.5)
        self.assertAlmostEqual(float(out.values[1]), 0.75, places=6)
        self.assertEqual(float(out.values[2]), 1.0)
        self.assertTrue(np.all(np.isfinite(out.values)))

    def test_dropout_identity_cases(self):
        """Test p = 0 in train mode and any p in eval mode are identity"""
        x = Tensor(np.ones(10))
        self.assertIs(dropout(x, 0.0, True, np.random.default_rng(0)), x)
        self.assertIs(dropout(x, 0.5, False), x)

    def test_dropout_expectation(self):
        """Test inverted dropout keeps the mean at 1"""
        out = dropout(Tensor(np.ones(100000)), 0.3, True, np.random.default_rng(6))
        self.assertGreaterEqual(out.values.mean(), 0.99)
        self.assertLessEqual(out.values.mean(), 1.01)
        survivors = out.values[out.values > 0]
        np.testing.assert_allclose(survivors, 1.0 / 0.7, rtol=1e-6)

    def test_dropout_invalid_p(self):
        """Test p >= 1 is rejected"""
        with self.assertRaises(InvalidArgumentError):
            dropout(Tensor(np.ones(3)), 1.0, True, np.random.default_rng(0))

    def test_dropout_needs_rng_in_train(self):
        """Test train mode without a generator is rejected"""
        with self.assertRaises(InvalidArgumentError):
            dropout(Tensor(np.ones(3)), 0.3, True)

    def test_bce_values(self):
        """Test closed-form BCE values including the clamp"""
        self.assertAlmostEqual(bce_loss(Tensor(np.array([0.5])), [1]).item(), math.log(2), places=6)
        self.assertAlmostEqual(bce_loss(Tensor(np.array([0.9, 0.1])), [1, 0]).item(), -math.log(0.9), places=6)
        clamped = bce_loss(Tensor(np.array([1.0])), [1]).item()
        self.assertTrue(math.isfinite(clamped))
        self.assertAlmostEqual(clamped, 1e-7, delta=1e-8)

    def test_bce_no_gradient_where_clamped(self):
        """Test probabilities outside the clamp interval get a zero gradient"""
        p = Tensor(np.array([0.0, 1.0, 0.5]), requires_grad=True)
        bce_loss(p, [1, 0, 1]).backward()
        self.assertEqual(float(p.grad[0]), 0.0)
        self.assertEqual(float(p.grad[1]), 0.0)
        self.assertAlmostEqual(float(p.grad[2]), -2.0 / 3.0, places=12)

    def test_bce_rejects_bad_labels(self):
        """Test labels outside {0, 1} are rejected"""
        with self.assertRaises(InvalidArgumentError):
            bce_loss(Tensor(np.array([0.5, 0.5])), [1, 2])


class TestGradients(unittest.TestCase):
    """Test analytic gradients against central finite differences"""

    def setUp(self):
        self.rng = np.random.default_rng(7)

    def _away_from_zero(self, shape):
        x = self.rng.uniform(0.1, 1.0, size=shape)
        return x * self.rng.choice([-1.0, 1.0], size=shape)

    def test_conv_time(self):
        """Test conv_time gradients for input, kernels and bias"""
        r = self.rng.standard_normal((2, 3, 2, 6))
        check_op(self, lambda x, w, b: (conv_time(x, w, b) * r).sum(),
                 [self.rng.standard_normal((2, 2, 2, 6)), self.rng.standard_normal((3, 2, 1, 5)),
                  self.rng.standard_normal(3)])

    def test_batchnorm_train(self):
        """Test batchnorm gradients with batch statistics"""
        r = self.rng.standard_normal((3, 2, 2, 4))
        check_op(self, lambda x, g, b: (batchnorm(x, g, b, BatchNormState.fresh(2, np.float64), True) * r).sum(),
                 [self.rng.standard_normal((3, 2, 2, 4)), self.rng.uniform(0.5, 1.5, 2), self.rng.standard_normal(2)])

    def test_batchnorm_eval(self):
        """Test batchnorm gradients with running statistics"""
        r = self.rng.standard_normal((2, 2, 1, 3))
        state = BatchNormState(np.array([0.2, -0.1]), np.array([1.5, 0.7]))
        check_op(self, lambda x, g, b: (batchnorm(x, g, b, state, False) * r).sum(),
                 [self.rng.standard_normal((2, 2, 1, 3)), self.rng.uniform(0.5, 1.5, 2), self.rng.standard_normal(2)])

    def test_leaky_relu(self):
        """Test leaky ReLU gradients away from the kink"""
        r = self.rng.standard_normal((3, 5))
        check_op(self, lambda x: (leaky_relu(x) * r).sum(), [self._away_from_zero((3, 5))])

    def test_maxpool_time(self):
        """Test max-pool gradients with distinct pair values"""
        values = self.rng.permutation(24).reshape(2, 3, 4) * 0.01
        r = self.rng.standard_normal((2, 3, 2))
        check_op(self, lambda x: (maxpool_time(x) * r).sum(), [values])

    def test_linear(self):
        """Test linear gradients"""
        r = self.rng.standard_normal((4, 3))
        check_op(self, lambda x, w, b: (linear(x, w, b) * r).sum(),
                 [self.rng.standard_normal((4, 5)), self.rng.standard_normal((3, 5)), self.rng.standard_normal(3)])

    def test_sigmoid(self):
        """Test sigmoid gradients"""
        r = self.rng.standard_normal(6)
        check_op(self, lambda x: (sigmoid(x) * r).sum(), [self.rng.standard_normal(6) * 3])

    def test_dropout(self):
        """Test dropout gradients with a fixed mask"""
        r = self.rng.standard_normal(12)
        check_op(self, lambda x: (dropout(x, 0.3, True, np.random.default_rng(11)) * r).sum(),
                 [self.rng.standard_normal(12)])

    def test_bce_loss(self):
        """Test BCE gradients inside the clamp range"""
        labels = np.array([1, 0, 1, 0, 1])
        check_op(self, lambda p: bce_loss(p, labels), [self.rng.uniform(0.05, 0.95, 5)])

    def test_reshape_and_sum(self):
        """Test structural helpers"""
        r = self.rng.standard_normal((3, 4))
        check_op(self, lambda x: (x.reshape(3, 4) * r).sum(axis=1).sum(), [self.rng.standard_normal((2, 6))])

    def test_composed_ops(self):
        """Test a small conv -> bn -> leaky -> pool -> linear -> sigmoid -> bce stack"""
        labels = np.array([1, 0])

        def loss(x, w, b, g, beta, fw, fb):
            h = conv_time(x, w, b)
            h = batchnorm(h, g, beta, BatchNormState.fresh(2, np.float64), True)
            h = maxpool_time(leaky_relu(h))
            return bce_loss(sigmoid(linear(h.reshape(2, 2 * 2 * 3), fw, fb)).reshape(2), labels)

        check_op(self, loss, [self.rng.standard_normal((2, 1, 2, 6)), self.rng.standard_normal((2, 1, 1, 5)),
                              self.rng.standard_normal(2), self.rng.uniform(0.5, 1.5, 2), self.rng.standard_normal(2),
                              self.rng.standard_normal((1, 12)) * 0.5, self.rng.standard_normal(1)])


if __name__ == '__main__':
    unittest.main()
