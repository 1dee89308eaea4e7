#!/usr/bin/env python3
"""
Unit tests for Adam and Xavier initialization
"""

import sys
import unittest
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent.parent))

from megspike.lib.common import InvalidArgumentError
from megspike.lib.optim import Adam, AdamState, adam_step, xavier_bound, xavier_init, zeros_init
from megspike.lib.tensor import Tensor


class TestAdam(unittest.TestCase):
    """Test the Adam update rule"""

    def test_zero_gradient_leaves_params(self):
        """Test a zero gradient on the first step changes nothing"""
        w = np.array([1.0, -2.0, 3.0])
        adam_step({"w": w}, {"w": np.zeros(3)}, AdamState())
        np.testing.assert_array_equal(w, [1.0, -2.0, 3.0])

    def test_first_step_magnitude(self):
        """Test the bias-corrected first step moves by lr"""
        w = np.array([1.0])
        state = adam_step({"w": w}, {"w": np.array([1.0])}, AdamState())
        self.assertAlmostEqual(float(w[0]), 0.999, places=7)
        self.assertEqual(state.step_count, 1)

    def test_step_sign_follows_gradient(self):
        """Test each coordinate moves against its gradient"""
        w = np.zeros(2)
        adam_step({"w": w}, {"w": np.array([5.0, -0.1])}, AdamState(lr=0.01))
        np.testing.assert_allclose(w, [-0.01, 0.01], rtol=1e-6)

    def test_missing_gradient_counts_as_zero(self):
        """Test parameters without a gradient are stepped with zero"""
        w, b = np.ones(2), np.ones(1)
        state = adam_step({"w": w, "b": b}, {"w": np.ones(2)}, AdamState())
        np.testing.assert_array_equal(b, [1.0])
        self.assertIn("b", state.m)

    def test_optimizer_skips_tensors_without_gradient(self):
        """Test a tensor whose gradient is cleared stops moving on later steps"""
        w = Tensor(np.array([1.0, 1.0]), requires_grad=True)
        b = Tensor(np.array([1.0]), requires_grad=True)
        opt = Adam({"w": w, "b": b}, lr=0.1)
        w.grad, b.grad = np.ones(2), np.ones(1)
        opt.step()
        moved = b.values.copy()
        self.assertLess(float(moved[0]), 1.0)
        m_before = opt.state.m["b"].copy()
        for _ in range(3):
            opt.zero_grad()
            w.grad = np.ones(2)
            opt.step()
        np.testing.assert_array_equal(b.values, moved)
        np.testing.assert_array_equal(opt.state.m["b"], m_before)
        self.assertLess(float(w.values[0]), float(moved[0]))

    def test_optimizer_step_without_any_gradient(self):
        """Test a step with no gradients at all changes nothing"""
        w = Tensor(np.array([2.0]), requires_grad=True)
        opt = Adam({"w": w})
        opt.step()
        np.testing.assert_array_equal(w.values, [2.0])
        self.assertEqual(opt.state.step_count, 0)

    def test_shape_mismatch_leaves_everything_untouched(self):
        """Test a bad gradient shape raises before any update"""
        w, b = np.ones(2), np.ones(3)
        state = AdamState()
        with self.assertRaises(InvalidArgumentError):
            adam_step({"w": w, "b": b}, {"w": np.ones(2), "b": np.ones(2)}, state)
        np.testing.assert_array_equal(w, [1.0, 1.0])
        self.assertEqual(state.step_count, 0)
        self.assertEqual(state.m, {})

    def test_minimizes_quadratic(self):
        """Test Adam drives (w - 3)^2 towards its minimum"""
        w = Tensor(np.array([0.0]), requires_grad=True)
        opt = Adam({"w": w}, lr=0.1)
        for _ in range(300):
            opt.zero_grad()
            d = w + (-3.0)
            (d * d).sum().backward()
            opt.step()
        self.assertAlmostEqual(float(w.values[0]), 3.0, delta=0.05)

    def test_float32_params_stay_float32(self):
        """Test updates keep the parameter dtype"""
        w = np.ones(4, dtype=np.float32)
        adam_step({"w": w}, {"w": np.ones(4)}, AdamState())
        self.assertEqual(w.dtype, np.float32)


class TestXavier(unittest.TestCase):
    """Test Xavier uniform initialization"""

    def test_bound(self):
        """Test fan_in = fan_out = 3 gives bound 1"""
        self.assertEqual(xavier_bound(3, 3), 1.0)

    def test_samples_within_bound_and_variance(self):
        """Test samples stay inside the bound with variance bound^2 / 3"""
        w = xavier_init((1000, 100), 3, 3, np.random.default_rng(0), dtype=np.float64)
        self.assertLessEqual(np.abs(w.values).max(), 1.0)
        self.assertAlmostEqual(float(w.values.var()), 1.0 / 3.0, delta=0.05 / 3.0)
        self.assertTrue(w.requires_grad)

    def test_deterministic(self):
        """Test equal seeds give equal weights"""
        a = xavier_init((4, 5), 5, 4, np.random.default_rng(9))
        b = xavier_init((4, 5), 5, 4, np.random.default_rng(9))
        np.testing.assert_array_equal(a.values, b.values)

    def test_invalid_fans(self):
        """Test non-positive fans are rejected"""
        with self.assertRaises(InvalidArgumentError):
            xavier_init((2, 2), 0, 2, np.random.default_rng(0))

    def test_zeros(self):
        """Test zero init is trainable and zero"""
        b = zeros_init((3,))
        self.assertTrue(b.requires_grad)
        self.assertFalse(b.values.any())


if __name__ == '__main__':
    unittest.main()
