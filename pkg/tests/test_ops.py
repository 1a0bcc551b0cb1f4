"""Tests for differentiable operations."""

import unittest

import numpy as np

from saane import ops
from saane.gradcheck import grad_check
from saane.tensor import Parameter, ShapeError, Tape, as_tensor

from .oracles import conv2d_loops, pool_channel_loops, pool_spatial_loops


def _readout_check(op, *arrays, seed: int = 0) -> float:
    """Get the gradient check error of ``sum(op(*inputs) * r)`` for a random ``r``."""
    rng = np.random.default_rng(seed)
    parameters = [Parameter(f"x{i}", np.asarray(a, dtype=np.float64)) for i, a in enumerate(arrays)]
    shape = op(*[p.value for p in parameters]).shape
    readout = as_tensor(rng.uniform(-1, 1, shape), dtype=np.float64)
    return grad_check(
        lambda: ops.sum_all(ops.mul_broadcast(op(*[p.value for p in parameters]), readout)),
        parameters,
        eps=1e-5,
    )


class TestConvolution(unittest.TestCase):
    """Tests for the zero-padded cross-correlation."""

    def test_oracle(self):
        """Test against nested loops on random small instances."""
        rng = np.random.default_rng(0)
        for trial in range(100):
            k = int(rng.choice([1, 3, 5]))
            c_in, c_out = rng.integers(1, 4, size=2)
            h, w = rng.integers(1, 6, size=2)
            x = rng.uniform(-1, 1, (c_in, h, w))
            weights = rng.uniform(-1, 1, (c_out, c_in, k, k))
            with self.subTest(trial=trial, k=k, shape=(c_in, h, w)):
                expected = conv2d_loops(x, weights, (k - 1) // 2)
                actual = ops.conv2d(
                    as_tensor(x, np.float64), as_tensor(weights, np.float64), (k - 1) // 2
                )
                self.assertEqual(expected.shape, actual.shape)
                self.assertTrue(np.allclose(expected, actual.data, rtol=1e-6, atol=1e-9))

    def test_spatial_filter_shape(self):
        """Test the 7x7 spatial attention filter keeps the map size."""
        x = as_tensor(np.ones((2, 5, 5)))
        out = ops.conv2d(x, as_tensor(np.ones((1, 2, 7, 7))), padding=3)
        self.assertEqual((1, 5, 5), out.shape)
        # the center sees the full 5x5 map in both channels
        self.assertAlmostEqual(50.0, float(out.data[0, 2, 2]))

    def test_gradients(self):
        """Test input, weight, and bias gradients."""
        rng = np.random.default_rng(1)
        for k in (1, 3, 7):
            with self.subTest(k=k):
                x = rng.uniform(-1, 1, (2, 4, 5))
                weights = rng.uniform(-1, 1, (3, 2, k, k))
                bias = rng.uniform(-1, 1, 3)
                error = _readout_check(
                    lambda a, b, c: ops.conv2d(a, b, (k - 1) // 2, bias=c), x, weights, bias
                )
                self.assertLess(error, 1e-6)

    def test_bad_shapes(self):
        """Test rejection of inconsistent shapes."""
        x = as_tensor(np.ones((2, 4, 4)))
        for weights, padding in [
            (np.ones((1, 3, 3, 3)), 1),  # channel mismatch
            (np.ones((1, 2, 3, 3)), 0),  # wrong padding
            (np.ones((1, 2, 2, 2)), 0),  # even kernel
            (np.ones((2, 3, 3)), 1),  # not a filter bank
        ]:
            with self.subTest(shape=weights.shape, padding=padding), self.assertRaises(ShapeError):
                ops.conv2d(x, as_tensor(weights), padding)


class TestPooling(unittest.TestCase):
    """Tests for spatial and channel pooling."""

    def test_oracle(self):
        """Test both poolings against loops on random instances."""
        rng = np.random.default_rng(2)
        for trial in range(100):
            x = rng.uniform(-1, 1, tuple(rng.integers(1, 5, size=3)))
            for mode in ("avg", "max"):
                with self.subTest(trial=trial, mode=mode):
                    spatial = ops.pool_spatial(as_tensor(x, np.float64), mode)
                    channel = ops.pool_channel(as_tensor(x, np.float64), mode)
                    self.assertTrue(np.allclose(pool_spatial_loops(x, mode), spatial.data))
                    self.assertTrue(np.allclose(pool_channel_loops(x, mode), channel.data))

    def test_gradients(self):
        """Test pooling gradients against finite differences."""
        x = np.random.default_rng(3).uniform(-1, 1, (3, 4, 4))
        for mode in ("avg", "max"):
            with self.subTest(mode=mode):
                self.assertLess(_readout_check(lambda a: ops.pool_spatial(a, mode), x), 1e-6)
                self.assertLess(_readout_check(lambda a: ops.pool_channel(a, mode), x), 1e-6)

    def test_invalid_mode(self):
        """Test rejection of unknown reducers."""
        with self.assertRaises(ValueError):
            ops.pool_spatial(as_tensor(np.ones((1, 2, 2))), "median")


class TestElementwise(unittest.TestCase):
    """Tests for elementwise and reduction operations."""

    def test_broadcast(self):
        """Test that vectors scale channels and single-channel maps scale positions."""
        f = np.arange(12, dtype=np.float64).reshape(3, 2, 2)
        v = np.array([1.0, 2.0, 3.0])
        m = np.array([[[1.0, 0.0], [0.0, 2.0]]])
        self.assertTrue(
            np.array_equal(f * v[:, None, None], ops.mul_broadcast(as_tensor(f), as_tensor(v)).data)
        )
        self.assertTrue(np.array_equal(f * m, ops.mul_broadcast(as_tensor(f), as_tensor(m)).data))
        with self.assertRaises(ShapeError):
            ops.add(as_tensor(np.ones(2)), as_tensor(np.ones(3)))

    def test_gradients(self):
        """Test gradients of every elementwise operation."""
        rng = np.random.default_rng(4)
        f = rng.uniform(-1, 1, (3, 2, 2))
        v = rng.uniform(-1, 1, 3)
        m = rng.uniform(-1, 1, (1, 2, 2))
        w = rng.uniform(-1, 1, (2, 3))
        cases = {
            "add": (ops.add, f, v),
            "sub": (ops.sub, f, m),
            "mul": (ops.mul_broadcast, f, v),
            "mul_map": (ops.mul_broadcast, v, m),
            "matvec": (ops.matvec, w, v),
            "sigmoid": (ops.sigmoid, f),
            "relu": (ops.relu, f),
            "scale": (lambda a: ops.scale(a, 3.0), f),
            "add_scalar": (lambda a: ops.add_scalar(a, 3.0), f),
            "concat": (lambda a, b: ops.concat([a, b]), f, m),
            "mean": (ops.mean, f),
            "l2": (ops.l2_distance, f, f[::-1].copy()),
        }
        for name, (op, *arrays) in cases.items():
            with self.subTest(op=name):
                self.assertLess(_readout_check(op, *arrays), 1e-6)

    def test_mlp(self):
        """Test the perceptron against a direct computation."""
        rng = np.random.default_rng(5)
        x, w1, b1, w2, b2 = (
            rng.uniform(-1, 1, s) for s in [(4,), (2, 4), (2,), (4, 2), (4,)]
        )
        expected = w2 @ np.maximum(w1 @ x + b1, 0) + b2
        actual = ops.mlp2(*(as_tensor(a, np.float64) for a in (x, w1, b1, w2, b2)))
        self.assertTrue(np.allclose(expected, actual.data))
        self.assertLess(_readout_check(ops.mlp2, x, w1, b1, w2, b2), 1e-6)

    def test_stable_sigmoid(self):
        """Test the logistic function at extreme values."""
        out = ops.stable_sigmoid(np.array([-1000.0, 0.0, 1000.0]))
        self.assertTrue(np.all(np.isfinite(out)))
        self.assertTrue(np.allclose([0.0, 0.5, 1.0], out))

    def test_sigmoid_open_interval(self):
        """Test the logistic function never reaches 0 or 1, in either precision."""
        for dtype in (np.float32, np.float64):
            with self.subTest(dtype=dtype):
                logits = np.array([-1000.0, -40.0, 20.0, 40.0, 1000.0], dtype=dtype)
                out = ops.stable_sigmoid(logits)
                self.assertEqual(dtype, out.dtype)
                self.assertTrue(np.all((out > 0) & (out < 1)))
                self.assertEqual(np.nextafter(dtype(1), dtype(0)), out[-1])

    def test_l2_zero(self):
        """Test that the distance gradient is zero for identical inputs."""
        a = Parameter("a", np.ones(3))
        with Tape() as tape:
            loss = ops.l2_distance(a.value, as_tensor(np.ones(3), np.float64))
        tape.backward(loss)
        self.assertEqual(0.0, loss.item())
        self.assertTrue(np.array_equal(np.zeros(3), a.grad))

    def test_stack(self):
        """Test collecting scalars into a vector."""
        scalars = [as_tensor(np.asarray(float(i))) for i in range(3)]
        self.assertTrue(np.array_equal([0.0, 1.0, 2.0], ops.stack(scalars).data))
        with self.assertRaises(ShapeError):
            ops.stack([as_tensor(np.ones(2))])
