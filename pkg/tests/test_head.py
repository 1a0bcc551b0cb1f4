"""Tests for spatial pyramid pooling and embedding normalization."""

import unittest

import numpy as np

from saane import ops
from saane.config import RunConfig
from saane.gradcheck import grad_check
from saane.head import DegenerateEmbeddingError, bin_edges, embed, normalize_scale, spp
from saane.network import SAANE
from saane.tensor import Parameter, ShapeError, as_tensor

from .oracles import spp_loops


class TestPyramid(unittest.TestCase):
    """Tests for spatial pyramid pooling."""

    def test_bin_edges(self):
        """Test that bins tile the extent exactly."""
        for extent in range(1, 12):
            for level in range(1, extent + 1):
                with self.subTest(extent=extent, level=level):
                    edges = bin_edges(extent, level)
                    self.assertEqual(level, len(edges))
                    self.assertEqual(0, edges[0][0])
                    self.assertEqual(extent, edges[-1][1])
                    for (_, stop), (start, _) in zip(edges, edges[1:]):
                        self.assertEqual(stop, start)
                    self.assertTrue(all(stop > start for start, stop in edges))

    def test_small_example(self):
        """Test a hand-checkable two-channel map."""
        f = np.arange(32, dtype=np.float64).reshape(2, 4, 4)
        out = spp(as_tensor(f, np.float64), [2, 1], "max").data
        # level 2: four bins (row-major), each with both channels, then level 1
        expected = [5, 21, 7, 23, 13, 29, 15, 31, 15, 31]
        self.assertTrue(np.array_equal(expected, out))

    def test_oracle(self):
        """Test against bin enumeration on random instances."""
        rng = np.random.default_rng(0)
        for trial in range(100):
            c = int(rng.integers(1, 4))
            h, w = rng.integers(1, 9, size=2)
            levels = [int(level) for level in rng.integers(1, min(h, w) + 1, size=rng.integers(1, 4))]
            f = rng.uniform(-1, 1, (c, h, w))
            for mode in ("avg", "max"):
                with self.subTest(trial=trial, mode=mode, levels=levels, shape=f.shape):
                    out = spp(as_tensor(f, np.float64), levels, mode)
                    self.assertEqual((c * sum(level**2 for level in levels),), out.shape)
                    self.assertTrue(np.allclose(spp_loops(f, levels, mode), out.data, rtol=1e-6))

    def test_gradients(self):
        """Test pooling gradients for uneven bins."""
        rng = np.random.default_rng(1)
        for mode in ("avg", "max"):
            with self.subTest(mode=mode):
                f = Parameter("f", rng.uniform(-1, 1, (2, 5, 7)))
                readout = as_tensor(rng.uniform(-1, 1, 2 * (9 + 4 + 1)), np.float64)
                error = grad_check(
                    lambda: ops.sum_all(ops.mul_broadcast(spp(f.value, [3, 2, 1], mode), readout)),
                    [f],
                    eps=1e-5,
                )
                self.assertLess(error, 1e-6)

    def test_level_too_large(self):
        """Test rejection of a level beyond the spatial extent."""
        with self.assertRaises(ShapeError):
            spp(as_tensor(np.ones((1, 3, 5))), [4, 1])


class TestNormalize(unittest.TestCase):
    """Tests for scaling embeddings to a fixed norm."""

    def test_norm(self):
        """Test the output norm."""
        rng = np.random.default_rng(2)
        for alpha in (1.0, 10.0):
            with self.subTest(alpha=alpha):
                v = normalize_scale(as_tensor(rng.normal(size=30), np.float64), alpha)
                self.assertAlmostEqual(alpha, float(np.linalg.norm(v.data)), places=9)

    def test_direction(self):
        """Test that normalization keeps the direction."""
        v = normalize_scale(as_tensor(np.array([3.0, 4.0]), np.float64), 10.0)
        self.assertTrue(np.allclose([6.0, 8.0], v.data))

    def test_degenerate(self):
        """Test that a zero vector cannot be normalized."""
        with self.assertRaises(DegenerateEmbeddingError):
            normalize_scale(as_tensor(np.zeros(4)))

    def test_gradients(self):
        """Test the normalization gradient."""
        rng = np.random.default_rng(3)
        v = Parameter("v", rng.uniform(-1, 1, 6))
        readout = as_tensor(rng.uniform(-1, 1, 6), np.float64)
        error = grad_check(
            lambda: ops.sum_all(ops.mul_broadcast(normalize_scale(v.value, 10.0), readout)),
            [v],
            eps=1e-5,
        )
        self.assertLess(error, 1e-6)


class TestEmbed(unittest.TestCase):
    """Tests for the full embedding pipeline."""

    def test_default_shape(self):
        """Test the default configuration gives 7680-dimensional embeddings of norm 10."""
        config = RunConfig()
        self.assertEqual(7680, config.embedding_dim)
        rng = np.random.default_rng(4)
        model = SAANE(config, rng=rng)
        embedding = embed(
            rng.uniform(0, 1, (1024, 8, 8)).astype(np.float32),
            rng.uniform(0, 1, (512, 8, 8)).astype(np.float32),
            model,
            source_id=3,
        )
        self.assertEqual(7680, len(embedding))
        self.assertEqual(3, embedding.source_id)
        self.assertAlmostEqual(10.0, embedding.norm, delta=1e-4)

    def test_toy_norms(self):
        """Test that every embedding has norm alpha within a tight tolerance."""
        config = RunConfig.toy()
        rng = np.random.default_rng(5)
        model = SAANE(config, rng=rng)
        for trial in range(20):
            with self.subTest(trial=trial):
                embedding = embed(
                    rng.uniform(-1, 1, (16, 6, 6)), rng.uniform(-1, 1, (12, 6, 6)), model
                )
                self.assertEqual(config.embedding_dim, len(embedding))
                self.assertAlmostEqual(1.0, embedding.norm / config.alpha, delta=1e-5)
