"""Tests for the assembled network and its variants."""

import unittest

import numpy as np

from saane.config import RunConfig
from saane.network import SAANE, VARIANTS, ArchitectureMismatchError
from saane.tensor import as_tensor


class TestNetwork(unittest.TestCase):
    """Tests for the assembled network."""

    def setUp(self) -> None:
        """Set up a toy configuration and inputs."""
        self.config = RunConfig.toy()
        rng = np.random.default_rng(0)
        self.f_a = as_tensor(rng.uniform(-1, 1, (16, 4, 4)))
        self.f_s = as_tensor(rng.uniform(-1, 1, (12, 4, 4)))

    def test_census(self):
        """Test the parameter census of the full model."""
        census = dict(SAANE(self.config).census())
        self.assertEqual(
            {
                "fusion1.proj_a": (8, 16, 1, 1),
                "fusion1.proj_s": (8, 12, 1, 1),
                "attention.mlp.w1": (4, 8),
                "attention.mlp.b1": (4,),
                "attention.mlp.w2": (8, 4),
                "attention.mlp.b2": (8,),
                "attention.conv_a": (1, 2, 7, 7),
                "attention.conv_s": (1, 2, 7, 7),
                "fusion2.proj_a": (8, 8, 1, 1),
                "fusion2.proj_s": (8, 8, 1, 1),
            },
            census,
        )

    def test_variants(self):
        """Test each variant builds, embeds, and has its own census."""
        digests = set()
        for name in VARIANTS:
            with self.subTest(variant=name):
                config = self.config.with_variant(name)
                model = SAANE(config)
                out, maps = model.forward_with_maps(self.f_a, self.f_s)
                self.assertEqual((config.embedding_dim,), out.shape)
                self.assertEqual(config.use_attention, maps is not None)
                names = {name for name, _ in model.census()}
                self.assertEqual(config.use_semantic, "fusion1.proj_s" in names)
                self.assertEqual(config.use_attention, "fusion2.proj_a" in names)
                digests.add(model.architecture_digest())
        self.assertEqual(len(VARIANTS), len(digests))

    def test_unknown_variant(self):
        """Test rejection of an unknown variant."""
        with self.assertRaises(ValueError):
            self.config.with_variant("nope")

    def test_appearance_only_ignores_semantic(self):
        """Test that appearance-only variants do not read the semantic map."""
        model = SAANE(self.config.with_variant("app"))
        self.assertTrue(
            np.array_equal(model.forward(self.f_a, self.f_s).data, model.forward(self.f_a, None).data)
        )

    def test_seeded_initialization(self):
        """Test that the seed fully determines the initial parameters."""
        a, b = SAANE(self.config).state_dict(), SAANE(self.config).state_dict()
        c = SAANE(self.config.model_copy(update=dict(seed=1))).state_dict()
        self.assertTrue(all(np.array_equal(a[name], b[name]) for name in a))
        self.assertFalse(all(np.array_equal(a[name], c[name]) for name in a))

    def test_state_round_trip(self):
        """Test loading the parameters of another network."""
        source = SAANE(self.config.model_copy(update=dict(seed=1)))
        target = SAANE(self.config)
        target.load_state_dict(source.state_dict())
        self.assertTrue(
            np.array_equal(
                source.forward(self.f_a, self.f_s).data, target.forward(self.f_a, self.f_s).data
            )
        )

    def test_state_mismatch(self):
        """Test rejection of parameters from a different architecture."""
        state = SAANE(self.config.with_variant("app_sem")).state_dict()
        with self.assertRaises(ArchitectureMismatchError) as context:
            SAANE(self.config).load_state_dict(state)
        self.assertIn("attention.conv_a", str(context.exception))

        wider = SAANE(RunConfig.toy(common_dim=16)).state_dict()
        with self.assertRaises(ArchitectureMismatchError) as context:
            SAANE(self.config).load_state_dict(wider)
        self.assertIn("reshaped=['attention", str(context.exception))
