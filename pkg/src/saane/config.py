"""Configuration data models for training, evaluation, and synthetic data."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import List, Optional, Union

import pystow
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from typing_extensions import Literal

from .constants import DEFAULT_SPP_LEVELS

__all__ = [
    "RunConfig",
    "SyntheticConfig",
    "load_config",
    "digest_json",
    "get_seed",
    "get_data_directory",
]


def digest_json(data) -> str:
    """Get the SHA-256 of the canonical JSON serialization of some data."""
    text = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


class RunConfig(BaseModel):
    """Hyperparameters for building, training, and evaluating a model.

    Defaults follow the published training protocol.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    common_dim: int = Field(256, gt=0, description="The channel count C of the common fused space")
    appearance_dim: int = Field(1024, gt=0, description="Channels C_A of the appearance feature maps")
    semantic_dim: int = Field(512, gt=0, description="Channels C_S of the semantic feature maps")
    reduction_ratio: int = Field(
        16, gt=0, description="The channel attention MLP has C / reduction_ratio hidden units"
    )
    spp_levels: List[int] = Field(
        default_factory=lambda: list(DEFAULT_SPP_LEVELS),
        min_length=1,
        description="Pyramid grid sizes, concatenated in the listed order",
    )
    spp_mode: Literal["avg", "max"] = Field("max", description="The reducer applied to each pyramid bin")
    alpha: float = Field(10.0, gt=0, description="The norm of every embedding")

    use_semantic: bool = Field(True, description="Fuse the semantic stream")
    use_attention: bool = Field(True, description="Apply the multimodal attention module")
    share_channel_attention: bool = Field(
        True, description="Compute one channel attention from the fused map for both modalities"
    )

    margin: float = Field(0.5, ge=0, description="The triplet ranking margin m")
    learning_rate: float = Field(5e-5, ge=0)
    weight_decay: float = Field(5e-4, ge=0, description="Coupled L2 decay added to gradients")
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    epsilon: float = Field(1e-8, gt=0)
    classes_per_batch: int = Field(16, gt=0, description="The number of classes P in a batch")
    examples_per_class: int = Field(4, ge=2, description="The number of examples K per class")
    epochs: int = Field(10, ge=0)
    seed: int = Field(0, ge=0)
    distance_cutoff: float = Field(
        0.5, gt=0, lt=2, description="Unit-sphere distances are clamped below at this value"
    )
    max_weight: float = Field(1e3, ge=1, description="The cap on distance-weighted sampling weights")
    nonzero_loss_cutoff: Optional[float] = Field(
        None, gt=0, description="Negatives farther than this on the unit sphere are never sampled"
    )

    ratio_direction: Literal["below", "above"] = Field(
        "below", description="Accept a match when the distance ratio is below (or above) the threshold"
    )
    tolerance: int = Field(5, ge=0, description="Frames by which a match may miss the ground truth")
    n_thresholds: int = Field(100, gt=0, description="Evenly spaced ratio thresholds in (0, 1]")

    @field_validator("spp_levels")
    @classmethod
    def _check_levels(cls, value: List[int]) -> List[int]:
        if any(level <= 0 for level in value):
            raise ValueError(f"pyramid levels must be positive: {value}")
        return value

    @model_validator(mode="after")
    def _check_reduction(self) -> "RunConfig":
        if self.common_dim % self.reduction_ratio:
            raise ValueError(
                f"common_dim={self.common_dim} is not divisible by reduction_ratio={self.reduction_ratio}"
            )
        return self

    @property
    def hidden_dim(self) -> int:
        """Get the hidden width of the channel attention MLP."""
        return self.common_dim // self.reduction_ratio

    @property
    def embedding_dim(self) -> int:
        """Get the length of an embedding, ``C * sum(level ** 2)``."""
        return self.common_dim * sum(level * level for level in self.spp_levels)

    def digest(self) -> str:
        """Get a digest of the whole configuration."""
        return digest_json(self.model_dump(mode="json"))

    def with_variant(self, name: str) -> "RunConfig":
        """Get a copy of this configuration with an ablation variant's switches applied."""
        from .network import VARIANTS

        try:
            overrides = VARIANTS[name]
        except KeyError:
            raise ValueError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}") from None
        return self.model_copy(update=overrides)

    @classmethod
    def toy(cls, **kwargs) -> "RunConfig":
        """Get a small configuration suitable for gradient checks and quick tests."""
        defaults = dict(
            common_dim=8,
            appearance_dim=16,
            semantic_dim=12,
            reduction_ratio=2,
            spp_levels=[2, 1],
            classes_per_batch=2,
            examples_per_class=2,
        )
        defaults.update(kwargs)
        return cls(**defaults)


class SyntheticConfig(BaseModel):
    """Magnitudes for the synthetic appearance/semantic benchmark."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    height: int = Field(8, gt=0)
    width: int = Field(8, gt=0)
    appearance_dim: int = Field(32, gt=0)
    semantic_dim: int = Field(16, ge=2, description="The last semantic channel marks distractors")
    gain_strength: float = Field(
        0.8, ge=0, description="Standard deviation of the log gain field applied to appearance maps"
    )
    appearance_noise: float = Field(0.5, ge=0, description="Noise added to appearance maps")
    semantic_noise: float = Field(
        0.2, ge=0, description="Noise added to the semantic channels other than the distractor flag"
    )
    n_distractors: int = Field(3, ge=0, description="Distractor blobs planted per frame")
    distractor_size: int = Field(2, gt=0, description="Side length of a square distractor blob")
    distractor_strength: float = Field(
        3.0, ge=0, description="Scale of the random activations occluding the appearance map in a blob"
    )
    smoothing: float = Field(1.0, ge=0, description="Gaussian sigma (in cells) of latent and gain fields")
    traversal_correlation: float = Field(
        0.5,
        ge=0,
        lt=1,
        description="Correlation between the appearance latents of consecutive places along a traversal",
    )
    semantic_correlation: float = Field(
        0.95,
        ge=0,
        lt=1,
        description="Correlation between the semantic latents of consecutive places along a traversal",
    )

    @model_validator(mode="after")
    def _check_blob(self) -> "SyntheticConfig":
        if self.distractor_size > min(self.height, self.width):
            raise ValueError("distractor blobs must fit inside the feature map")
        return self


def get_seed(seed: Optional[int] = None) -> int:
    """Get a seed, falling back to the ``SAANE_SEED`` setting, then 0.

    :param seed: An explicit seed. Loads from :func:`pystow.get_config` if not given.
    """
    return pystow.get_config("saane", "seed", passthrough=seed, dtype=int, default=0)


def get_data_directory() -> Path:
    """Get the default directory for synthetic benchmark files."""
    return pystow.join("saane", "synthetic")


def load_config(path: Union[str, Path]) -> RunConfig:
    """Load a run configuration from a JSON file."""
    return RunConfig.model_validate_json(Path(path).read_text())
