"""The assembled embedding network and its ablation variants."""

from __future__ import annotations

import logging
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np

from .attention import AttentionMaps, AttentionModule
from .config import RunConfig, digest_json
from .fusion import FusionModule
from .head import normalize_scale, spp
from .tensor import Parameter, Tensor

__all__ = [
    "SAANE",
    "VARIANTS",
    "ArchitectureMismatchError",
]

logger = logging.getLogger(__name__)

#: Switches for each model of the component study
VARIANTS: Mapping[str, Mapping[str, bool]] = {
    # appearance features pooled directly
    "app": dict(use_semantic=False, use_attention=False, share_channel_attention=True),
    # projected sum of both streams, no attention
    "app_sem": dict(use_semantic=True, use_attention=False, share_channel_attention=True),
    # appearance with channel and spatial attention
    "app_att": dict(use_semantic=False, use_attention=True, share_channel_attention=True),
    # both streams, each with its own channel attention
    "app_att_sem_att": dict(use_semantic=True, use_attention=True, share_channel_attention=False),
    # both streams, shared channel attention
    "saane": dict(use_semantic=True, use_attention=True, share_channel_attention=True),
}


class ArchitectureMismatchError(ValueError):
    """Raised when stored parameters do not fit the configured network."""


class SAANE:
    """Fusion, multimodal attention, second fusion, then pyramid pooling and normalization.

    Only the fusion and attention modules hold parameters; the backbone feature
    maps are inputs.
    """

    def __init__(
        self,
        config: RunConfig,
        *,
        rng: Optional[np.random.Generator] = None,
        dtype=np.float32,
    ):
        """Initialize the network.

        :param config: The run configuration
        :param rng: The generator for weight initialization; defaults to one seeded
            with ``config.seed``
        :param dtype: The real type of every parameter
        """
        if rng is None:
            rng = np.random.default_rng(config.seed)
        self.config = config
        self.dtype = np.dtype(dtype)
        semantic_dim = config.semantic_dim if config.use_semantic else None
        self.fusion1 = FusionModule(
            "fusion1",
            config.common_dim,
            config.appearance_dim,
            semantic_dim,
            rng=rng,
            dtype=dtype,
        )
        self.attention: Optional[AttentionModule] = None
        self.fusion2: Optional[FusionModule] = None
        if config.use_attention:
            self.attention = AttentionModule(
                "attention",
                config.common_dim,
                config.reduction_ratio,
                modalities=("a", "s") if config.use_semantic else ("a",),
                share_channel_attention=config.share_channel_attention,
                rng=rng,
                dtype=dtype,
            )
            self.fusion2 = FusionModule(
                "fusion2",
                config.common_dim,
                config.common_dim,
                config.common_dim if config.use_semantic else None,
                rng=rng,
                dtype=dtype,
            )

    def parameters(self) -> List[Parameter]:
        """Get every trainable parameter in a fixed order."""
        rv = self.fusion1.parameters()
        if self.attention is not None:
            rv.extend(self.attention.parameters())
        if self.fusion2 is not None:
            rv.extend(self.fusion2.parameters())
        return rv

    def census(self) -> List[Tuple[str, Tuple[int, ...]]]:
        """Get the name and shape of every parameter."""
        return [(parameter.name, parameter.shape) for parameter in self.parameters()]

    def architecture_digest(self) -> str:
        """Get a digest of the parameter census."""
        return digest_json([[name, list(shape)] for name, shape in self.census()])

    def zero_grad(self) -> None:
        """Reset the gradient buffer of every parameter."""
        for parameter in self.parameters():
            parameter.zero_grad()

    def forward(self, f_a: Tensor, f_s: Optional[Tensor]) -> Tensor:
        """Compute the embedding of one image as a tensor on the active tape."""
        rv, _ = self.forward_with_maps(f_a, f_s)
        return rv

    def forward_with_maps(
        self, f_a: Tensor, f_s: Optional[Tensor]
    ) -> Tuple[Tensor, Optional[AttentionMaps]]:
        """Compute the embedding of one image along with its attention maps."""
        fused = self.fusion1.fuse(f_a, f_s if self.config.use_semantic else None)
        if self.attention is None or self.fusion2 is None:
            pooled_input = fused.fused
            maps = None
        else:
            attended = self.attention.attend(fused.appearance, fused.semantic)
            pooled_input = self.fusion2.fuse(attended.appearance, attended.semantic).fused
            maps = attended.maps
        pooled = spp(pooled_input, self.config.spp_levels, self.config.spp_mode)
        return normalize_scale(pooled, self.config.alpha), maps

    def state_dict(self) -> Dict[str, np.ndarray]:
        """Get a copy of every parameter's values, by name."""
        return {parameter.name: parameter.value.numpy() for parameter in self.parameters()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        """Replace every parameter's values.

        :raises ArchitectureMismatchError: if the names or shapes differ from the census
        """
        expected = {name: shape for name, shape in self.census()}
        found = {name: tuple(np.shape(values)) for name, values in state.items()}
        if expected != found:
            missing = sorted(set(expected) - set(found))
            unexpected = sorted(set(found) - set(expected))
            reshaped = sorted(
                name for name in set(expected) & set(found) if expected[name] != found[name]
            )
            raise ArchitectureMismatchError(
                f"stored parameters do not fit this network (missing={missing}, "
                f"unexpected={unexpected}, reshaped={reshaped})"
            )
        for parameter in self.parameters():
            parameter.assign(state[parameter.name])
