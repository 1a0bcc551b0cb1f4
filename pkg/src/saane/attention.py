"""The multimodal attention module.

A channel attention ``M_c`` is computed once from the fused map and shared by
both streams. Each stream then gets its own spatial attention from a 7x7
filter over the channel-pooled, channel-refined fused map:

.. code-block:: text

    M_c    = sigmoid(phi(avgpool(F_M)) + phi(maxpool(F_M)))
    F_M'   = F_M * M_c
    M_xy_Z = M_c * sigmoid(W_Z (*) [chanavg(F_M') ; chanmax(F_M')])
    F_Z'   = F_M_Z * M_xy_Z

``M_xy_Z`` is materialized as a full ``C x H x W`` volume.
"""

from __future__ import annotations

from typing import Dict, List, NamedTuple, Optional, Sequence

import numpy as np

from . import ops
from .constants import SPATIAL_KERNEL_SIZE, Modality
from .fusion import he_normal
from .tensor import Parameter, Tensor

__all__ = [
    "AttentionMaps",
    "AttentionModule",
    "Attended",
    "ChannelMLP",
    "SpatialAttention",
]


class ChannelMLP:
    """The two-layer perceptron applied to both pooled descriptors."""

    def __init__(self, name: str, dim: int, hidden_dim: int, *, rng: np.random.Generator, dtype):
        """Initialize the perceptron with gaussian weights and zero biases."""
        self.w1 = Parameter(f"{name}.w1", he_normal(rng, (hidden_dim, dim), dim, dtype))
        self.b1 = Parameter(f"{name}.b1", np.zeros(hidden_dim, dtype=dtype))
        self.w2 = Parameter(f"{name}.w2", he_normal(rng, (dim, hidden_dim), hidden_dim, dtype))
        self.b2 = Parameter(f"{name}.b2", np.zeros(dim, dtype=dtype))

    def parameters(self) -> List[Parameter]:
        """Get the trainable parameters."""
        return [self.w1, self.b1, self.w2, self.b2]

    def __call__(self, x: Tensor) -> Tensor:
        return ops.mlp2(x, self.w1.value, self.b1.value, self.w2.value, self.b2.value)


class SpatialAttention(NamedTuple):
    """A modality's spatial attention and its sigmoid factor."""

    #: ``M_xy``, a ``C x H x W`` volume with values in (0, 1)
    attention: Tensor
    #: The ``1 x H x W`` sigmoid map before multiplication by the channel attention
    factor: Tensor


class AttentionMaps(NamedTuple):
    """Every attention map computed for one image."""

    channel_a: Tensor
    spatial_a: SpatialAttention
    channel_s: Optional[Tensor] = None
    spatial_s: Optional[SpatialAttention] = None

    @property
    def channel(self) -> Tensor:
        """Get the channel attention used by the appearance stream."""
        return self.channel_a


class Attended(NamedTuple):
    """The refined features of both streams."""

    appearance: Tensor
    semantic: Optional[Tensor]
    maps: AttentionMaps


class AttentionModule:
    """Shared channel attention followed by per-modality spatial attention."""

    def __init__(
        self,
        name: str,
        common_dim: int,
        reduction_ratio: int = 16,
        *,
        modalities: Sequence[Modality] = ("a", "s"),
        share_channel_attention: bool = True,
        rng: np.random.Generator,
        dtype=np.float32,
    ):
        """Initialize the attention module.

        :param name: A prefix for parameter names
        :param common_dim: The channel count ``C`` of the fused space
        :param reduction_ratio: The MLP hidden width is ``C / reduction_ratio``
        :param modalities: The streams that get a spatial attention filter
        :param share_channel_attention: If false, every stream computes its own channel
            attention from its own aligned map with its own MLP
        :param rng: The generator for weight initialization
        :param dtype: The real type of the weights
        """
        if common_dim % reduction_ratio:
            raise ValueError(f"C={common_dim} is not divisible by reduction ratio {reduction_ratio}")
        self.name = name
        self.common_dim = common_dim
        self.modalities = tuple(modalities)
        self.share_channel_attention = share_channel_attention
        hidden_dim = common_dim // reduction_ratio
        if share_channel_attention:
            self.mlps: Dict[str, ChannelMLP] = {
                "shared": ChannelMLP(f"{name}.mlp", common_dim, hidden_dim, rng=rng, dtype=dtype)
            }
        else:
            self.mlps = {
                modality: ChannelMLP(
                    f"{name}.mlp_{modality}", common_dim, hidden_dim, rng=rng, dtype=dtype
                )
                for modality in self.modalities
            }
        k = SPATIAL_KERNEL_SIZE
        self.convs: Dict[str, Parameter] = {
            modality: Parameter(
                f"{name}.conv_{modality}", he_normal(rng, (1, 2, k, k), 2 * k * k, dtype)
            )
            for modality in self.modalities
        }

    def parameters(self) -> List[Parameter]:
        """Get the trainable parameters."""
        rv = [p for mlp in self.mlps.values() for p in mlp.parameters()]
        rv.extend(self.convs.values())
        return rv

    def channel_attention(self, f_m: Tensor, which: Optional[Modality] = None) -> Tensor:
        """Compute a length-``C`` channel attention from a map.

        :param f_m: The fused map (or, without sharing, a modality's aligned map)
        :param which: The modality whose MLP to use when channel attention is not shared
        """
        mlp = self.mlps["shared" if self.share_channel_attention else which]  # type:ignore
        summed = ops.add(mlp(ops.pool_spatial(f_m, "avg")), mlp(ops.pool_spatial(f_m, "max")))
        return ops.sigmoid(summed)

    @staticmethod
    def refine_channels(f_m: Tensor, m_c: Tensor) -> Tensor:
        """Scale every channel of a map by its attention value."""
        return ops.mul_broadcast(f_m, m_c)

    def spatial_attention(self, refined: Tensor, m_c: Tensor, which: Modality) -> SpatialAttention:
        """Compute a modality's spatial attention from the channel-refined map."""
        pooled = ops.concat([ops.pool_channel(refined, "avg"), ops.pool_channel(refined, "max")])
        factor = ops.sigmoid(
            ops.conv2d(pooled, self.convs[which].value, padding=SPATIAL_KERNEL_SIZE // 2)
        )
        return SpatialAttention(attention=ops.mul_broadcast(m_c, factor), factor=factor)

    def attend(self, f_m_a: Tensor, f_m_s: Optional[Tensor] = None) -> Attended:
        """Refine the aligned maps of both streams.

        :param f_m_a: The aligned appearance map from the first fusion module
        :param f_m_s: The aligned semantic map, required if the module has a semantic filter
        :returns: The refined appearance and semantic maps, with every attention map
        """
        if "s" in self.modalities and f_m_s is None:
            raise ValueError(f"{self.name} needs an aligned semantic map")
        aligned = {"a": f_m_a, "s": f_m_s}

        channel: Dict[str, Tensor] = {}
        spatial: Dict[str, SpatialAttention] = {}
        if self.share_channel_attention:
            f_m = f_m_a if f_m_s is None or "s" not in self.modalities else ops.add(f_m_a, f_m_s)
            m_c = self.channel_attention(f_m)
            refined = self.refine_channels(f_m, m_c)
            for modality in self.modalities:
                channel[modality] = m_c
                spatial[modality] = self.spatial_attention(refined, m_c, modality)
        else:
            for modality in self.modalities:
                m_c = self.channel_attention(aligned[modality], modality)  # type:ignore
                refined = self.refine_channels(aligned[modality], m_c)  # type:ignore
                channel[modality] = m_c
                spatial[modality] = self.spatial_attention(refined, m_c, modality)

        maps = AttentionMaps(
            channel_a=channel["a"],
            spatial_a=spatial["a"],
            channel_s=channel.get("s"),
            spatial_s=spatial.get("s"),
        )
        attended_a = ops.mul_broadcast(f_m_a, spatial["a"].attention)
        attended_s = (
            ops.mul_broadcast(f_m_s, spatial["s"].attention)  # type:ignore
            if "s" in spatial
            else None
        )
        return Attended(appearance=attended_a, semantic=attended_s, maps=maps)
