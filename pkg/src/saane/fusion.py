"""The modality fusion module.

Appearance and semantic feature maps are projected into a common ``C``-channel
space with bias-free 1x1 convolutions and summed.
"""

from __future__ import annotations

from typing import List, NamedTuple, Optional

import numpy as np

from . import ops
from .tensor import Parameter, ShapeError, Tensor

__all__ = [
    "Fused",
    "FusionModule",
    "he_normal",
]


def he_normal(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    """Draw zero-mean gaussian weights with variance ``2 / fan_in``."""
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(dtype)


class Fused(NamedTuple):
    """The output of a fusion module."""

    #: The fused map, ``C x H x W``
    fused: Tensor
    #: The aligned appearance map
    appearance: Tensor
    #: The aligned semantic map, if the module has a semantic projection
    semantic: Optional[Tensor]


class FusionModule:
    """Projects two streams to a common channel space and sums them."""

    def __init__(
        self,
        name: str,
        common_dim: int,
        appearance_dim: int,
        semantic_dim: Optional[int],
        *,
        rng: np.random.Generator,
        dtype=np.float32,
    ):
        """Initialize the fusion module.

        :param name: A prefix for parameter names, e.g., ``fusion1``
        :param common_dim: The output channel count ``C``
        :param appearance_dim: Input channels of the appearance stream
        :param semantic_dim: Input channels of the semantic stream, or None for an
            appearance-only module
        :param rng: The generator for weight initialization
        :param dtype: The real type of the weights
        """
        self.name = name
        self.common_dim = common_dim
        self.proj_a = Parameter(
            f"{name}.proj_a",
            he_normal(rng, (common_dim, appearance_dim, 1, 1), appearance_dim, dtype),
        )
        self.proj_s = (
            None
            if semantic_dim is None
            else Parameter(
                f"{name}.proj_s",
                he_normal(rng, (common_dim, semantic_dim, 1, 1), semantic_dim, dtype),
            )
        )

    def parameters(self) -> List[Parameter]:
        """Get the trainable parameters."""
        return [p for p in (self.proj_a, self.proj_s) if p is not None]

    def fuse(self, f_a: Tensor, f_s: Optional[Tensor] = None) -> Fused:
        """Project both streams and sum them.

        :param f_a: An appearance feature map, ``C_A x H x W``
        :param f_s: A semantic feature map, ``C_S x H x W``. Ignored by an
            appearance-only module.
        :returns: The fused map and both aligned maps
        :raises ShapeError: if the spatial extents or channel counts do not match
        """
        if self.proj_s is None:
            f_m_a = ops.conv2d(f_a, self.proj_a.value, padding=0)
            return Fused(fused=f_m_a, appearance=f_m_a, semantic=None)
        if f_s is None:
            raise ValueError(f"{self.name} needs a semantic feature map")
        if f_a.ndim != 3 or f_s.ndim != 3 or f_a.shape[1:] != f_s.shape[1:]:
            raise ShapeError(
                f"appearance map of shape {f_a.shape} and semantic map of shape {f_s.shape} "
                "must share their spatial extent"
            )
        f_m_a = ops.conv2d(f_a, self.proj_a.value, padding=0)
        f_m_s = ops.conv2d(f_s, self.proj_s.value, padding=0)
        return Fused(fused=ops.add(f_m_a, f_m_s), appearance=f_m_a, semantic=f_m_s)
