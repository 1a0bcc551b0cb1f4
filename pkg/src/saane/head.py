"""The spatial pooling module and the embedding it produces."""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, List, Optional, Sequence, Tuple, Union

import numpy as np

from .ops import PoolMode
from .tensor import ShapeError, Tensor, as_tensor, record

if TYPE_CHECKING:
    from .formats import FeatureRecord
    from .network import SAANE

__all__ = [
    "DegenerateEmbeddingError",
    "Embedding",
    "bin_edges",
    "spp",
    "normalize_scale",
    "embed",
    "embed_records",
]


class DegenerateEmbeddingError(ValueError):
    """Raised when an all-zero vector would have to be normalized."""


@dataclass(frozen=True)
class Embedding:
    """The fixed-length descriptor of one image."""

    values: np.ndarray
    source_id: int = -1

    def __len__(self) -> int:
        return int(self.values.shape[0])

    @property
    def norm(self) -> float:
        """Get the Euclidean norm of the embedding."""
        return float(np.linalg.norm(self.values))


def bin_edges(extent: int, level: int) -> List[Tuple[int, int]]:
    """Partition ``range(extent)`` into ``level`` contiguous bins that tile it exactly."""
    return [((i * extent) // level, ((i + 1) * extent) // level) for i in range(level)]


def spp(f: Tensor, levels: Sequence[int], mode: PoolMode = "max") -> Tensor:
    """Pool a feature map over a pyramid of grids into one vector.

    Level blocks follow the order of ``levels``, bins within a level are
    row-major, and the ``C`` channels of a bin are contiguous.

    :param f: A ``C x H x W`` feature map
    :param levels: Grid sizes, each at most ``min(H, W)``
    :param mode: The reducer for each bin
    :returns: A vector of length ``C * sum(level ** 2)``
    :raises ShapeError: if a level exceeds the spatial extent
    """
    if f.ndim != 3:
        raise ShapeError(f"spatial pyramid pooling needs a C x H x W map, got shape {f.shape}")
    if mode not in ("avg", "max"):
        raise ValueError(f"invalid pooling mode: {mode!r}")
    c, h, w = f.shape
    if not levels or min(levels) < 1:
        raise ValueError(f"pyramid levels must be positive: {list(levels)}")
    if max(levels) > min(h, w):
        raise ShapeError(f"pyramid level {max(levels)} exceeds the spatial extent of shape {f.shape}")

    data = f.data
    bins = []
    chunks = []
    for level in levels:
        for row_start, row_stop in bin_edges(h, level):
            for col_start, col_stop in bin_edges(w, level):
                block = data[:, row_start:row_stop, col_start:col_stop].reshape(c, -1)
                if mode == "max":
                    index = block.argmax(axis=1)
                    chunks.append(block[np.arange(c), index])
                else:
                    index = None
                    chunks.append(block.mean(axis=1))
                bins.append((row_start, row_stop, col_start, col_stop, index))
    out = np.concatenate(chunks)

    def backward(grad: np.ndarray) -> List[np.ndarray]:
        rv = np.zeros_like(data)
        channels = np.arange(c)
        for i, (row_start, row_stop, col_start, col_stop, index) in enumerate(bins):
            chunk = grad[i * c : (i + 1) * c]
            if index is None:
                size = (row_stop - row_start) * (col_stop - col_start)
                rv[:, row_start:row_stop, col_start:col_stop] += chunk[:, None, None] / size
            else:
                bin_width = col_stop - col_start
                rows = row_start + index // bin_width
                cols = col_start + index % bin_width
                rv[channels, rows, cols] += chunk
        return [rv]

    return record(out, (f,), backward)


def normalize_scale(v: Tensor, alpha: float = 10.0) -> Tensor:
    """Scale a vector to Euclidean norm ``alpha``.

    :raises DegenerateEmbeddingError: if the vector is all zeros
    """
    norm = float(np.sqrt(np.sum(v.data.astype(np.float64) ** 2)))
    if norm == 0.0:
        raise DegenerateEmbeddingError("cannot normalize an all-zero vector (degenerate feature map)")
    unit = v.data / norm

    def backward(grad: np.ndarray) -> List[np.ndarray]:
        return [(alpha / norm) * (grad - unit * np.dot(unit.reshape(-1), grad.reshape(-1)))]

    return record((alpha * unit).astype(v.dtype, copy=False), (v,), backward)


def embed(
    f_a: Union[Tensor, np.ndarray],
    f_s: Optional[Union[Tensor, np.ndarray]],
    model: "SAANE",
    source_id: int = -1,
) -> Embedding:
    """Run the full pipeline on one image's feature maps.

    :param f_a: The appearance feature map
    :param f_s: The semantic feature map (ignored by appearance-only variants)
    :param model: The network holding both fusion modules, the attention module,
        and the pooling configuration
    :param source_id: The frame identifier to attach to the embedding
    """
    dtype = model.dtype
    rv = model.forward(
        as_tensor(f_a, dtype=dtype), None if f_s is None else as_tensor(f_s, dtype=dtype)
    )
    return Embedding(values=rv.numpy(), source_id=source_id)


def embed_records(records: Sequence["FeatureRecord"], model: "SAANE") -> List[Embedding]:
    """Embed every record, keyed by its frame identifier."""
    return [
        embed(record.appearance, record.semantic, model, source_id=record.frame_id)
        for record in records
    ]
