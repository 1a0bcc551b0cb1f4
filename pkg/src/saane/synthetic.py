"""A synthetic stand-in for pre-extracted appearance and semantic feature maps.

Every place has a latent appearance map and a latent semantic map, and the
latent maps of consecutive places along the traversal are correlated, the
semantic ones much more strongly: the semantic layout is stable across viewing
conditions but changes slowly along the route. A viewing condition rescales the
appearance map by a smooth random gain field and adds strong noise, while the
semantic map only receives weak noise. Each frame also gets distractor blobs at
random positions: the appearance map is occluded by fresh random activations,
and the last semantic channel flags the occluded cells.
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .config import SyntheticConfig
from .constants import PathHint
from .formats import FeatureRecord, write_features

__all__ = [
    "SyntheticSplit",
    "generate_synthetic",
    "split_synthetic",
    "write_synthetic",
]

logger = logging.getLogger(__name__)


class SyntheticSplit(NamedTuple):
    """Training records plus a database and a query traversal over held-out places."""

    train: List[FeatureRecord]
    db: List[FeatureRecord]
    query: List[FeatureRecord]


def _smooth_standard(rng: np.random.Generator, shape, sigma: float) -> np.ndarray:
    """Draw a spatially smooth gaussian field with unit variance per channel."""
    field = rng.standard_normal(shape)
    if sigma > 0:
        field = gaussian_filter(field, sigma=(0, sigma, sigma), mode="wrap")
    std = field.std(axis=(1, 2), keepdims=True)
    return field / np.where(std == 0, 1.0, std)


def _traversal(
    rng: np.random.Generator, n_places: int, shape, sigma: float, correlation: float
) -> List[np.ndarray]:
    rv = [_smooth_standard(rng, shape, sigma)]
    innovation = np.sqrt(1.0 - correlation**2)
    for _ in range(1, n_places):
        rv.append(correlation * rv[-1] + innovation * _smooth_standard(rng, shape, sigma))
    return rv


def generate_synthetic(
    n_places: int,
    n_conditions: int,
    config: Optional[SyntheticConfig] = None,
    seed: int = 0,
    *,
    spp_levels: Sequence[int] = (),
    classes_per_batch: int = 2,
) -> List[FeatureRecord]:
    """Generate feature maps for every place under every viewing condition.

    Records are ordered by condition, then place. The frame identifier is
    ``condition * n_places + place``, the class is the place.

    :param n_places: The number of places along the traversal
    :param n_conditions: The number of viewing conditions, at least 2
    :param config: Map sizes and perturbation magnitudes
    :param seed: The seed of the only random generator used
    :param spp_levels: Pyramid levels the maps must support
    :param classes_per_batch: The places a training batch draws from, at most ``n_places``
    :raises ValueError: if the counts are too small or the maps are smaller than a level
    """
    if config is None:
        config = SyntheticConfig()
    if n_places < max(2, classes_per_batch):
        raise ValueError(
            f"need at least {max(2, classes_per_batch)} places for batches of "
            f"{classes_per_batch} classes, got {n_places}"
        )
    if n_conditions < 2:
        raise ValueError(f"need at least 2 conditions, got {n_conditions}")
    if spp_levels and max(spp_levels) > min(config.height, config.width):
        raise ValueError(
            f"{config.height}x{config.width} maps are too small for pyramid level {max(spp_levels)}"
        )

    rng = np.random.default_rng(seed)
    h, w = config.height, config.width
    c_a, c_s = config.appearance_dim, config.semantic_dim
    sigma = config.smoothing

    appearance_latents = _traversal(rng, n_places, (c_a, h, w), sigma, config.traversal_correlation)
    semantic_latents = _traversal(
        rng, n_places, (c_s - 1, h, w), sigma, config.semantic_correlation
    )

    rv = []
    for condition in range(n_conditions):
        for place in range(n_places):
            gain = np.exp(config.gain_strength * _smooth_standard(rng, (c_a, h, w), sigma))
            appearance = appearance_latents[place] * gain
            appearance += config.appearance_noise * rng.standard_normal((c_a, h, w))
            semantic = np.zeros((c_s, h, w))
            semantic[:-1] = semantic_latents[place]
            semantic[:-1] += config.semantic_noise * rng.standard_normal((c_s - 1, h, w))

            size = config.distractor_size
            for _ in range(config.n_distractors):
                row = int(rng.integers(0, h - size + 1))
                col = int(rng.integers(0, w - size + 1))
                window = (slice(row, row + size), slice(col, col + size))
                occluder = rng.standard_normal((c_a, size, size))
                appearance[(slice(None), *window)] = config.distractor_strength * occluder
                semantic[(-1, *window)] = 1.0

            rv.append(
                FeatureRecord(
                    frame_id=condition * n_places + place,
                    class_id=place,
                    condition_id=condition,
                    appearance=appearance.astype(np.float32),
                    semantic=semantic.astype(np.float32),
                )
            )
    logger.info("generated %d places under %d conditions", n_places, n_conditions)
    return rv


def split_synthetic(
    records: Sequence[FeatureRecord], n_test_places: int
) -> SyntheticSplit:
    """Hold out the last places of the traversal for localization.

    The database is the first condition of the held-out places and the query is
    the last condition. Held-out frame identifiers are renumbered to traversal
    positions so both traversals are frame-aligned.

    :raises ValueError: if no places would remain for training or testing
    """
    places = sorted({record.class_id for record in records})
    if not 2 <= n_test_places < len(places):
        raise ValueError(
            f"cannot hold out {n_test_places} of {len(places)} places; need at least 2 for "
            f"testing and 1 for training"
        )
    test_places = set(places[-n_test_places:])
    first = min(record.condition_id for record in records)
    last = max(record.condition_id for record in records)
    position: Dict[int, int] = {place: i for i, place in enumerate(sorted(test_places))}

    def _renumber(record: FeatureRecord) -> FeatureRecord:
        return FeatureRecord(
            frame_id=position[record.class_id],
            class_id=record.class_id,
            condition_id=record.condition_id,
            appearance=record.appearance,
            semantic=record.semantic,
        )

    train = [record for record in records if record.class_id not in test_places]
    held_out = [record for record in records if record.class_id in test_places]
    db = sorted(
        (_renumber(r) for r in held_out if r.condition_id == first), key=lambda r: r.frame_id
    )
    query = sorted(
        (_renumber(r) for r in held_out if r.condition_id == last), key=lambda r: r.frame_id
    )
    return SyntheticSplit(train=train, db=db, query=query)


def write_synthetic(
    directory: PathHint,
    n_places: int,
    n_conditions: int,
    config: Optional[SyntheticConfig] = None,
    seed: int = 0,
    *,
    n_test_places: Optional[int] = None,
    spp_levels: Sequence[int] = (),
    classes_per_batch: int = 2,
) -> Dict[str, Path]:
    """Generate a benchmark and write ``train.safm``, ``db.safm``, and ``query.safm``.

    :param n_test_places: Places held out for localization; defaults to half of them
    :returns: The path of each written file, by split name
    """
    if n_test_places is None:
        n_test_places = n_places // 2
    records = generate_synthetic(
        n_places,
        n_conditions,
        config,
        seed,
        spp_levels=spp_levels,
        classes_per_batch=classes_per_batch,
    )
    split = split_synthetic(records, n_test_places)
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rv = {}
    for name, subset in split._asdict().items():
        path = directory.joinpath(f"{name}.safm")
        write_features(subset, path)
        rv[name] = path
    return rv
