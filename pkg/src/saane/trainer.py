"""Training with the max-margin triplet ranking loss.

Batches hold ``P`` classes with ``K`` examples each. Triplets are formed online
from every ordered anchor-positive pair of a class, with one negative drawn
from the other classes by distance-weighted sampling.
"""

from __future__ import annotations

import logging
import math
import time
from collections import defaultdict
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import ops
from .config import RunConfig
from .tensor import Parameter, Tape, as_tensor

if TYPE_CHECKING:
    from .formats import FeatureRecord
    from .network import SAANE

__all__ = [
    "BatchCompositionError",
    "OptimizerError",
    "TripletBatch",
    "AdamState",
    "EpochStatistics",
    "triplet_loss",
    "log_inverse_density",
    "negative_probabilities",
    "mine_triplets",
    "compose_batches",
    "adam_step",
    "train_epoch",
    "train",
]

logger = logging.getLogger(__name__)

#: An (anchor, positive, negative) triple of batch positions
Triplet = Tuple[int, int, int]


class BatchCompositionError(ValueError):
    """Raised when a dataset cannot supply a valid batch."""


class OptimizerError(FloatingPointError):
    """Raised when an optimizer step would propagate invalid values."""


def triplet_loss(d_ap: float, d_an: float, m: float = 0.5) -> float:
    """Get the hinge ``max(0, d_ap - d_an + m)``.

    :param d_ap: The anchor-positive distance
    :param d_an: The anchor-negative distance
    :param m: The margin
    """
    if d_ap < 0 or d_an < 0:
        raise ValueError(f"distances must be non-negative, got d_ap={d_ap}, d_an={d_an}")
    return max(0.0, d_ap - d_an + m)


@dataclass
class TripletBatch:
    """Embeddings of ``P`` classes with ``K`` examples each."""

    embeddings: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        self.embeddings = np.asarray(self.embeddings)
        self.labels = np.asarray(self.labels)
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] != self.labels.shape[0]:
            raise BatchCompositionError(
                f"{self.labels.shape[0]} labels for embeddings of shape {self.embeddings.shape}"
            )
        classes, counts = np.unique(self.labels, return_counts=True)
        if len(classes) < 2:
            raise BatchCompositionError("a batch needs at least two classes to form negatives")
        if counts.min() < 2:
            raise BatchCompositionError(
                f"class {classes[counts.argmin()]} has fewer than 2 members in the batch"
            )
        if counts.min() != counts.max():
            raise BatchCompositionError(f"classes have unequal sizes: {dict(zip(classes, counts))}")

    @property
    def n_classes(self) -> int:
        """Get the number of classes ``P``."""
        return len(np.unique(self.labels))

    @property
    def examples_per_class(self) -> int:
        """Get the number of examples per class ``K``."""
        return len(self.labels) // self.n_classes


def log_inverse_density(distances: np.ndarray, dim: int) -> np.ndarray:
    """Get ``-log q(d)``, where ``q`` is the density of pairwise distances on the unit sphere in ``dim`` dimensions.

    ``q(d)`` is proportional to ``d^(n-2) (1 - d^2/4)^((n-3)/2)``.
    """
    distances = np.asarray(distances, dtype=np.float64)
    return -((dim - 2) * np.log(distances) + ((dim - 3) / 2) * np.log(1.0 - 0.25 * distances**2))


def negative_probabilities(
    distances: np.ndarray,
    dim: int,
    *,
    cutoff: float = 0.5,
    max_weight: float = 1e3,
    nonzero_loss_cutoff: Optional[float] = None,
) -> np.ndarray:
    """Get sampling probabilities for negatives at the given unit-sphere distances.

    Weights are inverse densities, scaled so the least favoured negative has
    weight 1 and capped at ``max_weight``.

    :param distances: Anchor-negative distances between unit-normalized embeddings
    :param dim: The embedding dimension
    :param cutoff: Distances are clamped below at this value
    :param max_weight: The largest weight any negative may receive
    :param nonzero_loss_cutoff: If given, negatives farther than this get weight 0
    :returns: Probabilities summing to one
    """
    raw = np.asarray(distances, dtype=np.float64)
    clamped = np.clip(raw, cutoff, 2.0 - 1e-6)
    log_weights = log_inverse_density(clamped, dim)
    log_weights = log_weights - log_weights.min()
    weights = np.exp(np.minimum(log_weights, math.log(max_weight)))
    if nonzero_loss_cutoff is not None:
        weights[raw > nonzero_loss_cutoff] = 0.0
    total = weights.sum()
    if total == 0:
        logger.warning("every negative lies beyond the loss cutoff; sampling uniformly")
        return np.full(raw.shape, 1.0 / raw.size)
    return weights / total


def mine_triplets(
    batch: TripletBatch,
    rng: np.random.Generator,
    *,
    cutoff: float = 0.5,
    max_weight: float = 1e3,
    nonzero_loss_cutoff: Optional[float] = None,
) -> List[Triplet]:
    """Form one triplet for every ordered anchor-positive pair in the batch.

    Distances for the sampling weights are taken between unit-normalized
    embeddings, whatever their scale.
    """
    embeddings = batch.embeddings.astype(np.float64)
    norms = np.linalg.norm(embeddings, axis=1, keepdims=True)
    unit = embeddings / np.where(norms == 0, 1.0, norms)
    dim = embeddings.shape[1]
    labels = batch.labels

    rv: List[Triplet] = []
    for anchor in range(len(labels)):
        same = labels == labels[anchor]
        positives = np.flatnonzero(same)
        negatives = np.flatnonzero(~same)
        distances = np.linalg.norm(unit[negatives] - unit[anchor], axis=1)
        probabilities = negative_probabilities(
            distances,
            dim,
            cutoff=cutoff,
            max_weight=max_weight,
            nonzero_loss_cutoff=nonzero_loss_cutoff,
        )
        for positive in positives:
            if positive == anchor:
                continue
            negative = int(rng.choice(negatives, p=probabilities))
            rv.append((anchor, int(positive), negative))
    return rv


@dataclass
class AdamState:
    """Moment accumulators and constants of the Adam optimizer."""

    learning_rate: float = 5e-5
    weight_decay: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    first_moments: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moments: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_config(cls, config: RunConfig) -> "AdamState":
        """Get a fresh state with the optimizer constants of a configuration."""
        return cls(
            learning_rate=config.learning_rate,
            weight_decay=config.weight_decay,
            beta1=config.beta1,
            beta2=config.beta2,
            epsilon=config.epsilon,
        )


def adam_step(parameters: Sequence[Parameter], state: AdamState) -> None:
    """Apply one bias-corrected Adam update using each parameter's gradient buffer.

    Weight decay is coupled: ``weight_decay * value`` is added to the gradient
    before the moments are updated.

    :raises OptimizerError: if any gradient contains a NaN; no parameter is changed
    """
    for parameter in parameters:
        if np.isnan(parameter.grad).any():
            raise OptimizerError(f"gradient of {parameter.name} contains NaN; step aborted")

    state.step += 1
    t = state.step
    for parameter in parameters:
        value = parameter.value.data
        grad = parameter.grad + state.weight_decay * value
        first = state.first_moments.get(parameter.name, np.zeros_like(value))
        second = state.second_moments.get(parameter.name, np.zeros_like(value))
        first = state.beta1 * first + (1 - state.beta1) * grad
        second = state.beta2 * second + (1 - state.beta2) * grad * grad
        state.first_moments[parameter.name] = first
        state.second_moments[parameter.name] = second
        first_hat = first / (1 - state.beta1**t)
        second_hat = second / (1 - state.beta2**t)
        parameter.assign(
            value - state.learning_rate * first_hat / (np.sqrt(second_hat) + state.epsilon)
        )


@dataclass
class EpochStatistics:
    """Summary of one training epoch."""

    epoch: int
    mean_loss: float
    active_triplet_fraction: float
    wall_seconds: float


def compose_batches(
    labels: Sequence[int],
    classes_per_batch: int,
    examples_per_class: int,
    rng: np.random.Generator,
) -> List[List[int]]:
    """Compose one epoch of batches as lists of dataset positions.

    Classes are drawn without replacement; the epoch has
    ``ceil(n_classes / P)`` batches, and a short final group is filled with
    other classes. Classes with fewer than ``K`` (but at least 2) members are
    padded by resampling their members.

    :raises BatchCompositionError: if there are fewer than ``P`` classes or a class
        has fewer than 2 members
    """
    members: Dict[int, List[int]] = defaultdict(list)
    for position, label in enumerate(labels):
        members[int(label)].append(position)
    classes = sorted(members)
    if len(classes) < classes_per_batch:
        raise BatchCompositionError(
            f"dataset has {len(classes)} classes, fewer than the {classes_per_batch} needed per batch"
        )
    small = [label for label in classes if len(members[label]) < 2]
    if small:
        raise BatchCompositionError(f"classes with fewer than 2 members: {small}")

    order = [classes[i] for i in rng.permutation(len(classes))]
    rv = []
    for start in range(0, len(order), classes_per_batch):
        group = order[start : start + classes_per_batch]
        if len(group) < classes_per_batch:
            others = [label for label in classes if label not in group]
            fill = rng.choice(len(others), size=classes_per_batch - len(group), replace=False)
            group = group + [others[i] for i in fill]
        batch: List[int] = []
        for label in group:
            pool = members[label]
            if len(pool) >= examples_per_class:
                chosen = [pool[i] for i in rng.choice(len(pool), examples_per_class, replace=False)]
            else:
                logger.warning(
                    "class %d has %d members, fewer than K=%d; resampling members",
                    label,
                    len(pool),
                    examples_per_class,
                )
                extra = rng.choice(len(pool), examples_per_class - len(pool), replace=True)
                chosen = list(pool) + [pool[i] for i in extra]
            batch.extend(chosen)
        rv.append(batch)
    return rv


def _batch_loss(
    records: Sequence["FeatureRecord"],
    model: "SAANE",
    config: RunConfig,
    rng: np.random.Generator,
):
    outputs = [
        model.forward(
            as_tensor(record.appearance, dtype=model.dtype),
            as_tensor(record.semantic, dtype=model.dtype),
        )
        for record in records
    ]
    batch = TripletBatch(
        embeddings=np.stack([output.data for output in outputs]),
        labels=np.array([record.class_id for record in records]),
    )
    triplets = mine_triplets(
        batch,
        rng,
        cutoff=config.distance_cutoff,
        max_weight=config.max_weight,
        nonzero_loss_cutoff=config.nonzero_loss_cutoff,
    )
    hinges = []
    for anchor, positive, negative in triplets:
        d_ap = ops.l2_distance(outputs[anchor], outputs[positive])
        d_an = ops.l2_distance(outputs[anchor], outputs[negative])
        hinges.append(ops.relu(ops.add_scalar(ops.sub(d_ap, d_an), config.margin)))
    stacked = ops.stack(hinges)
    active = int(np.count_nonzero(stacked.data > 0))
    return ops.mean(stacked), active, len(triplets)


def train_epoch(
    records: Sequence["FeatureRecord"],
    model: "SAANE",
    state: AdamState,
    config: RunConfig,
    rng: np.random.Generator,
    epoch: int = 0,
) -> EpochStatistics:
    """Run one epoch of batch composition, forward passes, mining, and Adam steps.

    :param records: Class-labeled feature map pairs
    :param model: The network; all of its parameters are trained
    :param state: The optimizer state, updated in place
    :param config: The run configuration
    :param rng: The single source of randomness for composition and mining
    :param epoch: The epoch number to report
    """
    start = time.perf_counter()
    batches = compose_batches(
        [record.class_id for record in records],
        config.classes_per_batch,
        config.examples_per_class,
        rng,
    )
    parameters = model.parameters()
    losses = []
    active = total = 0
    for positions in batches:
        with Tape() as tape:
            loss, batch_active, batch_total = _batch_loss(
                [records[i] for i in positions], model, config, rng
            )
        model.zero_grad()
        tape.backward(loss)
        adam_step(parameters, state)
        losses.append(loss.item())
        active += batch_active
        total += batch_total

    rv = EpochStatistics(
        epoch=epoch,
        mean_loss=float(np.mean(losses)),
        active_triplet_fraction=active / total if total else 0.0,
        wall_seconds=time.perf_counter() - start,
    )
    logger.info(
        "epoch %d: loss=%.4f active=%.3f (%.1fs)",
        rv.epoch,
        rv.mean_loss,
        rv.active_triplet_fraction,
        rv.wall_seconds,
    )
    return rv


def train(
    records: Sequence["FeatureRecord"],
    model: "SAANE",
    config: RunConfig,
    *,
    rng: Optional[np.random.Generator] = None,
    state: Optional[AdamState] = None,
    callback: Optional[Callable[[EpochStatistics], None]] = None,
) -> Tuple[AdamState, List[EpochStatistics]]:
    """Train a model for ``config.epochs`` epochs.

    :param records: Class-labeled feature map pairs
    :param model: The network to train in place
    :param config: The run configuration
    :param rng: The source of randomness; defaults to one seeded from ``config.seed``.
        It should be distinct from the generator used to initialize the model.
    :param state: An optimizer state to resume from
    :param callback: Called with the statistics of every finished epoch
    :returns: The final optimizer state and per-epoch statistics
    """
    if rng is None:
        rng = np.random.default_rng([config.seed, 1])
    if state is None:
        state = AdamState.from_config(config)
    history = []
    for epoch in range(1, config.epochs + 1):
        stats = train_epoch(records, model, state, config, rng, epoch=epoch)
        history.append(stats)
        if callback is not None:
            callback(stats)
    return state, history

