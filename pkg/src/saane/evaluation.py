"""Localization by nearest-neighbor retrieval scored with the distance ratio test.

A query is matched to its nearest database embedding. The match is accepted
when the ratio between the best and second-best distances passes a threshold,
and it is correct when the matched frame lies within a tolerance of the query
frame. Sweeping the threshold gives a precision-recall curve whose area
summarizes the localizer.
"""

from __future__ import annotations

import csv
import logging
from typing import List, NamedTuple, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator
from scipy.spatial.distance import cdist
from sklearn.metrics import auc as trapezoid_area
from typing_extensions import Literal

from .constants import PathHint
from .formats import atomic_write
from .head import Embedding
from .tensor import ShapeError

__all__ = [
    "RatioDirection",
    "RetrievalResult",
    "PRCurve",
    "Evaluation",
    "retrieve",
    "retrieve_all",
    "is_true_positive",
    "distance_ratio",
    "default_thresholds",
    "pr_curve",
    "area_under_curve",
    "evaluate",
    "write_pr_csv",
    "write_query_csv",
]

logger = logging.getLogger(__name__)

#: Whether a match is accepted when its distance ratio is below or above the threshold
RatioDirection = Literal["below", "above"]


class RetrievalResult(BaseModel):
    """The nearest and second-nearest database distances for one query."""

    query_frame: int
    best_frame: int
    d1: float = Field(..., ge=0, description="The distance to the best match")
    d2: float = Field(..., ge=0, description="The distance to the second-best match")

    @model_validator(mode="after")
    def _check_order(self) -> "RetrievalResult":
        if self.d1 > self.d2:
            raise ValueError(f"best distance {self.d1} exceeds second-best distance {self.d2}")
        return self

    @property
    def ratio(self) -> float:
        """Get the distance ratio ``d1 / d2``."""
        return distance_ratio(self.d1, self.d2)


class PRCurve(BaseModel):
    """Precision and recall at each ratio threshold, with the area under the curve."""

    thresholds: List[float]
    points: List[Tuple[float, float]] = Field(..., description="(precision, recall) per threshold")
    auc: float = Field(..., ge=0, le=1)

    @model_validator(mode="after")
    def _check_points(self) -> "PRCurve":
        if len(self.points) != len(self.thresholds):
            raise ValueError(f"{len(self.points)} points for {len(self.thresholds)} thresholds")
        for precision, recall in self.points:
            if not (0 <= precision <= 1 and 0 <= recall <= 1):
                raise ValueError(f"precision {precision} and recall {recall} must lie in [0, 1]")
        return self

    @property
    def precisions(self) -> List[float]:
        """Get the precision at each threshold."""
        return [precision for precision, _ in self.points]

    @property
    def recalls(self) -> List[float]:
        """Get the recall at each threshold."""
        return [recall for _, recall in self.points]


class Evaluation(NamedTuple):
    """The curve and per-query results of one query set."""

    curve: PRCurve
    results: List[RetrievalResult]
    tolerance: int


def _frame(embedding: Embedding, position: int) -> int:
    return embedding.source_id if embedding.source_id >= 0 else position


def _as_matrix(embeddings: Sequence[Embedding]) -> np.ndarray:
    lengths = {len(embedding) for embedding in embeddings}
    if len(lengths) > 1:
        raise ShapeError(f"embeddings have differing lengths: {sorted(lengths)}")
    return np.stack([np.asarray(embedding.values, dtype=np.float64) for embedding in embeddings])


def retrieve_all(
    queries: Sequence[Embedding], db: Sequence[Embedding]
) -> List[RetrievalResult]:
    """Find the two nearest database embeddings of every query by exhaustive search.

    Ties are broken in favour of the earlier database entry.

    :param queries: Query embeddings; a query's frame is its source identifier, or its
        position when it has none
    :param db: Database embeddings, framed the same way
    :raises ValueError: if the database holds fewer than two embeddings
    :raises ShapeError: if the embeddings differ in length
    """
    if len(db) < 2:
        raise ValueError(f"the ratio test needs at least 2 database embeddings, got {len(db)}")
    if not queries:
        return []
    distances = cdist(_as_matrix(queries), _as_matrix(db), metric="euclidean")
    order = np.argsort(distances, axis=1, kind="stable")[:, :2]
    rows = np.arange(len(queries))
    d1 = distances[rows, order[:, 0]]
    d2 = distances[rows, order[:, 1]]
    return [
        RetrievalResult(
            query_frame=_frame(query, position),
            best_frame=_frame(db[int(best)], int(best)),
            d1=float(first),
            d2=float(second),
        )
        for position, (query, best, first, second) in enumerate(
            zip(queries, order[:, 0], d1, d2)
        )
    ]


def retrieve(query: Embedding, db: Sequence[Embedding]) -> RetrievalResult:
    """Find the two nearest database embeddings of a query."""
    return retrieve_all([query], db)[0]


def is_true_positive(query_frame: int, best_frame: int, tolerance: int) -> bool:
    """Check whether a match lands within ``tolerance`` frames of the query.

    Traversals are synchronized, so the same frame index denotes the same place.
    """
    if tolerance < 0:
        raise ValueError(f"tolerance must be non-negative, got {tolerance}")
    return abs(query_frame - best_frame) <= tolerance


def distance_ratio(d1: float, d2: float) -> float:
    """Get ``d1 / d2``, taken as 1 (not distinctive) when both are zero."""
    if d2 == 0:
        return 1.0
    return d1 / d2


def default_thresholds(n: int = 100) -> List[float]:
    """Get ``n`` evenly spaced thresholds in (0, 1], ending at 1."""
    if n < 1:
        raise ValueError(f"need at least one threshold, got {n}")
    return [float(t) for t in np.linspace(1.0 / n, 1.0, n)]


def area_under_curve(points: Sequence[Tuple[float, float]]) -> float:
    """Integrate precision over recall with the trapezoidal rule.

    Points are sorted by recall, then precision, and the curve is anchored at recall 0 with the
    precision of the lowest-recall point, so a single point counts as a rectangle.

    :param points: (precision, recall) pairs in any order
    """
    if not points:
        raise ValueError("cannot integrate an empty curve")
    ordered = sorted(points, key=lambda point: (point[1], point[0]))
    recalls = [0.0] + [recall for _, recall in ordered]
    precisions = [ordered[0][0]] + [precision for precision, _ in ordered]
    return float(np.clip(trapezoid_area(recalls, precisions), 0.0, 1.0))


def pr_curve(
    results: Sequence[RetrievalResult],
    tolerance: int,
    thresholds: Sequence[float],
    direction: RatioDirection = "below",
) -> PRCurve:
    """Sweep the ratio threshold into a precision-recall curve.

    At each threshold, precision is the share of accepted queries that are
    correct (1 when none are accepted) and recall is the share of all queries
    that are accepted and correct.

    :param results: One retrieval per query
    :param tolerance: Frames by which a correct match may miss its query
    :param thresholds: Strictly increasing thresholds in (0, 1]
    :param direction: Accept ratios below or above the threshold
    """
    if not results:
        raise ValueError("cannot build a curve from zero queries")
    if direction not in ("below", "above"):
        raise ValueError(f"invalid ratio direction: {direction!r}")
    values = np.asarray(thresholds, dtype=np.float64)
    if values.ndim != 1 or values.size == 0:
        raise ValueError("need at least one threshold")
    if np.any(values <= 0) or np.any(values > 1):
        raise ValueError(f"thresholds must lie in (0, 1]: {list(thresholds)}")
    if np.any(np.diff(values) <= 0):
        raise ValueError("thresholds must be strictly increasing")

    ratios = np.array([result.ratio for result in results])
    correct = np.array(
        [is_true_positive(r.query_frame, r.best_frame, tolerance) for r in results], dtype=bool
    )
    points = []
    for threshold in values:
        accepted = ratios <= threshold if direction == "below" else ratios >= threshold
        n_accepted = int(accepted.sum())
        n_true = int((accepted & correct).sum())
        precision = n_true / n_accepted if n_accepted else 1.0
        points.append((precision, n_true / len(results)))
    return PRCurve(
        thresholds=[float(t) for t in values], points=points, auc=area_under_curve(points)
    )


def evaluate(
    db: Sequence[Embedding],
    queries: Sequence[Embedding],
    tolerance: int = 5,
    n_thresholds: int = 100,
    direction: RatioDirection = "below",
) -> Evaluation:
    """Localize every query against the database and build its precision-recall curve.

    :param db: Database embeddings from the reference traversal
    :param queries: Query embeddings from another traversal, frame-aligned with the database
    :param tolerance: Frames by which a correct match may miss its query
    :param n_thresholds: The number of evenly spaced ratio thresholds in (0, 1]
    :param direction: Accept ratios below or above the threshold
    """
    if not queries:
        raise ValueError("cannot evaluate zero queries")
    results = retrieve_all(queries, db)
    curve = pr_curve(results, tolerance, default_thresholds(n_thresholds), direction)
    logger.info("evaluated %d queries against %d frames: auc=%.4f", len(queries), len(db), curve.auc)
    return Evaluation(curve=curve, results=results, tolerance=tolerance)


def write_pr_csv(curve: PRCurve, path: PathHint) -> None:
    """Write ``threshold,precision,recall`` rows followed by an ``# auc=`` line."""
    with atomic_write(path, "w") as file:
        writer = csv.writer(file, lineterminator="\n")
        writer.writerow(["threshold", "precision", "recall"])
        for threshold, (precision, recall) in zip(curve.thresholds, curve.points):
            writer.writerow([f"{threshold:.6f}", f"{precision:.6f}", f"{recall:.6f}"])
        file.write(f"# auc={curve.auc:.6f}\n")


def write_query_csv(
    results: Sequence[RetrievalResult], tolerance: int, path: PathHint
) -> None:
    """Write ``frame,best,d1,d2,correct`` rows, one per query."""
    with atomic_write(path, "w") as file:
        writer = csv.writer(file, lineterminator="\n")
        writer.writerow(["frame", "best", "d1", "d2", "correct"])
        for result in results:
            correct = is_true_positive(result.query_frame, result.best_frame, tolerance)
            writer.writerow(
                [
                    result.query_frame,
                    result.best_frame,
                    f"{result.d1:.6f}",
                    f"{result.d2:.6f}",
                    int(correct),
                ]
            )

