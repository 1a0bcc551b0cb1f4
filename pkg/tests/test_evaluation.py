"""Tests for retrieval, the ratio test, and precision-recall curves."""

import tempfile
import unittest
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from saane.evaluation import (
    RetrievalResult,
    area_under_curve,
    default_thresholds,
    distance_ratio,
    evaluate,
    is_true_positive,
    pr_curve,
    retrieve,
    retrieve_all,
    write_pr_csv,
    write_query_csv,
)
from saane.head import Embedding
from saane.tensor import ShapeError

from .oracles import confusion_curve, retrieve_sort


def _embeddings(values: np.ndarray, ids=None):
    if ids is None:
        ids = range(len(values))
    return [Embedding(row, source_id=i) for row, i in zip(values, ids)]


#: Four queries whose curve is tabulated by hand below
HAND_RESULTS = [
    RetrievalResult(query_frame=0, best_frame=0, d1=1.0, d2=4.0),
    RetrievalResult(query_frame=10, best_frame=10, d1=3.0, d2=4.0),
    RetrievalResult(query_frame=20, best_frame=50, d1=1.0, d2=2.0),
    RetrievalResult(query_frame=30, best_frame=31, d1=2.0, d2=2.0),
]


class TestRetrieval(unittest.TestCase):
    """Tests for nearest-neighbor retrieval."""

    def test_true_positive(self):
        """Test the frame tolerance."""
        for query, best, tolerance, expected in [
            (100, 104, 5, True),
            (100, 105, 5, True),
            (100, 106, 5, False),
            (100, 95, 5, True),
            (100, 94, 5, False),
            (7, 7, 0, True),
            (7, 8, 0, False),
        ]:
            with self.subTest(query=query, best=best, tolerance=tolerance):
                self.assertEqual(expected, is_true_positive(query, best, tolerance))
        with self.assertRaises(ValueError):
            is_true_positive(1, 1, -1)

    def test_ratio(self):
        """Test the distance ratio, including the degenerate case."""
        self.assertEqual(0.5, distance_ratio(1.0, 2.0))
        self.assertEqual(0.0, distance_ratio(0.0, 2.0))
        self.assertEqual(1.0, distance_ratio(0.0, 0.0))

    def test_result_order(self):
        """Test a result cannot have its best match farther than the second best."""
        with self.assertRaises(ValidationError):
            RetrievalResult(query_frame=0, best_frame=0, d1=2.0, d2=1.0)

    def test_self_match(self):
        """Test a query found in the database matches itself at distance zero."""
        rng = np.random.default_rng(0)
        db = _embeddings(rng.normal(size=(6, 5)), ids=[10, 11, 12, 13, 14, 15])
        result = retrieve(Embedding(db[2].values, source_id=12), db)
        self.assertEqual(12, result.best_frame)
        self.assertEqual(0.0, result.d1)
        self.assertGreater(result.d2, 0.0)
        self.assertEqual(0.0, result.ratio)

    def test_tie(self):
        """Test ties go to the earlier database entry and give a ratio of one."""
        values = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        db = _embeddings(values, ids=[7, 3, 9])
        result = retrieve(Embedding(np.array([1.0, 0.0]), source_id=3), db)
        self.assertEqual(7, result.best_frame)
        self.assertEqual((0.0, 0.0), (result.d1, result.d2))
        self.assertEqual(1.0, result.ratio)

    def test_position_frames(self):
        """Test database entries without a source identifier are known by position."""
        db = _embeddings(np.array([[0.0, 0.0], [5.0, 0.0], [9.0, 0.0]]), ids=[-1, -1, -1])
        result = retrieve(Embedding(np.array([4.0, 0.0]), source_id=1), db)
        self.assertEqual(1, result.best_frame)

    def test_differing_lengths(self):
        """Test rejection of embeddings of differing lengths."""
        db = [Embedding(np.ones(3)), Embedding(np.zeros(3))]
        with self.assertRaises(ShapeError):
            retrieve(Embedding(np.ones(4)), db)

    def test_small_db(self):
        """Test the ratio test needs two database entries."""
        with self.assertRaises(ValueError):
            retrieve(Embedding(np.ones(2)), [Embedding(np.ones(2))])

    def test_oracle(self):
        """Test exhaustive search against sorting on random instances."""
        rng = np.random.default_rng(1)
        for trial in range(100):
            n, d = int(rng.integers(2, 30)), int(rng.integers(1, 10))
            db = rng.normal(size=(n, d))
            queries = rng.normal(size=(5, d))
            results = retrieve_all(_embeddings(queries), _embeddings(db))
            for query, result in zip(queries, results):
                with self.subTest(trial=trial, query=result.query_frame):
                    index, d1, d2 = retrieve_sort(query, db)
                    self.assertEqual(index, result.best_frame)
                    self.assertAlmostEqual(d1, result.d1)
                    self.assertAlmostEqual(d2, result.d2)

    def test_rotation_invariance(self):
        """Test retrieval depends only on distances."""
        rng = np.random.default_rng(2)
        db = rng.normal(size=(40, 8))
        queries = db + 0.3 * rng.normal(size=db.shape)
        rotation, _ = np.linalg.qr(rng.normal(size=(8, 8)))
        original = retrieve_all(_embeddings(queries), _embeddings(db))
        rotated = retrieve_all(_embeddings(queries @ rotation), _embeddings(db @ rotation))
        for a, b in zip(original, rotated):
            with self.subTest(query=a.query_frame):
                self.assertEqual(a.best_frame, b.best_frame)
                self.assertAlmostEqual(a.d1, b.d1)
                self.assertAlmostEqual(a.d2, b.d2)


class TestCurve(unittest.TestCase):
    """Tests for precision-recall curves."""

    def test_thresholds(self):
        """Test the evenly spaced default thresholds."""
        thresholds = default_thresholds(4)
        self.assertEqual([0.25, 0.5, 0.75, 1.0], thresholds)
        self.assertEqual(100, len(default_thresholds()))
        self.assertEqual(1.0, default_thresholds()[-1])

    def test_hand_tabulation(self):
        """Test a curve tabulated by hand."""
        curve = pr_curve(HAND_RESULTS, 5, [0.25, 0.5, 0.75, 1.0])
        expected = [(1.0, 0.25), (0.5, 0.25), (2 / 3, 0.5), (0.75, 0.75)]
        for (precision, recall), (p, r) in zip(expected, curve.points):
            self.assertAlmostEqual(precision, p)
            self.assertAlmostEqual(recall, r)
        # anchor at precision 0.5, then trapezoids over recall
        auc = 0.25 * 0.5 + 0.25 * (1 + 2 / 3) / 2 + 0.25 * (2 / 3 + 0.75) / 2
        self.assertAlmostEqual(auc, curve.auc)

    def test_above(self):
        """Test accepting ratios above the threshold."""
        curve = pr_curve(HAND_RESULTS, 5, [0.25, 0.5, 0.75, 1.0], direction="above")
        expected = [(0.75, 0.75), (2 / 3, 0.5), (1.0, 0.5), (1.0, 0.25)]
        for (precision, recall), (p, r) in zip(expected, curve.points):
            self.assertAlmostEqual(precision, p)
            self.assertAlmostEqual(recall, r)

    def test_confusion_oracle(self):
        """Test against counting accepted and correct queries on random instances."""
        rng = np.random.default_rng(3)
        thresholds = default_thresholds(20)
        for trial in range(100):
            n = int(rng.integers(1, 40))
            results = []
            for frame in range(n):
                d2 = float(rng.uniform(0.1, 2))
                results.append(
                    RetrievalResult(
                        query_frame=frame,
                        best_frame=frame + int(rng.integers(-3, 4)),
                        d1=float(rng.uniform(0, d2)),
                        d2=d2,
                    )
                )
            ratios = [result.ratio for result in results]
            correct = [is_true_positive(r.query_frame, r.best_frame, 1) for r in results]
            with self.subTest(trial=trial):
                curve = pr_curve(results, 1, thresholds)
                expected = confusion_curve(ratios, correct, thresholds)
                self.assertTrue(np.allclose(expected, curve.points))
                recalls = curve.recalls
                self.assertTrue(all(a <= b for a, b in zip(recalls, recalls[1:])))
                self.assertGreaterEqual(curve.auc, 0.0)
                self.assertLessEqual(curve.auc, 1.0)

    def test_nothing_accepted(self):
        """Test precision is one when no query is accepted."""
        results = [RetrievalResult(query_frame=0, best_frame=0, d1=1.0, d2=1.0)]
        curve = pr_curve(results, 0, [0.5, 1.0])
        self.assertEqual([(1.0, 0.0), (1.0, 1.0)], curve.points)

    def test_perfect_and_wrong(self):
        """Test the extreme curves."""
        perfect = [RetrievalResult(query_frame=i, best_frame=i, d1=0.0, d2=1.0) for i in range(5)]
        self.assertEqual(1.0, pr_curve(perfect, 0, default_thresholds()).auc)
        wrong = [
            RetrievalResult(query_frame=i, best_frame=i + 10, d1=0.0, d2=1.0) for i in range(5)
        ]
        self.assertEqual(0.0, pr_curve(wrong, 0, default_thresholds()).auc)

    def test_area_invariance(self):
        """Test that duplicated or reordered points do not change the area."""
        points = pr_curve(HAND_RESULTS, 5, [0.25, 0.5, 0.75, 1.0]).points
        area = area_under_curve(points)
        self.assertAlmostEqual(area, area_under_curve(points + [points[2], points[3]]))
        self.assertAlmostEqual(area, area_under_curve(points[::-1]))

    def test_invalid(self):
        """Test rejection of invalid thresholds, directions, and empty inputs."""
        for name, thresholds in [
            ("zero", [0.0, 1.0]),
            ("above one", [0.5, 1.5]),
            ("decreasing", [0.75, 0.5]),
            ("repeated", [0.5, 0.5]),
            ("empty", []),
        ]:
            with self.subTest(name=name), self.assertRaises(ValueError):
                pr_curve(HAND_RESULTS, 5, thresholds)
        with self.assertRaises(ValueError):
            pr_curve(HAND_RESULTS, 5, [1.0], direction="sideways")
        with self.assertRaises(ValueError):
            pr_curve([], 5, [1.0])


class TestEvaluate(unittest.TestCase):
    """Tests for whole evaluations."""

    def test_self(self):
        """Test that querying the database with itself is perfect."""
        rng = np.random.default_rng(4)
        db = _embeddings(rng.normal(size=(30, 16)))
        evaluation = evaluate(db, db, tolerance=0)
        self.assertEqual(1.0, evaluation.curve.auc)
        self.assertEqual(30, len(evaluation.results))

    def test_self_without_identifiers(self):
        """Test that embeddings without source identifiers are framed by position."""
        rng = np.random.default_rng(4)
        db = [Embedding(row) for row in rng.normal(size=(30, 16))]
        evaluation = evaluate(db, db, tolerance=0)
        self.assertEqual(1.0, evaluation.curve.auc)
        self.assertEqual(list(range(30)), [result.query_frame for result in evaluation.results])
        self.assertEqual(list(range(30)), [result.best_frame for result in evaluation.results])

    def test_random(self):
        """Test that unrelated embeddings localize no better than chance."""
        rng = np.random.default_rng(5)
        db = _embeddings(rng.normal(size=(1000, 32)))
        queries = _embeddings(rng.normal(size=(1000, 32)))
        self.assertLess(evaluate(db, queries, tolerance=0).curve.auc, 0.05)

    def test_csv(self):
        """Test the curve and per-query outputs."""
        curve = pr_curve(HAND_RESULTS, 5, [0.5, 1.0])
        with tempfile.TemporaryDirectory() as directory:
            pr_path = Path(directory).joinpath("pr.csv")
            write_pr_csv(curve, pr_path)
            lines = pr_path.read_text().splitlines()
            self.assertEqual("threshold,precision,recall", lines[0])
            self.assertEqual("0.500000,0.500000,0.250000", lines[1])
            self.assertEqual("1.000000,0.750000,0.750000", lines[2])
            self.assertEqual(f"# auc={curve.auc:.6f}", lines[3])

            query_path = Path(directory).joinpath("queries.csv")
            write_query_csv(HAND_RESULTS, 5, query_path)
            lines = query_path.read_text().splitlines()
            self.assertEqual("frame,best,d1,d2,correct", lines[0])
            self.assertEqual("20,50,1.000000,2.000000,0", lines[3])
            self.assertEqual("30,31,2.000000,2.000000,1", lines[4])
