"""
評価指標（ACC・TD・カッパ）のテストスクリプト
"""
import os
import sys
import unittest

import networkx as nx
import numpy as np

# プロジェクトルートディレクトリをパスに追加
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from utils import GraphError
from models.anatomy import CLASS_NAMES, SEGMENTAL_CLASSES
from models.tree_graph import TreeGraph
from controllers.metrics import (
    accuracy_per_class, evaluate_dataset, kappa_agreement_level, topological_distance,
    tree_topological_distances, weighted_kappa_linear,
)


def random_tree(rng, n):
    ids = [int(i) for i in rng.choice(np.arange(1, 100), size=n, replace=False)]
    edges = [(ids[i], ids[int(rng.integers(0, i))]) for i in range(1, n)]
    return TreeGraph(node_ids=ids, edges=edges)


def kappa_oracle(confusion):
    """不一致重み |i-j|/(k-1) による 1 - ΣwO / ΣwE（スカラーで計算）"""
    k = len(confusion)
    n = sum(sum(row) for row in confusion)
    rows = [sum(confusion[i]) for i in range(k)]
    cols = [sum(confusion[i][j] for i in range(k)) for j in range(k)]
    observed = 0.0
    expected = 0.0
    for i in range(k):
        for j in range(k):
            w = abs(i - j) / (k - 1)
            observed += w * confusion[i][j] / n
            expected += w * rows[i] * cols[j] / (n * n)
    return 1.0 - observed / expected


def ratings_from_confusion(confusion, categories):
    a, b = [], []
    for i, row in enumerate(confusion):
        for j, count in enumerate(row):
            a.extend([categories[i]] * count)
            b.extend([categories[j]] * count)
    return a, b


class TestAccuracy(unittest.TestCase):
    """クラスごとの正解率のテストクラス"""

    def setUp(self):
        self.reference = {c: 100 + c for c in SEGMENTAL_CLASSES}

    def test_all_correct(self):
        metrics = accuracy_per_class([self.reference, self.reference], [self.reference, self.reference])
        for m in metrics.per_class.values():
            self.assertEqual(m.acc, 1.0)
        self.assertEqual(metrics.overall_acc["mean"], 1.0)

    def test_one_tree_wrong(self):
        wrong = dict(self.reference)
        wrong[SEGMENTAL_CLASSES[0]] = 999
        metrics = accuracy_per_class([self.reference, wrong], [self.reference, self.reference])
        self.assertEqual(metrics.per_class[SEGMENTAL_CLASSES[0]].acc, 0.5)
        self.assertEqual(metrics.per_class[SEGMENTAL_CLASSES[1]].acc, 1.0)

    def test_missing_reference_class_leaves_denominator(self):
        partial = dict(self.reference)
        del partial[SEGMENTAL_CLASSES[2]]
        metrics = accuracy_per_class([self.reference, self.reference], [self.reference, partial])
        self.assertEqual(metrics.per_class[SEGMENTAL_CLASSES[2]].n_ref, 1)
        self.assertEqual(metrics.per_class[SEGMENTAL_CLASSES[2]].acc, 1.0)

    def test_unpredicted_counts_as_wrong(self):
        predicted = dict(self.reference)
        del predicted[SEGMENTAL_CLASSES[3]]
        metrics = accuracy_per_class([predicted], [self.reference])
        m = metrics.per_class[SEGMENTAL_CLASSES[3]]
        self.assertEqual((m.acc, m.n_unpredicted), (0.0, 1))
        self.assertEqual(metrics.to_dict()["overall"]["n_unpredicted"], 1)

    def test_random_vs_counting(self):
        rng = np.random.default_rng(0)
        references = [{c: int(rng.integers(1, 30)) for c in SEGMENTAL_CLASSES} for _ in range(12)]
        assignments = [{c: int(rng.integers(1, 30)) for c in SEGMENTAL_CLASSES} for _ in range(12)]
        metrics = accuracy_per_class(assignments, references)
        for c in SEGMENTAL_CLASSES:
            correct = sum(1 for a, r in zip(assignments, references) if a[c] == r[c])
            self.assertEqual(metrics.per_class[c].acc, correct / 12)

    def test_empty_dataset(self):
        with self.assertRaises(ValueError):
            accuracy_per_class([], [])
        with self.assertRaises(ValueError):
            accuracy_per_class([self.reference], [self.reference, self.reference])


class TestTopologicalDistance(unittest.TestCase):
    """位相距離のテストクラス"""

    def setUp(self):
        # 1 - 2 - 3 - 4、2 - 5
        self.graph = TreeGraph(node_ids=[1, 2, 3, 4, 5], edges=[(1, 2), (2, 3), (3, 4), (2, 5)])
        self.s = SEGMENTAL_CLASSES[0]

    def test_correct_is_excluded(self):
        self.assertEqual(tree_topological_distances({self.s: 3}, {self.s: 3}, self.graph), {})

    def test_parent_is_one_hop(self):
        self.assertEqual(tree_topological_distances({self.s: 2}, {self.s: 3}, self.graph), {self.s: 1})
        self.assertEqual(tree_topological_distances({self.s: 4}, {self.s: 5}, self.graph), {self.s: 3})

    def test_correct_dataset_has_no_samples(self):
        reference = {c: 1 + i % 5 for i, c in enumerate(SEGMENTAL_CLASSES)}
        metrics = evaluate_dataset([reference], [reference], [self.graph])
        for m in metrics.per_class.values():
            self.assertEqual(m.td_samples, [])
            self.assertIsNone(m.td_mean)
        self.assertIsNone(metrics.overall_td["mean"])

    def test_unknown_node(self):
        with self.assertRaises(GraphError):
            tree_topological_distances({self.s: 9}, {self.s: 3}, self.graph)
        with self.assertRaises(GraphError):
            tree_topological_distances({self.s: 1}, {self.s: 9}, self.graph)

    def test_random_trees_vs_floyd_warshall(self):
        rng = np.random.default_rng(1)
        graphs, assignments, references = [], [], []
        for _ in range(30):
            g = random_tree(rng, int(rng.integers(2, 21)))
            graphs.append(g)
            assignments.append({c: int(rng.choice(g.node_ids)) for c in SEGMENTAL_CLASSES})
            references.append({c: int(rng.choice(g.node_ids)) for c in SEGMENTAL_CLASSES})
        metrics = topological_distance(assignments, references, graphs)
        for c in SEGMENTAL_CLASSES:
            samples = []
            for g, a, r in zip(graphs, assignments, references):
                if a[c] != r[c]:
                    lengths = nx.floyd_warshall_numpy(g.to_networkx(), nodelist=g.node_ids)
                    samples.append(int(lengths[g.index_of(a[c]), g.index_of(r[c])]))
            self.assertEqual(metrics.per_class[c].td_samples, samples)
            if samples:
                self.assertAlmostEqual(metrics.per_class[c].td_mean, float(np.mean(samples)))


class TestKappa(unittest.TestCase):
    """線形重み付きカッパのテストクラス"""

    def test_identical(self):
        ratings = ["a", "b", "c", "b", "a"]
        result = weighted_kappa_linear(ratings, ratings, ["a", "b", "c"])
        self.assertAlmostEqual(result.kappa, 1.0, places=12)
        self.assertEqual(result.to_dict()["level"], "excellent")

    def test_chance_level(self):
        a = ["x"] * 1000
        b = ["x", "y"] * 500
        self.assertAlmostEqual(weighted_kappa_linear(a, b, ["x", "y"]).kappa, 0.0, places=12)

    def test_confusion_matrix_oracle(self):
        confusion = [[2, 1, 0], [0, 2, 1], [1, 0, 2]]
        a, b = ratings_from_confusion(confusion, ["p", "q", "r"])
        result = weighted_kappa_linear(a, b, ["p", "q", "r"])
        self.assertAlmostEqual(result.kappa, kappa_oracle(confusion), delta=1e-10)
        self.assertLess(result.ci_low, result.kappa)
        self.assertGreater(result.ci_high, result.kappa)
        self.assertAlmostEqual(result.ci_high - result.kappa, 1.96 * result.se)

    def test_class_names_as_categories(self):
        a = [CLASS_NAMES[3], CLASS_NAMES[4], CLASS_NAMES[5], CLASS_NAMES[3]]
        b = [CLASS_NAMES[3], CLASS_NAMES[5], CLASS_NAMES[5], CLASS_NAMES[4]]
        result = weighted_kappa_linear(a, b, CLASS_NAMES)
        self.assertEqual(result.n, 4)
        self.assertLess(result.kappa, 1.0)

    def test_errors(self):
        with self.assertRaises(ValueError):
            weighted_kappa_linear(["a"], ["a", "b"], ["a", "b"])
        with self.assertRaises(ValueError):
            weighted_kappa_linear(["a"], ["a"], ["a", "b"])
        with self.assertRaises(ValueError):
            weighted_kappa_linear(["a", "z"], ["a", "b"], ["a", "b"])

    def test_agreement_levels(self):
        self.assertEqual(kappa_agreement_level(0.1), "slight")
        self.assertEqual(kappa_agreement_level(0.3), "fair")
        self.assertEqual(kappa_agreement_level(0.5), "moderate")
        self.assertEqual(kappa_agreement_level(0.7), "good")
        self.assertEqual(kappa_agreement_level(0.9), "excellent")


if __name__ == "__main__":
    unittest.main()
