"""
学習モジュールのテストスクリプト

初期化、クラス重み、損失、モーメンタムSGD、k分割、学習ドライバーを確認します。
"""
import math
import os
import sys
import unittest

import numpy as np

# プロジェクトルートディレクトリをパスに追加
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from utils import ConfigError, ShapeError, Config, set_config, reset_config
from models.anatomy import NUM_CLASSES, OTHER
from models.tree_graph import compute_positional_encodings, select_anchors
from networks.cnn import CnnConfig
from networks.gnn import ARCHITECTURES, GnnConfig, gnn_param_shapes
from networks.tensor import Tensor, parameter
from controllers.synthetic_generator import SyntheticTreeSpec, generate_tree, rasterize_tree
from controllers.trainer import (
    CnnSample, GnnSample, TrainConfig, class_weights, he_init, init_params, kfold_split,
    sgd_momentum_step, train_cnn, train_gnn, weighted_cross_entropy, weighted_loss,
)

# 35枝を1層目で分けられる次元
FEATURE_DIM = 64


def gnn_sample(seed=0):
    tree = generate_tree(SyntheticTreeSpec.template(seed=11))
    graph = tree.to_graph()
    anchors = select_anchors(graph, graph.reference_map())
    features = np.random.default_rng(seed).standard_normal((graph.num_nodes, FEATURE_DIM)).astype(np.float32)
    return GnnSample(tree_id="t11", graph=graph, features=features,
                     encodings=compute_positional_encodings(graph, anchors),
                     targets=graph.class_targets(default=OTHER))


class TestInitialization(unittest.TestCase):
    """He 初期化のテストクラス"""

    def test_deterministic(self):
        a = he_init((4, 5), 10, np.random.default_rng(3))
        b = he_init((4, 5), 10, np.random.default_rng(3))
        np.testing.assert_array_equal(a, b)
        self.assertEqual(a.dtype, np.float32)

    def test_empty_shape(self):
        self.assertEqual(he_init((0,), 3, np.random.default_rng(0)).size, 0)

    def test_variance(self):
        samples = he_init((100000,), 50, np.random.default_rng(1)).astype(np.float64)
        self.assertLess(abs(samples.var() - 0.04), 0.04 * 0.05)
        self.assertLess(abs(samples.mean()), 0.01)

    def test_zero_fan_in(self):
        with self.assertRaises(ValueError):
            he_init((2,), 0, np.random.default_rng(0))

    def test_biases_start_at_zero(self):
        params = init_params({"w": ((3, 2), 3), "b": ((2,), 0)}, seed=0)
        np.testing.assert_array_equal(params["b"].data, np.zeros(2, dtype=np.float32))
        self.assertTrue(params["w"].requires_grad)


class TestClassWeights(unittest.TestCase):
    """クラス重みのテストクラス"""

    def test_balanced(self):
        np.testing.assert_allclose(class_weights(list(range(NUM_CLASSES)) * 3), np.ones(NUM_CLASSES))

    def test_hand_computed(self):
        np.testing.assert_allclose(class_weights([0] * 10 + [1] * 30, num_classes=2), [1.5, 0.5])

    def test_absent_class_gets_clamped_weight(self):
        labels = [c for c in range(NUM_CLASSES) if c != 5] * 2
        weights = class_weights(labels)
        self.assertEqual(weights.argmax(), 5)
        self.assertAlmostEqual(weights[5] / weights[0], 2.0)
        self.assertAlmostEqual(weights.mean(), 1.0)

    def test_errors(self):
        with self.assertRaises(ValueError):
            class_weights([])
        with self.assertRaises(ValueError):
            class_weights([NUM_CLASSES])


class TestLoss(unittest.TestCase):
    """重み付き交差エントロピーのテストクラス"""

    def test_scalar_cases(self):
        weights = np.ones(NUM_CLASSES)
        certain = np.zeros(NUM_CLASSES)
        certain[4] = 1.0
        self.assertEqual(weighted_cross_entropy(certain, 4, weights), 0.0)
        uniform = np.full(NUM_CLASSES, 1 / NUM_CLASSES)
        self.assertAlmostEqual(weighted_cross_entropy(uniform, 0, weights), math.log(22), places=10)
        doubled = weights.copy()
        doubled[0] = 2.0
        self.assertAlmostEqual(weighted_cross_entropy(uniform, 0, doubled), 2 * math.log(22), places=10)
        with self.assertRaises(ValueError):
            weighted_cross_entropy(uniform, NUM_CLASSES, weights)

    def test_clamped_log(self):
        zero = np.zeros(NUM_CLASSES)
        zero[1] = 1.0
        self.assertAlmostEqual(weighted_cross_entropy(zero, 0, np.ones(NUM_CLASSES)), -math.log(1e-12))

    def test_fused_loss_matches_row_loss(self):
        rng = np.random.default_rng(2)
        logits = rng.standard_normal((5, NUM_CLASSES))
        targets = np.array([0, 3, 21, 3, 7])
        weights = rng.random(NUM_CLASSES) + 0.5
        probs = np.exp(logits - logits.max(axis=1, keepdims=True))
        probs /= probs.sum(axis=1, keepdims=True)
        expected = np.mean([weighted_cross_entropy(p, t, weights) for p, t in zip(probs, targets)])
        loss = weighted_loss(Tensor(logits), targets, weights)
        self.assertAlmostEqual(float(loss.data), expected, places=10)
        with self.assertRaises(ShapeError):
            weighted_loss(Tensor(logits), targets[:3], weights)


class TestSgdMomentum(unittest.TestCase):
    """モーメンタムSGDのテストクラス"""

    def test_hand_computed_step(self):
        params = {"p": parameter(np.array([1.0]), dtype=np.float64)}
        state = {}
        sgd_momentum_step(params, {"p": np.array([2.0])}, state, lr=0.1, momentum=0.9)
        np.testing.assert_allclose(state["p"], [2.0])
        np.testing.assert_allclose(params["p"].data, [0.8])
        sgd_momentum_step(params, {"p": np.array([2.0])}, state, lr=0.1, momentum=0.9)
        np.testing.assert_allclose(state["p"], [1.9 * 2.0])

    def test_zero_gradient(self):
        params = {"p": parameter(np.array([[1.5, -2.0]]))}
        before = params["p"].data.copy()
        sgd_momentum_step(params, {"p": None}, {}, lr=0.5, momentum=0.9)
        np.testing.assert_array_equal(params["p"].data, before)

    def test_matches_scalar_reference(self):
        rng = np.random.default_rng(4)
        p0 = rng.standard_normal(6)
        grads = rng.standard_normal((5, 6))
        params = {"p": parameter(p0, dtype=np.float64)}
        state = {}
        for g in grads:
            sgd_momentum_step(params, {"p": g}, state, lr=0.05, momentum=0.9)
        for i in range(6):
            p, v = p0[i], 0.0
            for g in grads[:, i]:
                v = 0.9 * v + g
                p = p - 0.05 * v
            self.assertEqual(float(params["p"].data[i]), p)

    def test_shape_mismatch(self):
        params = {"p": parameter(np.zeros(3))}
        with self.assertRaises(ShapeError):
            sgd_momentum_step(params, {"p": np.zeros(4)}, {}, lr=0.1, momentum=0.9)


class TestKFold(unittest.TestCase):
    """k分割のテストクラス"""

    def test_partition(self):
        splits = kfold_split(10, 5, seed=0)
        self.assertEqual([len(test) for _, test in splits], [2] * 5)
        union = np.concatenate([test for _, test in splits])
        self.assertEqual(sorted(union.tolist()), list(range(10)))
        for train, test in splits:
            self.assertEqual(sorted(np.concatenate([train, test]).tolist()), list(range(10)))

    def test_uneven_sizes(self):
        sizes = [len(test) for _, test in kfold_split(11, 3, seed=5)]
        self.assertLessEqual(max(sizes) - min(sizes), 1)
        self.assertEqual(sum(sizes), 11)

    def test_deterministic(self):
        a = kfold_split(9, 3, seed=7)
        b = kfold_split(9, 3, seed=7)
        for (ta, sa), (tb, sb) in zip(a, b):
            np.testing.assert_array_equal(ta, tb)
            np.testing.assert_array_equal(sa, sb)

    def test_errors(self):
        with self.assertRaises(ValueError):
            kfold_split(3, 5, seed=0)
        with self.assertRaises(ValueError):
            kfold_split(3, 1, seed=0)


class TestTrainConfig(unittest.TestCase):
    """学習設定のテストクラス"""

    def tearDown(self):
        reset_config()

    def test_validation(self):
        with self.assertRaises(ConfigError):
            TrainConfig(lr=-1.0)
        with self.assertRaises(ConfigError):
            TrainConfig(momentum=1.0)
        with self.assertRaises(ConfigError):
            TrainConfig(epochs=0)
        with self.assertRaises(ConfigError):
            TrainConfig(folds=1)
        with self.assertRaises(ConfigError):
            TrainConfig(class_weight_mode="focal")

    def test_deep_defaults(self):
        set_config(Config())
        deep = TrainConfig.from_settings(layers=7)
        self.assertEqual(deep.lr, 1e-5)
        self.assertEqual(deep.epochs, 250)
        shallow = TrainConfig.from_settings(layers=4)
        self.assertEqual(shallow.lr, 5e-4)
        self.assertEqual(shallow.epochs, 150)
        explicit = TrainConfig.from_settings(layers=7, lr=1e-3, epochs=None)
        self.assertEqual(explicit.lr, 1e-3)
        self.assertEqual(explicit.epochs, 250)

    def test_overfit_profile(self):
        set_config(Config())
        gcn = TrainConfig.for_overfit("gcn", seed=2)
        self.assertEqual((gcn.lr, gcn.epochs, gcn.seed), (1e-2, 200, 2))
        self.assertEqual(gcn.class_weight_mode, "uniform")
        self.assertEqual(TrainConfig.for_overfit("cnn", epochs=50).epochs, 50)
        with self.assertRaises(ConfigError):
            TrainConfig.for_overfit("unet")


class TestTrainGnn(unittest.TestCase):
    """GNN学習ドライバーのテストクラス"""

    @classmethod
    def setUpClass(cls):
        cls.sample = gnn_sample()

    def config(self, arch, **overrides):
        return GnnConfig(arch=arch, layers=2, feature_dim=FEATURE_DIM, **overrides)

    def test_loss_decreases_for_every_architecture(self):
        for arch in ARCHITECTURES:
            for seed in (0, 1, 2):
                with self.subTest(arch=arch, seed=seed):
                    run = train_gnn([self.sample], self.config(arch), TrainConfig(lr=1e-3, epochs=15, seed=seed))
                    self.assertEqual(len(run.history), 15)
                    self.assertLess(run.history[-1].loss, run.history[0].loss)

    def test_every_architecture_overfits_single_tree(self):
        set_config(Config())
        self.addCleanup(reset_config)
        for arch in ARCHITECTURES:
            for seed in (0, 1, 2):
                with self.subTest(arch=arch, seed=seed):
                    train = TrainConfig.for_overfit(arch, seed=seed)
                    self.assertEqual(train.epochs, 200)
                    run = train_gnn([self.sample], self.config(arch), train)
                    self.assertEqual(run.best_acc, 1.0)
                    self.assertIsNotNone(run.first_epoch_reaching(1.0))

    def test_zero_learning_rate_keeps_initial_params(self):
        cfg = self.config("gats")
        run = train_gnn([self.sample], cfg, TrainConfig(lr=0.0, epochs=2, seed=4))
        initial = init_params(gnn_param_shapes(cfg), seed=4)
        for name, value in run.checkpoint.tensors.items():
            np.testing.assert_array_equal(value, initial[name].data)

    def test_deterministic_runs(self):
        cfg = self.config("spgnn", pe_mode="nlpe")
        a = train_gnn([self.sample], cfg, TrainConfig(lr=1e-3, epochs=3, seed=9))
        b = train_gnn([self.sample], cfg, TrainConfig(lr=1e-3, epochs=3, seed=9))
        self.assertEqual([r.loss for r in a.history], [r.loss for r in b.history])
        for name in a.checkpoint.tensors:
            np.testing.assert_array_equal(a.checkpoint.tensors[name], b.checkpoint.tensors[name])
        self.assertEqual(a.checkpoint.kind, "gnn")
        self.assertEqual(a.checkpoint.config["gnn"]["pe_mode"], "nlpe")

    def test_epoch_callback(self):
        seen = []
        train_gnn([self.sample], self.config("gcn"), TrainConfig(lr=1e-3, epochs=4), on_epoch=seen.append)
        self.assertEqual([r.epoch for r in seen], [1, 2, 3, 4])

    def test_errors(self):
        with self.assertRaises(ValueError):
            train_gnn([], self.config("gats"), TrainConfig(epochs=1))
        with self.assertRaises(ShapeError):
            GnnSample(tree_id="bad", graph=self.sample.graph, features=self.sample.features[:3],
                      encodings=None, targets=self.sample.targets)


class TestTrainCnn(unittest.TestCase):
    """CNN学習ドライバーのテストクラス"""

    @classmethod
    def setUpClass(cls):
        tree = generate_tree(SyntheticTreeSpec.template(seed=12))
        cls.samples = [CnnSample(tree_id="t12", label_map=rasterize_tree(tree), graph=tree.to_graph())]
        cls.cfg = CnnConfig(patch_side=16, channels=(2, 3, 4), widen_channels=5, feature_dim=8)

    def test_deterministic_checkpoint(self):
        train = TrainConfig(lr=1e-3, epochs=2, seed=3, batch_size=8)
        a = train_cnn(self.samples, self.cfg, train)
        b = train_cnn(self.samples, self.cfg, train)
        self.assertEqual([r.loss for r in a.history], [r.loss for r in b.history])
        for name in a.checkpoint.tensors:
            np.testing.assert_array_equal(a.checkpoint.tensors[name], b.checkpoint.tensors[name])
        self.assertEqual(a.checkpoint.kind, "cnn")
        self.assertEqual(a.checkpoint.config["cnn"]["patch_side"], 16)

    def test_loss_decreases(self):
        run = train_cnn(self.samples, self.cfg, TrainConfig(lr=1e-3, epochs=8, seed=0, batch_size=64))
        self.assertLess(run.history[-1].loss, run.history[0].loss)

    def test_desk_config_overfits_single_tree(self):
        set_config(Config())
        self.addCleanup(reset_config)
        desk = CnnConfig.from_settings("desk", patch_side=16)
        run = train_cnn(self.samples, desk, TrainConfig.for_overfit("cnn", epochs=50))
        self.assertEqual(len(run.history), 50)
        self.assertEqual(run.best_acc, 1.0)

    def test_empty_corpus(self):
        with self.assertRaises(ValueError):
            train_cnn([], self.cfg, TrainConfig(epochs=1))


if __name__ == "__main__":
    unittest.main()
