"""
GNNのテストスクリプト

各層を密行列で書いた式と比べ、全アーキテクチャの勾配と置換等価性を確認します。
"""
import os
import sys
import unittest

import numpy as np

# プロジェクトルートディレクトリをパスに追加
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))
sys.path.insert(0, os.path.abspath(os.path.dirname(__file__)))

from gradcheck import REL_TOL, numeric_gradient_errors, weighted_sum
from utils import ConfigError, GraphError, ShapeError, set_config, reset_config, Config
from models.anatomy import NUM_ANCHORS, NUM_CLASSES
from models.tree_graph import TreeGraph
from networks.gnn import (
    ARCHITECTURES, GnnConfig, GraphIndex, gat_attention, gat_layer, gcn_layer, gin_layer,
    gnn_apply, gnn_param_shapes, gats_forward, hidden_features, predict_probs, sage_layer,
    spgnn_forward,
)
from networks.tensor import Tensor, parameter

FEATURE_DIM = 8
ANCHORS = 4


def elu(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0)))


def random_tree(rng, n):
    ids = [int(i) for i in rng.choice(np.arange(1, 100), size=n, replace=False)]
    edges = [(ids[i], ids[int(rng.integers(0, i))]) for i in range(1, n)]
    return TreeGraph(node_ids=ids, edges=edges)


def closed_neighborhood(graph, row):
    return sorted(graph.neighbor_rows(row) + [row])


def random_weights(rng, shapes):
    return {name: parameter(rng.normal(0.0, np.sqrt(2.0 / max(fan_in, 1)), size=shape), dtype=np.float64)
            for name, (shape, fan_in) in shapes.items()}


def layer_weights(rng, kind, d_in, d_out):
    if kind == "gat":
        shapes = {"W_g": ((d_in, d_out), d_in), "W_a": ((d_in, d_out), d_in), "W_r": ((2 * d_out, 1), 2 * d_out)}
    elif kind == "gcn":
        shapes = {"W": ((d_in, d_out), d_in)}
    elif kind == "gin":
        shapes = {"W": ((d_in, d_out), d_in), "b": ((d_out,), 1)}
    else:
        shapes = {"W_pool": ((d_in, d_in), d_in), "W": ((2 * d_in, d_out), 2 * d_in)}
    return random_weights(rng, shapes)


def small_config(arch, **overrides):
    values = dict(arch=arch, layers=2, feature_dim=FEATURE_DIM, num_anchors=ANCHORS)
    values.update(overrides)
    return GnnConfig(**values)


def dense_mask(graph):
    """自己ループ込みの隣接行列（bool）"""
    mask = np.eye(graph.num_nodes, dtype=bool)
    for b in range(graph.num_nodes):
        mask[b, graph.neighbor_rows(b)] = True
    return mask


def dense_gat(h, mask, w):
    z = h @ w["W_g"]
    d = z.shape[1]
    scores = elu((z @ w["W_r"][:d, 0])[:, None] + (z @ w["W_r"][d:, 0])[None, :])
    scores = np.where(mask, scores, -np.inf)
    alpha = np.exp(scores - scores.max(axis=1, keepdims=True))
    alpha /= alpha.sum(axis=1, keepdims=True)
    out = elu(alpha @ (h @ w["W_a"]))
    if "W_skip" in w:
        out = elu(h @ w["W_skip"] + out)
    return out


def dense_forward(params, h0, p0, graph, cfg):
    """GAT系の全体を密行列で計算した N×クラス数 の確率"""
    mask = dense_mask(graph)
    stream = "hp" if cfg.arch == "spgnn" else "h"

    def weights(prefix):
        return {name[len(prefix) + 1:]: value.data for name, value in params.items()
                if name.startswith(prefix + ".")}

    h, p = h0, p0
    for l in range(cfg.layers):
        if cfg.pe_mode == "learnable":
            inputs = np.concatenate([h, p], axis=1)
            if l < cfg.layers - 1:
                p = dense_gat(p, mask, weights(f"layers.{l}.p"))
        elif cfg.pe_mode == "nlpe":
            inputs = np.concatenate([h, p0], axis=1)
        else:
            inputs = h
        h = dense_gat(inputs, mask, weights(f"layers.{l}.{stream}"))
    logits = h @ params["head.weight"].data + params["head.bias"].data
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)



class TestGnnConfig(unittest.TestCase):
    """GNN構成のテストクラス"""

    def tearDown(self):
        reset_config()

    def test_defaults_per_architecture(self):
        self.assertEqual(GnnConfig(arch="spgnn").pe_mode, "learnable")
        self.assertTrue(GnnConfig(arch="spgnn").skip)
        self.assertTrue(GnnConfig(arch="gats").skip)
        self.assertFalse(GnnConfig(arch="gat").skip)
        self.assertEqual(GnnConfig(arch="gcn").pe_mode, "none")
        self.assertEqual(GnnConfig(arch="spgnn").num_anchors, NUM_ANCHORS)

    def test_contradictory_combinations(self):
        with self.assertRaises(ConfigError):
            GnnConfig(arch="spgnn", pe_mode="none")
        with self.assertRaises(ConfigError):
            GnnConfig(arch="gats", pe_mode="learnable")
        with self.assertRaises(ConfigError):
            GnnConfig(arch="gats", skip=False)
        with self.assertRaises(ConfigError):
            GnnConfig(arch="gat", skip=True)
        with self.assertRaises(ConfigError):
            GnnConfig(arch="spgnn", layers=3)
        with self.assertRaises(ConfigError):
            GnnConfig(arch="transformer")

    def test_optional_skip_for_baselines(self):
        self.assertTrue(GnnConfig(arch="gcn", skip=True).skip)
        shapes = gnn_param_shapes(GnnConfig(arch="gcn", skip=True, layers=2))
        self.assertIn("layers.0.h.W_skip", shapes)

    def test_from_settings_ignores_none(self):
        config = Config()
        config.set("gnn.layers", 7)
        set_config(config)
        cfg = GnnConfig.from_settings(arch="gats", layers=None, skip=None)
        self.assertEqual(cfg.arch, "gats")
        self.assertEqual(cfg.layers, 7)
        self.assertTrue(cfg.skip)

    def test_input_widths(self):
        self.assertEqual(small_config("spgnn").input_dims(), [FEATURE_DIM + ANCHORS, 256 + 256])
        self.assertEqual(small_config("spgnn", pe_mode="nlpe").input_dims(), [FEATURE_DIM + ANCHORS, 256 + ANCHORS])
        self.assertEqual(small_config("gats").input_dims(), [FEATURE_DIM, 256])

    def test_param_shapes(self):
        shapes = gnn_param_shapes(GnnConfig(arch="spgnn", layers=4))
        self.assertEqual(shapes["layers.0.hp.W_g"], ((1024 + NUM_ANCHORS, 256), 1024 + NUM_ANCHORS))
        self.assertEqual(shapes["layers.0.hp.W_r"], ((512, 1), 512))
        self.assertEqual(shapes["layers.1.hp.W_g"][0], (256 + 256, 128))
        self.assertEqual(shapes["layers.0.p.W_g"][0], (NUM_ANCHORS, 256))
        self.assertEqual(shapes["layers.2.p.W_a"][0], (128, 64))
        self.assertNotIn("layers.3.p.W_g", shapes)
        self.assertEqual(shapes["head.weight"][0], (1024, NUM_CLASSES))


class TestDenseLayers(unittest.TestCase):
    """各層を密な式（ノードごとのループ）と比べるテストクラス"""

    def setUp(self):
        self.rng = np.random.default_rng(0)
        self.graph = TreeGraph(node_ids=[1, 2, 3, 4, 5], edges=[(1, 2), (2, 3), (2, 4), (1, 5)])
        self.index = GraphIndex.from_graph(self.graph)
        self.h = self.rng.standard_normal((5, 3))

    def test_gat(self):
        w = layer_weights(self.rng, "gat", 3, 2)
        Wg, Wa, Wr = (w[k].data for k in ("W_g", "W_a", "W_r"))
        expected = np.zeros((5, 2))
        for b in range(5):
            hood = closed_neighborhood(self.graph, b)
            scores = np.array([elu(np.concatenate([self.h[b] @ Wg, self.h[j] @ Wg]) @ Wr)[0] for j in hood])
            alpha = np.exp(scores - scores.max())
            alpha /= alpha.sum()
            expected[b] = elu(sum(a * (self.h[j] @ Wa) for a, j in zip(alpha, hood)))
        out = gat_layer(Tensor(self.h), self.index, w)
        np.testing.assert_allclose(out.data, expected, rtol=1e-10, atol=1e-12)

    def test_gcn(self):
        w = layer_weights(self.rng, "gcn", 3, 2)
        degree = [len(closed_neighborhood(self.graph, b)) for b in range(5)]
        expected = np.zeros((5, 2))
        for b in range(5):
            total = sum((self.h[j] @ w["W"].data) / np.sqrt(degree[b] * degree[j])
                        for j in closed_neighborhood(self.graph, b))
            expected[b] = elu(total)
        out = gcn_layer(Tensor(self.h), self.index, w)
        np.testing.assert_allclose(out.data, expected, rtol=1e-10, atol=1e-12)

    def test_gin(self):
        w = layer_weights(self.rng, "gin", 3, 2)
        expected = np.zeros((5, 2))
        for b in range(5):
            mean = np.mean([self.h[j] for j in closed_neighborhood(self.graph, b)], axis=0)
            expected[b] = elu((self.h[b] + mean) @ w["W"].data + w["b"].data)
        out = gin_layer(Tensor(self.h), self.index, w)
        np.testing.assert_allclose(out.data, expected, rtol=1e-10, atol=1e-12)

    def test_sage(self):
        w = layer_weights(self.rng, "sage", 3, 2)
        pooled = elu(self.h @ w["W_pool"].data)
        expected = np.zeros((5, 2))
        for b in range(5):
            neighborhood = pooled[closed_neighborhood(self.graph, b)].max(axis=0)
            expected[b] = elu(np.concatenate([self.h[b], neighborhood]) @ w["W"].data)
        out = sage_layer(Tensor(self.h), self.index, w)
        np.testing.assert_allclose(out.data, expected, rtol=1e-10, atol=1e-12)

    def test_attention_rows_sum_to_one(self):
        w = layer_weights(self.rng, "gat", 3, 2)
        alpha = gat_attention(Tensor(self.h), self.index, w).data
        totals = np.zeros(5)
        np.add.at(totals, self.index.dst, alpha)
        np.testing.assert_allclose(totals, np.ones(5), atol=1e-12)
        self.assertTrue((alpha >= 0).all())

    def test_self_loops_required(self):
        w = layer_weights(self.rng, "gat", 3, 2)
        index = GraphIndex.from_graph(self.graph, self_loops=False)
        self.assertFalse(index.has_self_loops)
        with self.assertRaises(GraphError):
            gat_layer(Tensor(self.h), index, w)

    def test_single_node_attends_to_itself(self):
        graph = TreeGraph(node_ids=[7], edges=[])
        w = layer_weights(self.rng, "gat", 3, 2)
        out = gat_layer(Tensor(self.h[:1]), GraphIndex.from_graph(graph), w)
        np.testing.assert_allclose(out.data[0], elu(self.h[0] @ w["W_a"].data), rtol=1e-12)


class TestDenseForward(unittest.TestCase):
    """spgnn_forward と gats_forward を密行列の計算と比べるテストクラス"""

    def setUp(self):
        self.rng = np.random.default_rng(2)

    def graphs(self):
        yield "path", TreeGraph(node_ids=[1, 2, 3], edges=[(1, 2), (2, 3)]), FEATURE_DIM, ANCHORS
        yield "tree", TreeGraph(node_ids=[1, 2, 3, 4, 5], edges=[(1, 2), (2, 3), (2, 4), (1, 5)]), 1024, NUM_ANCHORS

    def test_spgnn_matches_dense(self):
        for name, graph, feature_dim, anchors in self.graphs():
            for pe_mode in ("learnable", "nlpe"):
                with self.subTest(graph=name, pe=pe_mode):
                    cfg = GnnConfig(arch="spgnn", layers=4, pe_mode=pe_mode,
                                    feature_dim=feature_dim, num_anchors=anchors)
                    params = random_weights(self.rng, gnn_param_shapes(cfg))
                    h0 = self.rng.standard_normal((graph.num_nodes, feature_dim))
                    p0 = self.rng.random((graph.num_nodes, anchors))
                    probs = spgnn_forward(Tensor(h0), Tensor(p0), graph, params, cfg)
                    expected = dense_forward(params, h0, p0, graph, cfg)
                    self.assertLess(np.abs(probs - expected).max(), 1e-6)

    def test_gats_matches_dense(self):
        for name, graph, feature_dim, _ in self.graphs():
            with self.subTest(graph=name):
                cfg = GnnConfig(arch="gats", layers=4, feature_dim=feature_dim)
                params = random_weights(self.rng, gnn_param_shapes(cfg))
                h0 = self.rng.standard_normal((graph.num_nodes, feature_dim))
                probs = gats_forward(Tensor(h0), graph, params, cfg)
                expected = dense_forward(params, h0, None, graph, cfg)
                self.assertLess(np.abs(probs - expected).max(), 1e-6)

    def test_learnable_stream_changes_output(self):
        # p 系統の重みを変えると結果が変わる（連結が効いている）
        graph = TreeGraph(node_ids=[1, 2, 3], edges=[(1, 2), (2, 3)])
        cfg = small_config("spgnn", layers=4)
        params = random_weights(self.rng, gnn_param_shapes(cfg))
        h0 = self.rng.standard_normal((3, FEATURE_DIM))
        p0 = self.rng.random((3, ANCHORS))
        before = spgnn_forward(Tensor(h0), Tensor(p0), graph, params, cfg)
        params["layers.1.p.W_a"] = parameter(params["layers.1.p.W_a"].data * 3.0, dtype=np.float64)
        after = spgnn_forward(Tensor(h0), Tensor(p0), graph, params, cfg)
        self.assertGreater(np.abs(after - before).max(), 0.0)
        np.testing.assert_allclose(after, dense_forward(params, h0, p0, graph, cfg), atol=1e-6)


class TestGnnModels(unittest.TestCase):
    """全アーキテクチャのモデル単位のテストクラス"""

    def setUp(self):
        self.rng = np.random.default_rng(1)
        self.graph = random_tree(self.rng, 5)
        self.features = self.rng.standard_normal((5, FEATURE_DIM))
        self.encodings = self.rng.random((5, ANCHORS))

    def configs(self):
        yield small_config("spgnn")
        yield small_config("spgnn", pe_mode="nlpe")
        for arch in ARCHITECTURES:
            if arch != "spgnn":
                yield small_config(arch)

    def inputs(self, cfg):
        return Tensor(self.features), (Tensor(self.encodings) if cfg.uses_pe else None)

    def test_gradients_match_finite_differences(self):
        index = GraphIndex.from_graph(self.graph)
        for cfg in self.configs():
            with self.subTest(arch=cfg.arch, pe=cfg.pe_mode):
                params = random_weights(self.rng, gnn_param_shapes(cfg))
                features, encodings = self.inputs(cfg)

                def loss():
                    return weighted_sum(gnn_apply(params, features, encodings, index, cfg)[1])

                errors = numeric_gradient_errors(loss, params, samples=80)
                for name, error in errors.items():
                    self.assertLess(error, REL_TOL, f"{name}: {error}")

    def test_outputs(self):
        for cfg in self.configs():
            with self.subTest(arch=cfg.arch, pe=cfg.pe_mode):
                params = random_weights(self.rng, gnn_param_shapes(cfg))
                features, encodings = self.inputs(cfg)
                probs = predict_probs(params, features, encodings, self.graph, cfg)
                self.assertEqual(probs.shape, (5, NUM_CLASSES))
                np.testing.assert_allclose(probs.sum(axis=1), np.ones(5), atol=1e-6)
                hidden = hidden_features(params, features, encodings, self.graph, cfg)
                self.assertEqual(hidden.shape, (5, 1024))

    def test_permutation_equivariance(self):
        targets = [int(t) for t in self.rng.permutation(np.arange(200, 205))]
        mapping = dict(zip(self.graph.node_ids, targets))
        moved = self.graph.relabeled(mapping)
        order = [self.graph.index_of(n) for n in sorted(mapping, key=mapping.get)]
        for cfg in self.configs():
            with self.subTest(arch=cfg.arch, pe=cfg.pe_mode):
                params = random_weights(self.rng, gnn_param_shapes(cfg))
                features, encodings = self.inputs(cfg)
                moved_encodings = None if encodings is None else Tensor(self.encodings[order])
                moved_features = Tensor(self.features[order])
                probs = predict_probs(params, features, encodings, self.graph, cfg)
                moved_probs = predict_probs(params, moved_features, moved_encodings, moved, cfg)
                hidden = hidden_features(params, features, encodings, self.graph, cfg)
                moved_hidden = hidden_features(params, moved_features, moved_encodings, moved, cfg)
                rows = [moved.index_of(mapping[node]) for node in self.graph.node_ids]
                np.testing.assert_array_equal(moved_probs[rows], probs)
                np.testing.assert_array_equal(moved_hidden[rows], hidden)

    def test_named_forwards(self):
        cfg = small_config("spgnn")
        params = random_weights(self.rng, gnn_param_shapes(cfg))
        probs = spgnn_forward(Tensor(self.features), Tensor(self.encodings), self.graph, params, cfg)
        self.assertEqual(probs.shape, (5, NUM_CLASSES))
        with self.assertRaises(ShapeError):
            spgnn_forward(Tensor(self.features), Tensor(self.encodings[:, :3]), self.graph, params, cfg)
        with self.assertRaises(ShapeError):
            spgnn_forward(Tensor(self.features), None, self.graph, params, cfg)
        with self.assertRaises(ConfigError):
            spgnn_forward(Tensor(self.features), None, self.graph, params, small_config("gats"))

        gats = small_config("gats")
        gats_params = random_weights(self.rng, gnn_param_shapes(gats))
        self.assertEqual(gats_forward(Tensor(self.features), self.graph, gats_params, gats).shape, (5, NUM_CLASSES))
        with self.assertRaises(ConfigError):
            gats_forward(Tensor(self.features), self.graph, gats_params, small_config("gat"))

    def test_feature_width_mismatch(self):
        cfg = small_config("gats")
        params = random_weights(self.rng, gnn_param_shapes(cfg))
        with self.assertRaises(ShapeError):
            predict_probs(params, Tensor(self.features[:, :5]), None, self.graph, cfg)


if __name__ == "__main__":
    unittest.main()
