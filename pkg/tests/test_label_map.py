"""
ラベルマップモデルのテストスクリプト

MetaImageの読み書き、再サンプリング、枝グラフの構築、枝中心、パッチの切り出しをテストします。
"""
import os
import shutil
import sys
import tempfile
import unittest

import numpy as np

# プロジェクトルートディレクトリをパスに追加
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from utils import GraphError, VolumeFormatError
from models.label_map import (
    VoxelLabelMap, adjacent_label_pairs, branch_center, branch_centers, build_branch_graph,
    extract_patch, read_label_map, resample_nearest, write_label_map,
)


def _oracle_resample(voxels, spacing, target):
    """出力ボクセルごとに最も近い入力ボクセル中心を総当たりで探す"""
    out_dims = [max(1, int(round(n * s / t))) for n, s, t in zip(voxels.shape, spacing, target)]
    axes = []
    for n_in, n_out, s, t in zip(voxels.shape, out_dims, spacing, target):
        centers = (np.arange(n_in) + 0.5) * s
        axes.append([int(np.argmin(np.abs(centers - (o + 0.5) * t))) for o in range(n_out)])
    out = np.zeros(out_dims, dtype=voxels.dtype)
    for i in range(out_dims[0]):
        for j in range(out_dims[1]):
            for k in range(out_dims[2]):
                out[i, j, k] = voxels[axes[0][i], axes[1][j], axes[2][k]]
    return out


def _oracle_adjacency(voxels):
    """全ボクセル対のチェビシェフ距離で隣接を判定する"""
    coords = np.argwhere(voxels > 0)
    labels = voxels[tuple(coords.T)].astype(np.int64)
    chebyshev = np.abs(coords[:, None, :] - coords[None, :, :]).max(axis=2)
    touching = (chebyshev == 1) & (labels[:, None] != labels[None, :])
    a, b = np.nonzero(touching)
    return sorted({(int(min(labels[x], labels[y])), int(max(labels[x], labels[y]))) for x, y in zip(a, b)})


class TestMetaImage(unittest.TestCase):
    """MetaImageの読み書きのテストクラス"""

    def setUp(self):
        """テスト前の準備"""
        self.temp_dir = tempfile.mkdtemp(prefix="test_label_map_")
        rng = np.random.default_rng(3)
        self.label_map = VoxelLabelMap(voxels=rng.integers(0, 7, size=(5, 4, 3)).astype(np.uint16),
                                       spacing=(0.625, 0.625, 0.5))

    def tearDown(self):
        """テスト後のクリーンアップ"""
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def test_zero_volume(self):
        path = write_label_map(VoxelLabelMap(np.zeros((2, 2, 2), dtype=np.uint16)), os.path.join(self.temp_dir, "z.mhd"))
        loaded = read_label_map(path)
        self.assertEqual(loaded.dims, (2, 2, 2))
        self.assertEqual(loaded.spacing, (1.0, 1.0, 1.0))
        self.assertEqual(int(loaded.voxels.sum()), 0)
        self.assertEqual(loaded.branch_ids(), [])

    def test_round_trip_is_exact(self):
        path = os.path.join(self.temp_dir, "a.mhd")
        write_label_map(self.label_map, path)
        loaded = read_label_map(path)
        np.testing.assert_array_equal(loaded.voxels, self.label_map.voxels)
        self.assertEqual(loaded.spacing, self.label_map.spacing)

        again = os.path.join(self.temp_dir, "b.mhd")
        write_label_map(loaded, again)
        with open(os.path.join(self.temp_dir, "a.raw"), "rb") as f:
            first = f.read()
        with open(os.path.join(self.temp_dir, "b.raw"), "rb") as f:
            second = f.read()
        self.assertEqual(first, second)

    def test_payload_is_x_fastest(self):
        voxels = np.zeros((3, 2, 2), dtype=np.uint16)
        voxels[1, 0, 0] = 5
        path = write_label_map(VoxelLabelMap(voxels), os.path.join(self.temp_dir, "x.mhd"))
        with open(os.path.join(self.temp_dir, "x.raw"), "rb") as f:
            payload = np.frombuffer(f.read(), dtype="<u2")
        self.assertEqual(int(payload[1]), 5)
        self.assertEqual(read_label_map(path).voxels[1, 0, 0], 5)

    def test_local_payload(self):
        path = write_label_map(self.label_map, os.path.join(self.temp_dir, "local.mhd"), local=True)
        self.assertFalse(os.path.exists(os.path.join(self.temp_dir, "local.raw")))
        np.testing.assert_array_equal(read_label_map(path).voxels, self.label_map.voxels)

    def test_uint32_labels(self):
        voxels = np.zeros((2, 2, 2), dtype=np.uint32)
        voxels[0, 0, 0] = 70000
        path = write_label_map(VoxelLabelMap(voxels), os.path.join(self.temp_dir, "big.mhd"))
        with open(path, "r", encoding="ascii", errors="replace") as f:
            self.assertIn("MET_UINT", f.read())
        self.assertEqual(read_label_map(path).voxels[0, 0, 0], 70000)

    def test_missing_file(self):
        with self.assertRaises(VolumeFormatError):
            read_label_map(os.path.join(self.temp_dir, "nope.mhd"))

    def test_unsupported_element_type(self):
        path = os.path.join(self.temp_dir, "f.mhd")
        with open(path, "w", encoding="ascii") as f:
            f.write("ObjectType = Image\nNDims = 3\nDimSize = 1 1 1\nElementSpacing = 1 1 1\n"
                    "ElementType = MET_FLOAT\nElementDataFile = f.raw\n")
        with open(os.path.join(self.temp_dir, "f.raw"), "wb") as f:
            f.write(b"\x00\x00\x00\x00")
        with self.assertRaises(VolumeFormatError):
            read_label_map(path)

    def test_truncated_payload(self):
        path = os.path.join(self.temp_dir, "t.mhd")
        write_label_map(self.label_map, path)
        raw = os.path.join(self.temp_dir, "t.raw")
        with open(raw, "rb") as f:
            payload = f.read()
        with open(raw, "wb") as f:
            f.write(payload[:-2])
        with self.assertRaises(VolumeFormatError):
            read_label_map(path)

    def test_missing_mandatory_key(self):
        path = os.path.join(self.temp_dir, "m.mhd")
        with open(path, "w", encoding="ascii") as f:
            f.write("ObjectType = Image\nNDims = 3\nElementSpacing = 1 1 1\n"
                    "ElementType = MET_USHORT\nElementDataFile = LOCAL\n")
        with self.assertRaises(VolumeFormatError):
            read_label_map(path)


class TestResample(unittest.TestCase):
    """再サンプリングのテストクラス"""

    def test_identity(self):
        voxels = np.arange(27, dtype=np.uint16).reshape(3, 3, 3)
        out = resample_nearest(VoxelLabelMap(voxels, (0.5, 0.5, 0.5)), (0.5, 0.5, 0.5))
        np.testing.assert_array_equal(out.voxels, voxels)

    def test_dimension_arithmetic(self):
        out = resample_nearest(VoxelLabelMap(np.ones((4, 4, 4), dtype=np.uint16)), (2, 2, 2))
        self.assertEqual(out.dims, (2, 2, 2))
        self.assertEqual(out.spacing, (2.0, 2.0, 2.0))

    def test_matches_nearest_center_oracle(self):
        rng = np.random.default_rng(11)
        for target in ((1.5, 0.5, 2.5), (0.5, 2.5, 1.5)):
            voxels = rng.integers(0, 9, size=(8, 8, 8)).astype(np.uint16)
            out = resample_nearest(VoxelLabelMap(voxels), target)
            np.testing.assert_array_equal(out.voxels, _oracle_resample(voxels, (1.0, 1.0, 1.0), target))
            self.assertTrue(set(np.unique(out.voxels)) <= set(np.unique(voxels)))

    def test_rejects_bad_spacing(self):
        with self.assertRaises(VolumeFormatError):
            resample_nearest(VoxelLabelMap(np.ones((2, 2, 2), dtype=np.uint16)), (1.0, 0.0, 1.0))


class TestBranchGraph(unittest.TestCase):
    """枝グラフの構築のテストクラス"""

    def test_two_touching_boxes(self):
        voxels = np.zeros((4, 2, 2), dtype=np.uint16)
        voxels[:2] = 1
        voxels[2:] = 2
        graph = build_branch_graph(VoxelLabelMap(voxels))
        self.assertEqual(graph.node_ids, [1, 2])
        self.assertEqual(graph.edges, [(1, 2)])
        self.assertEqual(graph.voxel_counts, {1: 8, 2: 8})

    def test_single_branch(self):
        voxels = np.zeros((3, 3, 3), dtype=np.uint16)
        voxels[1, 1, 1] = 4
        graph = build_branch_graph(VoxelLabelMap(voxels))
        self.assertEqual(graph.node_ids, [4])
        self.assertEqual(graph.edges, [])

    def test_diagonal_contact_counts(self):
        voxels = np.zeros((2, 2, 2), dtype=np.uint16)
        voxels[0, 0, 0] = 1
        voxels[1, 1, 1] = 2
        self.assertEqual(adjacent_label_pairs(voxels), [(1, 2)])

    def test_all_background(self):
        with self.assertRaises(GraphError):
            build_branch_graph(VoxelLabelMap(np.zeros((2, 2, 2), dtype=np.uint16)))

    def test_matches_all_pairs_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            voxels = rng.integers(1, 6, size=(10, 10, 10)).astype(np.uint16)
            voxels[rng.random((10, 10, 10)) < 0.8] = 0
            voxels[0, 0, 0] = 1
            graph = build_branch_graph(VoxelLabelMap(voxels))
            self.assertEqual(graph.edges, _oracle_adjacency(voxels))
            self.assertEqual(graph.node_ids, sorted(int(v) for v in np.unique(voxels) if v))
            for a, b in graph.edges:
                self.assertLess(a, b)


class TestBranchCenter(unittest.TestCase):
    """枝中心のテストクラス"""

    def test_segment_middle(self):
        voxels = np.zeros((3, 1, 1), dtype=np.uint16)
        voxels[:, 0, 0] = 1
        self.assertEqual(branch_center(VoxelLabelMap(voxels), 1), (1, 0, 0))

    def test_single_voxel(self):
        voxels = np.zeros((3, 3, 3), dtype=np.uint16)
        voxels[2, 0, 1] = 3
        self.assertEqual(branch_center(VoxelLabelMap(voxels), 3), (2, 0, 1))

    def test_l_shape_matches_oracle(self):
        voxels = np.zeros((5, 5, 1), dtype=np.uint16)
        voxels[0:4, 0, 0] = 1
        voxels[0, 1:4, 0] = 1
        self.assertEqual(int((voxels == 1).sum()), 7)
        coords = np.argwhere(voxels == 1)
        centroid = coords.mean(axis=0)
        d2 = ((coords - centroid) ** 2).sum(axis=1)
        best = min(tuple(int(c) for c in coords[i]) for i in np.flatnonzero(d2 == d2.min()))
        center = branch_center(VoxelLabelMap(voxels), 1)
        self.assertEqual(center, best)
        self.assertEqual(voxels[center], 1)

    def test_batch_centers_agree(self):
        rng = np.random.default_rng(8)
        voxels = rng.integers(0, 5, size=(6, 6, 6)).astype(np.uint16)
        label_map = VoxelLabelMap(voxels)
        centers = branch_centers(label_map)
        for branch in label_map.branch_ids():
            self.assertEqual(centers[branch], branch_center(label_map, branch))

    def test_unknown_branch(self):
        with self.assertRaises(GraphError):
            branch_center(VoxelLabelMap(np.ones((2, 2, 2), dtype=np.uint16)), 9)


class TestExtractPatch(unittest.TestCase):
    """パッチの切り出しのテストクラス"""

    def test_isolated_branch(self):
        voxels = np.zeros((9, 9, 9), dtype=np.uint16)
        voxels[4, 4, 3:6] = 2
        patch = extract_patch(VoxelLabelMap(voxels), 2, 4)
        self.assertEqual(patch.values.shape, (4, 4, 4))
        self.assertEqual(patch.center, (4, 4, 4))
        self.assertEqual(set(np.unique(patch.values)) - {np.float32(0.0), np.float32(0.9)}, set())
        self.assertEqual(int((patch.values == np.float32(0.9)).sum()), 3)

    def test_corner_is_zero_padded(self):
        voxels = np.zeros((4, 4, 4), dtype=np.uint16)
        voxels[0, 0, 0] = 1
        voxels[1, 0, 0] = 2
        patch = extract_patch(VoxelLabelMap(voxels), 1, 6)
        # 窓は -3..2、ボリューム内は添字 3.. の部分
        self.assertEqual(float(patch.values[3, 3, 3]), float(np.float32(0.9)))
        self.assertEqual(float(patch.values[4, 3, 3]), float(np.float32(0.5)))
        self.assertTrue((patch.values[:3] == 0).all())

    def test_histogram_matches_per_voxel_oracle(self):
        rng = np.random.default_rng(21)
        voxels = np.zeros((10, 10, 10), dtype=np.uint16)
        voxels[rng.random((10, 10, 10)) < 0.3] = 1
        voxels[rng.random((10, 10, 10)) < 0.2] = 2
        voxels[5, 5, 5] = 1
        label_map = VoxelLabelMap(voxels)
        patch = extract_patch(label_map, 1, 8)
        c = patch.center
        expected = {0.0: 0, 0.5: 0, 0.9: 0}
        for index in np.ndindex(8, 8, 8):
            src = tuple(ci - 4 + o for ci, o in zip(c, index))
            if not all(0 <= s < 10 for s in src):
                expected[0.0] += 1
            elif voxels[src] == 1:
                expected[0.9] += 1
            elif voxels[src] > 0:
                expected[0.5] += 1
            else:
                expected[0.0] += 1
        for value, count in expected.items():
            self.assertEqual(int((patch.values == np.float32(value)).sum()), count)

    def test_errors(self):
        label_map = VoxelLabelMap(np.ones((3, 3, 3), dtype=np.uint16))
        with self.assertRaises(ValueError):
            extract_patch(label_map, 1, 1)
        with self.assertRaises(GraphError):
            extract_patch(label_map, 2, 4)


if __name__ == "__main__":
    unittest.main()
