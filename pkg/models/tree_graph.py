"""
ツリーグラフモデルモジュール

枝をノード、境界の共有を辺とするグラフ G = (B, E) と、
最短経路、直径、葉の探索、アンカー選択、位置エンコーディングの計算を提供します。
距離はすべて重みなしのホップ数です。
"""
import json
import os
from collections import deque
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Set, Tuple

import networkx as nx
import numpy as np

from utils import logger, GraphError
from .anatomy import (
    NAMED_CLASSES, SEGMENTAL_CLASSES, TRACHEA, LEFT_MAIN, RIGHT_MAIN,
    NUM_ANCHORS, class_name, class_index,
)

# 到達不能ノードのホップ数
UNREACHABLE = -1

ANCHOR_ORDERING = "trachea,main_bronchi,segmental,leaves"

Index3 = Tuple[int, int, int]


@dataclass
class TreeGraph:
    """
    気道ツリーグラフ

    node_ids は昇順・重複なし、edges は (a, b), a < b の昇順リスト。
    labels はノードごとのクラスインデックス（未ラベルは None）。
    """
    node_ids: List[int]
    edges: List[Tuple[int, int]]
    centers: Dict[int, Index3] = field(default_factory=dict)
    voxel_counts: Dict[int, int] = field(default_factory=dict)
    labels: Dict[int, Optional[int]] = field(default_factory=dict)

    def __post_init__(self):
        ids = [int(i) for i in self.node_ids]
        if len(set(ids)) != len(ids):
            raise GraphError("node ids must be unique")
        self.node_ids = sorted(ids)
        self._index = {node: row for row, node in enumerate(self.node_ids)}

        normalized = set()
        for a, b in self.edges:
            a, b = int(a), int(b)
            if a == b:
                raise GraphError(f"self-loop edge on node {a}")
            if a not in self._index or b not in self._index:
                raise GraphError(f"edge ({a}, {b}) references an unknown node")
            normalized.add((min(a, b), max(a, b)))
        self.edges = sorted(normalized)

        self._adjacency: List[List[int]] = [[] for _ in self.node_ids]
        for a, b in self.edges:
            self._adjacency[self._index[a]].append(self._index[b])
            self._adjacency[self._index[b]].append(self._index[a])
        for neighbors in self._adjacency:
            neighbors.sort()

    @property
    def num_nodes(self) -> int:
        return len(self.node_ids)

    def index_of(self, node: int) -> int:
        """ノードIDの行インデックス"""
        try:
            return self._index[node]
        except KeyError:
            raise GraphError(f"unknown node: {node}") from None

    def __contains__(self, node: int) -> bool:
        return node in self._index

    def neighbors(self, node: int) -> List[int]:
        return [self.node_ids[j] for j in self._adjacency[self.index_of(node)]]

    def neighbor_rows(self, row: int) -> List[int]:
        return self._adjacency[row]

    def degree(self, node: int) -> int:
        return len(self._adjacency[self.index_of(node)])

    def label_of(self, node: int) -> Optional[int]:
        return self.labels.get(node)

    def is_connected(self) -> bool:
        if self.num_nodes == 0:
            return False
        return all(d != UNREACHABLE for d in _bfs_rows(self, 0))

    def directed_edges(self, self_loops: bool = True) -> Tuple[np.ndarray, np.ndarray]:
        """
        メッセージパッシング用の有向辺（行インデックス）

        Returns:
            (src, dst): dst の昇順、同じ dst 内では src の昇順
        """
        pairs = []
        for row, neighbors in enumerate(self._adjacency):
            cols = list(neighbors)
            if self_loops:
                cols.append(row)
            for col in sorted(cols):
                pairs.append((col, row))
        src = np.array([p[0] for p in pairs], dtype=np.intp)
        dst = np.array([p[1] for p in pairs], dtype=np.intp)
        return src, dst

    def class_targets(self, default: int) -> np.ndarray:
        """ノード順のクラスインデックス配列（未ラベルは default）"""
        return np.array([
            default if self.labels.get(node) is None else int(self.labels[node])  # type: ignore[arg-type]
            for node in self.node_ids
        ], dtype=np.intp)

    def reference_map(self) -> Dict[int, int]:
        """
        名前付きクラス → ノードID の参照マップ（labels から作る）

        Raises:
            GraphError: 同じ名前付きクラスが複数ノードに付いている場合
        """
        reference: Dict[int, int] = {}
        for node in self.node_ids:
            label = self.labels.get(node)
            if label is None or label not in NAMED_CLASSES:
                continue
            if label in reference:
                raise GraphError(f"class {class_name(label)} labels both {reference[label]} and {node}")
            reference[label] = node
        return reference

    def relabeled(self, mapping: Mapping[int, int]) -> "TreeGraph":
        """ノードIDを付け替えたグラフを返す"""
        return TreeGraph(
            node_ids=[mapping[n] for n in self.node_ids],
            edges=[(mapping[a], mapping[b]) for a, b in self.edges],
            centers={mapping[n]: c for n, c in self.centers.items()},
            voxel_counts={mapping[n]: c for n, c in self.voxel_counts.items()},
            labels={mapping[n]: lab for n, lab in self.labels.items()},
        )

    def to_networkx(self) -> nx.Graph:
        """networkx のグラフに変換する（ノード属性 center, voxels, label）"""
        graph = nx.Graph()
        for node in self.node_ids:
            graph.add_node(node, center=self.centers.get(node), voxels=self.voxel_counts.get(node, 0),
                           label=class_name(self.labels.get(node)))
        graph.add_edges_from(self.edges)
        return graph

    def to_json_dict(self) -> Dict:
        """正規化されたグラフJSON（ノードはID順、辺は辞書順）"""
        nodes = []
        for node in self.node_ids:
            center = self.centers.get(node)
            nodes.append({
                "id": node,
                "center": None if center is None else [int(c) for c in center],
                "voxels": int(self.voxel_counts.get(node, 0)),
                "label": class_name(self.labels.get(node)),
            })
        return {"nodes": nodes, "edges": [[a, b] for a, b in self.edges]}

    @classmethod
    def from_json_dict(cls, document: Mapping) -> "TreeGraph":
        try:
            nodes = document["nodes"]
            edges = document["edges"]
        except (KeyError, TypeError) as e:
            raise GraphError(f"graph document lacks nodes/edges: {e}") from e
        node_ids = [int(n["id"]) for n in nodes]
        centers = {int(n["id"]): tuple(int(c) for c in n["center"])
                   for n in nodes if n.get("center") is not None}
        counts = {int(n["id"]): int(n.get("voxels", 0)) for n in nodes}
        try:
            labels = {int(n["id"]): class_index(n.get("label")) for n in nodes}
        except ValueError as e:
            raise GraphError(str(e)) from e
        return cls(node_ids=node_ids, edges=[(int(a), int(b)) for a, b in edges],
                   centers=centers, voxel_counts=counts, labels=labels)  # type: ignore[arg-type]

    def save_json(self, path: str) -> str:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_json_dict(), f, indent=1)
            f.write("\n")
        return path

    @classmethod
    def load_json(cls, path: str) -> "TreeGraph":
        if not os.path.exists(path):
            raise GraphError(f"graph file not found: {path}")
        with open(path, "r", encoding="utf-8") as f:
            try:
                document = json.load(f)
            except json.JSONDecodeError as e:
                raise GraphError(f"invalid graph JSON {path}: {e}") from e
        return cls.from_json_dict(document)


@dataclass
class AnchorSet:
    """位置エンコーディングのアンカー（ノードIDの並び）"""
    anchors: List[int]
    ordering: str = ANCHOR_ORDERING

    def __len__(self) -> int:
        return len(self.anchors)


def _bfs_rows(g: TreeGraph, source_row: int) -> List[int]:
    hops = [UNREACHABLE] * g.num_nodes
    hops[source_row] = 0
    queue = deque([source_row])
    while queue:
        row = queue.popleft()
        for nxt in g.neighbor_rows(row):
            if hops[nxt] == UNREACHABLE:
                hops[nxt] = hops[row] + 1
                queue.append(nxt)
    return hops


def bfs_shortest_paths(g: TreeGraph, source: int) -> Dict[int, int]:
    """
    source から各ノードへのホップ数（到達不能は UNREACHABLE）

    Raises:
        GraphError: source がグラフに無い場合
    """
    hops = _bfs_rows(g, g.index_of(source))
    return {node: hops[row] for row, node in enumerate(g.node_ids)}


def hop_matrix(g: TreeGraph) -> np.ndarray:
    """全ノード対のホップ数行列（行・列はノード順、到達不能は UNREACHABLE）"""
    return np.array([_bfs_rows(g, row) for row in range(g.num_nodes)], dtype=np.int64)


def hop_distance(g: TreeGraph, a: int, b: int) -> int:
    return _bfs_rows(g, g.index_of(a))[g.index_of(b)]


def graph_diameter(g: TreeGraph) -> int:
    """
    グラフの直径（全ノード対の最短ホップ数の最大値）

    Raises:
        GraphError: 非連結、またはノードが1つしかない場合
    """
    if g.num_nodes < 2:
        raise GraphError("diameter needs at least 2 nodes")
    hops = hop_matrix(g)
    if (hops == UNREACHABLE).any():
        raise GraphError("graph is disconnected")
    return int(hops.max())


def _rooted_parents(g: TreeGraph, root_row: int) -> List[int]:
    parents = [-1] * g.num_nodes
    seen = [False] * g.num_nodes
    seen[root_row] = True
    queue = deque([root_row])
    while queue:
        row = queue.popleft()
        for nxt in g.neighbor_rows(row):
            if not seen[nxt]:
                seen[nxt] = True
                parents[nxt] = row
                queue.append(nxt)
    return parents


def _in_subtree(parents: Sequence[int], row: int, top: int) -> bool:
    while row != -1:
        if row == top:
            return True
        row = parents[row]
    return False


def find_leaves(g: TreeGraph, root: int, subtree: Optional[int] = None) -> Set[int]:
    """
    root を根とした葉（次数1のノード、root は除く）

    Args:
        g: グラフ
        root: 根ノード
        subtree: 指定した場合、根からの経路がこのノードを通る葉だけを返す

    Raises:
        GraphError: root または subtree がグラフに無い場合
    """
    root_row = g.index_of(root)
    leaves = {
        node for row, node in enumerate(g.node_ids)
        if row != root_row and len(g.neighbor_rows(row)) == 1
    }
    if subtree is None:
        return leaves
    top = g.index_of(subtree)
    parents = _rooted_parents(g, root_row)
    return {node for node in leaves if _in_subtree(parents, g.index_of(node), top)}


def select_anchors(g: TreeGraph, predicted: Mapping[int, int]) -> AnchorSet:
    """
    予測された名前付き21クラスから39個のアンカーを選ぶ

    並びは 気管、左右主気管支、区域枝18本、各区域枝の部分木で最も遠い葉18本。
    葉の同距離は小さい枝IDを採り、区域枝自身が葉ならそれを再利用する。

    Raises:
        GraphError: 予測マップが不完全、またはノードがグラフに無い場合
    """
    missing = [class_name(c) for c in NAMED_CLASSES if c not in predicted]
    if missing:
        raise GraphError(f"predicted map incomplete, missing {missing}")
    for c in NAMED_CLASSES:
        if predicted[c] not in g:
            raise GraphError(f"predicted node {predicted[c]} for {class_name(c)} is not in the graph")

    root = predicted[TRACHEA]
    root_row = g.index_of(root)
    parents = _rooted_parents(g, root_row)

    anchors = [predicted[TRACHEA], predicted[LEFT_MAIN], predicted[RIGHT_MAIN]]
    segmentals = [predicted[c] for c in SEGMENTAL_CLASSES]
    anchors.extend(segmentals)

    for node in segmentals:
        row = g.index_of(node)
        if row != root_row and len(g.neighbor_rows(row)) == 1:
            anchors.append(node)
            continue
        hops = _bfs_rows(g, row)
        best: Optional[Tuple[int, int]] = None
        for leaf_row, leaf in enumerate(g.node_ids):
            if leaf_row == root_row or len(g.neighbor_rows(leaf_row)) != 1:
                continue
            if not _in_subtree(parents, leaf_row, row):
                continue
            key = (-hops[leaf_row], leaf)
            if best is None or key < best:
                best = key
        anchors.append(node if best is None else best[1])

    return AnchorSet(anchors=anchors)


def compute_positional_encodings(g: TreeGraph, anchors: AnchorSet) -> np.ndarray:
    """
    アンカーまでのホップ数を直径で割った位置エンコーディング（N×k, float32）

    Raises:
        GraphError: 非連結、またはアンカーがグラフに無い場合
    """
    diameter = graph_diameter(g)
    columns = []
    for anchor in anchors.anchors:
        hops = np.array(_bfs_rows(g, g.index_of(anchor)), dtype=np.float64)
        columns.append(hops / diameter)
    if not columns:
        return np.zeros((g.num_nodes, 0), dtype=np.float32)
    encodings = np.stack(columns, axis=1).astype(np.float32)
    logger.debug("Positional encodings: %d nodes x %d anchors (diameter %d)",
                 g.num_nodes, len(anchors), diameter)
    return encodings


__all__ = [
    'TreeGraph', 'AnchorSet', 'UNREACHABLE', 'ANCHOR_ORDERING', 'NUM_ANCHORS',
    'bfs_shortest_paths', 'hop_matrix', 'hop_distance', 'graph_diameter',
    'find_leaves', 'select_anchors', 'compute_positional_encodings',
]
