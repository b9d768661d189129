"""
合成気道ツリー生成モジュール

18区域枝の解剖テンプレートから二分岐ツリーを作り、乱数で形状を揺らして
ボクセルのチューブとして描画します。臨床データなしでパイプライン全体を学習・評価できます。

- 乱数は SplitMix64（64ビットのカウンターベース生成器、定数は下記）
- 配置は x–z 平面の樹形図（葉を等間隔に並べ、親は子の平均位置）
- 分岐点には親の枝ラベルの球（接合球）を置き、子のチューブは球の内側から始める
- 描画は幅優先順、既に塗られたボクセルは上書きしない
- 隣接しない枝どうしの表面間距離は 2 ボクセル以上、満たさなければ形状を引き直す
"""
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from utils import logger, GenerationError, get_config
from models.anatomy import CLASS_INDEX, OTHER, SEGMENTAL_CLASSES, class_name
from models.label_map import VoxelLabelMap, adjacent_label_pairs
from models.tree_graph import TreeGraph

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
MIX_MULTIPLIER_1 = 0xBF58476D1CE4E5B9
MIX_MULTIPLIER_2 = 0x94D049BB133111EB
ATTEMPT_STRIDE = 0xD1B54A32D192ED03

# 区域枝の欠損は最大4本（18本中14本以上を残す）
MIN_SEGMENTALS = 14

# 区域枝以下の世代数の範囲
MIN_DEPTH = 4
MAX_DEPTH = 6

# 配置と形状の定数（ボクセル単位）
LEAF_SPACING = 10.0
BAND_HEIGHT = 9.0
ROOT_RADIUS = 2.5
RADIUS_DECAY = 0.8
MIN_RADIUS = 1.0
SIBLING_MARGIN = 2.5
CLEARANCE = 2.0
MIN_TUBE_LENGTH = 2.0
VOLUME_MARGIN = 2
EXTENSION_DECAY = 0.5

# 二分岐テンプレート（右肺を先に並べる）
TEMPLATE: Dict[str, Tuple[str, str]] = {
    "trachea": ("right_main", "left_main"),
    "right_main": ("RUL", "BI"),
    "RUL": ("RB1", "X1"),
    "X1": ("RB2", "RB3"),
    "BI": ("RML", "RLL"),
    "RML": ("RB4", "RB5"),
    "RLL": ("RB6", "RBas"),
    "RBas": ("RB7", "X2"),
    "X2": ("RB8", "X3"),
    "X3": ("RB9", "RB10"),
    "left_main": ("LUL", "LLL"),
    "LUL": ("LUD", "Ling"),
    "LUD": ("LB1+2", "LB3"),
    "Ling": ("LB4", "LB5"),
    "LLL": ("LB6", "LBas"),
    "LBas": ("LB7+8", "X4"),
    "X4": ("LB9", "LB10"),
}

Point = Tuple[float, float, float]


class SplitMix64:
    """
    SplitMix64 乱数生成器

    状態は 64 ビットのカウンター。next_u64 ごとに GOLDEN_GAMMA を加え、
    2段の xor-shift-multiply で混ぜる。
    """

    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN_GAMMA) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * MIX_MULTIPLIER_1) & MASK64
        z = ((z ^ (z >> 27)) * MIX_MULTIPLIER_2) & MASK64
        return z ^ (z >> 31)

    def uniform(self) -> float:
        """[0, 1) の一様乱数（上位53ビット）"""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def symmetric(self) -> float:
        """[-1, 1) の一様乱数"""
        return 2.0 * self.uniform() - 1.0


@dataclass
class SyntheticTreeSpec:
    """
    合成ツリーの仕様

    Attributes:
        seed: 乱数シード
        depth: 区域枝以下の最大世代数（区域枝自身を1と数える、4〜6）
        extension_probability: 区域枝が亜区域枝に分かれる確率（世代ごとに半減、0 ならテンプレートのみ）
        missing_probability: 区域枝が欠損する確率（0〜0.3）
        angle_jitter: 分岐点の横方向の揺らぎ（葉の間隔に対する比）
        length_jitter: 枝長の揺らぎ（段の高さに対する比）
        volume_dims: ボリュームの大きさ（None なら配置に合わせる）
        spacing: ボクセル間隔（mm）
        max_attempts: 形状の引き直し回数の上限
    """
    seed: int = 0
    depth: int = 4
    extension_probability: float = 0.35
    missing_probability: float = 0.0
    angle_jitter: float = 0.15
    length_jitter: float = 0.1
    volume_dims: Optional[Tuple[int, int, int]] = None
    spacing: Tuple[float, float, float] = (0.625, 0.625, 0.5)
    max_attempts: int = 64

    def validate(self) -> None:
        """
        Raises:
            GenerationError: 値が範囲外の場合
        """
        if not MIN_DEPTH <= self.depth <= MAX_DEPTH:
            raise GenerationError(f"depth must be in [{MIN_DEPTH}, {MAX_DEPTH}], got {self.depth}")
        if not 0.0 <= self.extension_probability <= 1.0:
            raise GenerationError(f"extension probability must be in [0, 1], got {self.extension_probability}")
        if not 0.0 <= self.missing_probability <= 0.3:
            raise GenerationError(f"missing probability must be in [0, 0.3], got {self.missing_probability}")
        if not 0.0 <= self.angle_jitter <= 0.3:
            raise GenerationError(f"angle jitter must be in [0, 0.3], got {self.angle_jitter}")
        if not 0.0 <= self.length_jitter <= 0.3:
            raise GenerationError(f"length jitter must be in [0, 0.3], got {self.length_jitter}")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise GenerationError(f"spacing must be 3 positive reals, got {self.spacing}")
        if self.volume_dims is not None and (len(self.volume_dims) != 3 or min(self.volume_dims) < 1):
            raise GenerationError(f"volume dims must be 3 positive integers, got {self.volume_dims}")
        if self.max_attempts < 1:
            raise GenerationError(f"max attempts must be positive, got {self.max_attempts}")

    @classmethod
    def template(cls, seed: int, **overrides) -> "SyntheticTreeSpec":
        """
        亜区域枝を作らない仕様（テンプレートの35枝から欠損分を除いたツリー）

        depth は有効範囲のまま、extension_probability を0にする。小さなツリーが要るテストや学習確認用。
        """
        overrides.setdefault("extension_probability", 0.0)
        return cls(seed=seed, **overrides)

    @classmethod
    def from_settings(cls, seed: int, **overrides) -> "SyntheticTreeSpec":
        """設定の synth セクションから仕様を作る（None の上書きは無視）"""
        config = get_config()
        values = {
            "seed": seed,
            "depth": int(config.get("synth.depth", 4)),
            "extension_probability": float(config.get("synth.extension_probability", 0.35)),
            "missing_probability": float(config.get("synth.missing_probability", 0.0)),
            "angle_jitter": float(config.get("synth.angle_jitter", 0.15)),
            "length_jitter": float(config.get("synth.length_jitter", 0.1)),
            "spacing": tuple(config.get("synth.spacing", (0.625, 0.625, 0.5))),
            "max_attempts": int(config.get("synth.max_attempts", 64)),
        }
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


@dataclass
class TopologyNode:
    """位相のみのノード（IDは幅優先順に後で付ける）"""
    name: str
    label: int
    children: List["TopologyNode"] = field(default_factory=list)


@dataclass
class BranchGeometry:
    """枝の形状: start→end のチューブ（半径 radius）と end の接合球（半径 junction_radius、葉は0）"""
    start: Point
    end: Point
    radius: float
    junction_radius: float = 0.0


@dataclass
class SyntheticTree:
    """生成されたツリー（正解ラベルと中心線の形状付き）"""
    spec: SyntheticTreeSpec
    node_ids: List[int]
    edges: List[Tuple[int, int]]
    labels: Dict[int, int]
    parents: Dict[int, int]
    geometry: Dict[int, BranchGeometry]
    dims: Tuple[int, int, int]
    attempts: int = 1

    def to_graph(self) -> TreeGraph:
        """ラベル付きのツリーグラフ（中心は接合点を丸めたもの）"""
        centers = {
            node: tuple(int(round(c)) for c in self.geometry[node].end)
            for node in self.node_ids
        }
        return TreeGraph(node_ids=list(self.node_ids), edges=list(self.edges),
                         centers=centers, labels=dict(self.labels))  # type: ignore[arg-type]

    def segmental_labels(self) -> List[int]:
        return sorted(label for label in self.labels.values() if label in SEGMENTAL_CLASSES)


def _template_node(name: str, missing: Sequence[str]) -> Optional[TopologyNode]:
    if name in missing:
        return None
    node = TopologyNode(name=name, label=CLASS_INDEX.get(name, OTHER))
    for child_name in TEMPLATE.get(name, ()):
        child = _template_node(child_name, missing)
        if child is not None:
            node.children.append(child)
    return node


def _collapse_single_children(node: TopologyNode) -> TopologyNode:
    # 子が1つだけの "other" ノードはその子で置き換える（すべての分岐を二分岐に保つ）
    node.children = [_collapse_single_children(child) for child in node.children]
    if node.label == OTHER and len(node.children) == 1:
        return node.children[0]
    return node


def _extend(node: TopologyNode, generation: int, spec: SyntheticTreeSpec, rng: SplitMix64) -> None:
    if generation >= spec.depth:
        return
    probability = spec.extension_probability * EXTENSION_DECAY ** (generation - 1)
    if rng.uniform() < probability:
        node.children = [
            TopologyNode(name=f"{node.name}.{generation}a", label=OTHER),
            TopologyNode(name=f"{node.name}.{generation}b", label=OTHER),
        ]
        for child in node.children:
            _extend(child, generation + 1, spec, rng)


def draw_topology(spec: SyntheticTreeSpec) -> TopologyNode:
    """
    仕様からツリーの位相を作る（形状なし）

    欠損する区域枝はクラス順に抽選し、4本を超えた分は戻す。
    """
    spec.validate()
    rng = SplitMix64(spec.seed)

    missing: List[str] = []
    for c in SEGMENTAL_CLASSES:
        if rng.uniform() < spec.missing_probability:
            missing.append(class_name(c))  # type: ignore[arg-type]
    missing = missing[:len(SEGMENTAL_CLASSES) - MIN_SEGMENTALS]

    root = _template_node("trachea", missing)
    assert root is not None

    segmentals: Dict[int, TopologyNode] = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if node.label in SEGMENTAL_CLASSES:
            segmentals[node.label] = node
        stack.extend(node.children)
    for c in SEGMENTAL_CLASSES:
        if c in segmentals:
            _extend(segmentals[c], 1, spec, rng)

    return _collapse_single_children(root)


def _bfs(root: TopologyNode) -> List[Tuple[TopologyNode, Optional[int], int]]:
    # (ノード, 親の並び位置, 深さ)
    order: List[Tuple[TopologyNode, Optional[int], int]] = [(root, None, 0)]
    head = 0
    while head < len(order):
        node, _, level = order[head]
        for child in node.children:
            order.append((child, head, level + 1))
        head += 1
    return order


def _sub(a: Point, b: Point) -> Point:
    return (a[0] - b[0], a[1] - b[1], a[2] - b[2])


def _dot(a: Point, b: Point) -> float:
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]


def _norm(a: Point) -> float:
    return math.sqrt(_dot(a, a))


def _along(origin: Point, direction: Point, t: float) -> Point:
    return (origin[0] + t * direction[0], origin[1] + t * direction[1], origin[2] + t * direction[2])


def point_segment_distance(p: Point, a: Point, b: Point) -> float:
    ab = _sub(b, a)
    denom = _dot(ab, ab)
    t = 0.0 if denom == 0 else min(1.0, max(0.0, _dot(_sub(p, a), ab) / denom))
    return _norm(_sub(p, _along(a, ab, t)))


def segment_segment_distance(p1: Point, q1: Point, p2: Point, q2: Point) -> float:
    """2つの線分の最短距離（端点の縮退も扱う）"""
    d1 = _sub(q1, p1)
    d2 = _sub(q2, p2)
    r = _sub(p1, p2)
    a = _dot(d1, d1)
    e = _dot(d2, d2)
    f = _dot(d2, r)
    eps = 1e-12

    if a <= eps and e <= eps:
        return _norm(r)
    if a <= eps:
        s = 0.0
        t = min(1.0, max(0.0, f / e))
    else:
        c = _dot(d1, r)
        if e <= eps:
            t = 0.0
            s = min(1.0, max(0.0, -c / a))
        else:
            b = _dot(d1, d2)
            denom = a * e - b * b
            s = min(1.0, max(0.0, (b * f - c * e) / denom)) if denom > eps else 0.0
            t = (b * s + f) / e
            if t < 0.0:
                t = 0.0
                s = min(1.0, max(0.0, -c / a))
            elif t > 1.0:
                t = 1.0
                s = min(1.0, max(0.0, (b - c) / a))
    return _norm(_sub(_along(p1, d1, s), _along(p2, d2, t)))


def _layout(order: List[Tuple[TopologyNode, Optional[int], int]], spec: SyntheticTreeSpec,
            rng: SplitMix64) -> Optional[List[BranchGeometry]]:
    n = len(order)
    children: List[List[int]] = [[] for _ in range(n)]
    for index, (_, parent, _) in enumerate(order):
        if parent is not None:
            children[parent].append(index)

    # 葉を深さ優先順に等間隔で並べ、親は子の平均
    x = [0.0] * n
    slot = 0
    stack: List[Tuple[int, bool]] = [(0, False)]
    while stack:
        index, expanded = stack.pop()
        if not children[index]:
            x[index] = slot * LEAF_SPACING
            slot += 1
        elif expanded:
            x[index] = sum(x[c] for c in children[index]) / len(children[index])
        else:
            stack.append((index, True))
            for c in reversed(children[index]):
                stack.append((c, False))

    junctions: List[Point] = []
    radii: List[float] = []
    for index, (_, _, level) in enumerate(order):
        jx = x[index] + spec.angle_jitter * LEAF_SPACING * rng.symmetric()
        jz = (level + 1) * BAND_HEIGHT + spec.length_jitter * BAND_HEIGHT * rng.symmetric()
        junctions.append((jx, 0.0, jz))
        radii.append(max(MIN_RADIUS, ROOT_RADIUS * RADIUS_DECAY ** level))

    junction_radii = [0.0] * n
    for index in range(n):
        kids = children[index]
        if not kids:
            continue
        rho = radii[index] + 1.0
        if len(kids) == 2:
            a, b = kids
            ua = _sub(junctions[a], junctions[index])
            ub = _sub(junctions[b], junctions[index])
            la, lb = _norm(ua), _norm(ub)
            if la == 0 or lb == 0:
                return None
            cos_theta = max(-1.0, min(1.0, _dot(ua, ub) / (la * lb)))
            half = math.sin(math.acos(cos_theta) / 2.0)
            if half < 1e-6:
                return None
            rho = max(rho, 1.0 + (radii[a] + radii[b] + SIBLING_MARGIN) / (2.0 * half))
        junction_radii[index] = rho

    geometry: List[BranchGeometry] = []
    for index, (_, parent, _) in enumerate(order):
        end = junctions[index]
        if parent is None:
            start: Point = (end[0], end[1], end[2] - BAND_HEIGHT)
        else:
            origin = junctions[parent]
            direction = _sub(end, origin)
            length = _norm(direction)
            offset = junction_radii[parent] - 1.0
            if length - offset < MIN_TUBE_LENGTH:
                return None
            start = _along(origin, direction, offset / length)
        geometry.append(BranchGeometry(start=start, end=end, radius=radii[index],
                                       junction_radius=junction_radii[index]))
    return geometry


def _primitives(geometry: List[BranchGeometry]) -> List[Tuple[int, Point, Point, float]]:
    # (枝の並び位置, 始点, 終点, 半径)。球は始点と終点が同じ
    prims = []
    for index, g in enumerate(geometry):
        prims.append((index, g.start, g.end, g.radius))
        if g.junction_radius > 0:
            prims.append((index, g.end, g.end, g.junction_radius))
    return prims


def _has_clearance(geometry: List[BranchGeometry], parents: List[Optional[int]]) -> bool:
    prims = _primitives(geometry)
    for i in range(len(prims)):
        a, p1, q1, r1 = prims[i]
        for j in range(i + 1, len(prims)):
            b, p2, q2, r2 = prims[j]
            if a == b or parents[a] == b or parents[b] == a:
                continue
            if segment_segment_distance(p1, q1, p2, q2) - (r1 + r2) < CLEARANCE:
                return False
    return True


def _fit_dims(geometry: List[BranchGeometry],
              dims: Optional[Sequence[int]]) -> Tuple[List[BranchGeometry], Tuple[int, int, int]]:
    prims = _primitives(geometry)
    low = [min(min(p[1][axis], p[2][axis]) - p[3] for p in prims) for axis in range(3)]
    high = [max(max(p[1][axis], p[2][axis]) + p[3] for p in prims) for axis in range(3)]
    shift = tuple(VOLUME_MARGIN - math.floor(lo) for lo in low)
    fitted = tuple(int(math.ceil(hi + s)) + VOLUME_MARGIN + 1 for hi, s in zip(high, shift))

    if dims is None:
        out_dims = fitted
    else:
        out_dims = tuple(int(d) for d in dims)
        if any(f > d for f, d in zip(fitted, out_dims)):
            raise GenerationError(f"geometry needs a volume of at least {fitted}, got {out_dims}")

    def moved(p: Point) -> Point:
        return (p[0] + shift[0], p[1] + shift[1], p[2] + shift[2])

    shifted = [BranchGeometry(start=moved(g.start), end=moved(g.end), radius=g.radius,
                              junction_radius=g.junction_radius) for g in geometry]
    return shifted, out_dims  # type: ignore[return-value]


def _paint(voxels: np.ndarray, label: int, p: Point, q: Point, radius: float) -> None:
    lo = [max(0, int(math.floor(min(p[a], q[a]) - radius))) for a in range(3)]
    hi = [min(voxels.shape[a], int(math.ceil(max(p[a], q[a]) + radius)) + 1) for a in range(3)]
    if any(l >= h for l, h in zip(lo, hi)):
        return
    grid = np.stack(np.meshgrid(*[np.arange(l, h, dtype=np.float64) for l, h in zip(lo, hi)],
                                indexing="ij"), axis=-1)
    a = np.array(p)
    ab = np.array(q) - a
    denom = float(ab @ ab)
    if denom == 0:
        nearest = np.broadcast_to(a, grid.shape)
    else:
        t = np.clip(((grid - a) @ ab) / denom, 0.0, 1.0)
        nearest = a + t[..., None] * ab
    inside = ((grid - nearest) ** 2).sum(axis=-1) <= radius * radius
    block = voxels[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
    block[inside & (block == 0)] = label


def _rasterize(node_ids: Sequence[int], geometry: Sequence[BranchGeometry],
               dims: Tuple[int, int, int]) -> np.ndarray:
    dtype = np.uint16 if max(node_ids) <= 0xFFFF else np.uint32
    voxels = np.zeros(dims, dtype=dtype)
    for node, g in zip(node_ids, geometry):
        _paint(voxels, node, g.start, g.end, g.radius)
        if g.junction_radius > 0:
            _paint(voxels, node, g.end, g.end, g.junction_radius)
    return voxels


def _round_trips(voxels: np.ndarray, node_ids: Sequence[int], edges: Sequence[Tuple[int, int]]) -> bool:
    present = set(int(v) for v in np.unique(voxels) if v != 0)
    if present != set(node_ids):
        return False
    return adjacent_label_pairs(voxels) == sorted(edges)


def generate_tree(spec: SyntheticTreeSpec) -> SyntheticTree:
    """
    合成ツリーを生成する

    形状は試行ごとに別の乱数列で引き直し、隣接しない枝の間隔と
    描画後の位相（枝の隣接 = 親子）を満たした最初の形状を採る。

    Raises:
        GenerationError: 仕様が不正、ボリュームに収まらない、max_attempts 回で配置できない場合
    """
    topology = draw_topology(spec)
    order = _bfs(topology)
    node_ids = list(range(1, len(order) + 1))
    parent_rows: List[Optional[int]] = [parent for _, parent, _ in order]
    edges = [(parent + 1, index + 1) for index, parent in enumerate(parent_rows) if parent is not None]
    labels = {index + 1: node.label for index, (node, _, _) in enumerate(order)}

    for attempt in range(spec.max_attempts):
        rng = SplitMix64(spec.seed ^ ((attempt + 1) * ATTEMPT_STRIDE & MASK64))
        geometry = _layout(order, spec, rng)
        if geometry is None or not _has_clearance(geometry, parent_rows):
            continue
        geometry, dims = _fit_dims(geometry, spec.volume_dims)
        voxels = _rasterize(node_ids, geometry, dims)
        if not _round_trips(voxels, node_ids, edges):
            logger.debug(f"合成ツリー seed={spec.seed}: 試行 {attempt + 1} は位相が一致しないため再試行")
            continue

        if attempt:
            logger.debug(f"合成ツリー seed={spec.seed}: {attempt + 1} 回目の試行で配置")
        return SyntheticTree(
            spec=spec,
            node_ids=node_ids,
            edges=edges,
            labels=labels,
            parents={index + 1: parent + 1 for index, parent in enumerate(parent_rows) if parent is not None},
            geometry=dict(zip(node_ids, geometry)),
            dims=dims,
            attempts=attempt + 1,
        )

    raise GenerationError(f"could not place tree seed={spec.seed} within {spec.max_attempts} attempts")


def rasterize_tree(tree: SyntheticTree, dims: Optional[Sequence[int]] = None,
                   spacing: Optional[Sequence[float]] = None) -> VoxelLabelMap:
    """
    ツリーの形状をラベルボリュームに描画する

    Args:
        tree: generate_tree の結果
        dims: ボリュームの大きさ（省略時は tree.dims）
        spacing: ボクセル間隔（省略時は仕様の値）

    Raises:
        GenerationError: 形状がボリュームに収まらない場合
    """
    out_dims = tuple(int(d) for d in (dims or tree.dims))
    if len(out_dims) != 3:
        raise GenerationError(f"volume dims must have 3 entries, got {out_dims}")
    geometry = [tree.geometry[node] for node in tree.node_ids]
    for g in geometry:
        for point, radius in ((g.start, g.radius), (g.end, max(g.radius, g.junction_radius))):
            if any(c - radius < 0 or c + radius > d - 1 for c, d in zip(point, out_dims)):
                raise GenerationError(f"tree geometry does not fit in a volume of {out_dims}")
    voxels = _rasterize(tree.node_ids, geometry, out_dims)  # type: ignore[arg-type]
    return VoxelLabelMap(voxels=voxels, spacing=tuple(spacing or tree.spec.spacing))  # type: ignore[arg-type]


__all__ = [
    'SplitMix64', 'SyntheticTreeSpec', 'TopologyNode', 'BranchGeometry', 'SyntheticTree',
    'MIN_DEPTH', 'MAX_DEPTH', 'MIN_SEGMENTALS', 'TEMPLATE', 'draw_topology', 'generate_tree', 'rasterize_tree',
    'point_segment_distance', 'segment_segment_distance',
]
