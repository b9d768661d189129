"""
ラベルマップモデルモジュール

枝ラベルボリュームの読み書き、標準間隔への再サンプリング、
枝隣接グラフの構築、枝中心の計算、CNN入力パッチの切り出しを提供します。

ボクセル配列は dims と同じ順序（矢状, 冠状, 軸位）で [i, j, k] と添字付けし、
rawペイロードは x（i）が最速で変化する順に並べます。
"""
import os
from dataclasses import dataclass, field
from itertools import product
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from utils import logger, VolumeFormatError, GraphError
from .tree_graph import TreeGraph

# MetaImage ElementType → numpy dtype（リトルエンディアン）
ELEMENT_TYPES = {
    "MET_USHORT": np.dtype("<u2"),
    "MET_UINT": np.dtype("<u4"),
}

MANDATORY_KEYS = ("ObjectType", "NDims", "DimSize", "ElementSpacing", "ElementType", "ElementDataFile")

# パッチの3値
PATCH_CENTER_VALUE = np.float32(0.9)
PATCH_OTHER_VALUE = np.float32(0.5)
PATCH_BACKGROUND_VALUE = np.float32(0.0)

Index3 = Tuple[int, int, int]


@dataclass
class VoxelLabelMap:
    """
    枝ラベルボリューム

    voxels は非負整数の3次元配列（0 = 背景、1以上 = 枝ID）、spacing はmm単位。
    """
    voxels: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        voxels = np.asarray(self.voxels)
        if voxels.ndim != 3 or min(voxels.shape) < 1:
            raise VolumeFormatError(f"label map must be a non-empty 3D array, got shape {voxels.shape}")
        if not np.issubdtype(voxels.dtype, np.integer):
            raise VolumeFormatError(f"label map must hold integers, got {voxels.dtype}")
        if voxels.size and voxels.min() < 0:
            raise VolumeFormatError("label map holds negative labels")
        if voxels.dtype not in (np.uint16, np.uint32):
            voxels = voxels.astype(np.uint16 if voxels.max(initial=0) <= 0xFFFF else np.uint32)
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise VolumeFormatError(f"spacing must be 3 positive reals, got {self.spacing}")
        self.voxels = voxels
        self.spacing = spacing  # type: ignore[assignment]

    @property
    def dims(self) -> Index3:
        return tuple(int(d) for d in self.voxels.shape)  # type: ignore[return-value]

    def branch_ids(self) -> List[int]:
        """ボリューム中の枝IDを昇順で返す"""
        ids = np.unique(self.voxels)
        return [int(i) for i in ids if i != 0]

    def has_branch(self, branch: int) -> bool:
        return bool(branch > 0 and np.any(self.voxels == branch))


@dataclass
class BranchPatch:
    """CNN入力パッチ（3値: 0.0 背景、0.5 他の枝、0.9 中心の枝）"""
    side: int
    values: np.ndarray
    center_branch: int
    center: Index3 = field(default=(0, 0, 0))


def _parse_header(text: str, path: str) -> Dict[str, str]:
    header: Dict[str, str] = {}
    for line in text.splitlines():
        if "=" not in line:
            continue
        key, value = line.split("=", 1)
        key = key.strip()
        header[key] = value.strip()
        if key == "ElementDataFile":
            break
    missing = [key for key in MANDATORY_KEYS if key not in header]
    if missing:
        raise VolumeFormatError(f"{path}: missing MetaImage keys {missing}")
    return header


def _is_true(value: str) -> bool:
    return value.strip().lower() in ("true", "1", "yes")


def read_label_map(path: str) -> VoxelLabelMap:
    """
    MetaImageヘッダー（.mhd）からラベルマップを読み込む

    Args:
        path: .mhd ファイルのパス

    Returns:
        VoxelLabelMap: 復号されたボリューム

    Raises:
        VolumeFormatError: ファイルが存在しない、非対応の型、ペイロード長の不一致
    """
    if not os.path.exists(path):
        raise VolumeFormatError(f"file not found: {path}")

    with open(path, "rb") as f:
        raw_file = f.read()

    # ヘッダーは ElementDataFile の行で終わる
    marker = raw_file.find(b"ElementDataFile")
    if marker < 0:
        raise VolumeFormatError(f"{path}: missing MetaImage keys ['ElementDataFile']")
    line_end = raw_file.find(b"\n", marker)
    header_end = len(raw_file) if line_end < 0 else line_end + 1
    header = _parse_header(raw_file[:header_end].decode("ascii", errors="replace"), path)

    if header["ObjectType"] != "Image":
        raise VolumeFormatError(f"{path}: unsupported ObjectType {header['ObjectType']}")
    if header["NDims"] != "3":
        raise VolumeFormatError(f"{path}: unsupported NDims {header['NDims']}")
    for key in ("ElementByteOrderMSB", "BinaryDataByteOrderMSB"):
        if key in header and _is_true(header[key]):
            raise VolumeFormatError(f"{path}: big-endian payloads are not supported")
    if _is_true(header.get("CompressedData", "False")):
        raise VolumeFormatError(f"{path}: compressed payloads are not supported")

    element_type = header["ElementType"]
    if element_type not in ELEMENT_TYPES:
        raise VolumeFormatError(f"{path}: unsupported ElementType {element_type}")
    dtype = ELEMENT_TYPES[element_type]

    try:
        dims = tuple(int(v) for v in header["DimSize"].split())
        spacing = tuple(float(v) for v in header["ElementSpacing"].split())
    except ValueError as e:
        raise VolumeFormatError(f"{path}: malformed DimSize/ElementSpacing: {e}") from e
    if len(dims) != 3 or min(dims) < 1:
        raise VolumeFormatError(f"{path}: DimSize must hold 3 positive integers")
    if len(spacing) != 3:
        raise VolumeFormatError(f"{path}: ElementSpacing must hold 3 reals")

    expected = int(np.prod(dims)) * dtype.itemsize
    data_file = header["ElementDataFile"]
    if data_file == "LOCAL":
        payload = raw_file[header_end:]
    else:
        raw_path = os.path.join(os.path.dirname(os.path.abspath(path)), data_file)
        if not os.path.exists(raw_path):
            raise VolumeFormatError(f"{path}: data file not found: {raw_path}")
        with open(raw_path, "rb") as f:
            payload = f.read()

    if len(payload) != expected:
        raise VolumeFormatError(
            f"{path}: payload holds {len(payload)} bytes, DimSize/ElementType require {expected}")

    # rawはxが最速 → (k, j, i) で読み込んで (i, j, k) に転置
    flat = np.frombuffer(payload, dtype=dtype)
    voxels = flat.reshape(dims[::-1]).transpose(2, 1, 0).astype(dtype.type)
    label_map = VoxelLabelMap(voxels=np.ascontiguousarray(voxels), spacing=spacing)  # type: ignore[arg-type]
    logger.debug("Read label map %s: dims=%s spacing=%s", path, dims, spacing)
    return label_map


def write_label_map(label_map: VoxelLabelMap, path: str, local: bool = False) -> str:
    """
    ラベルマップをMetaImage形式で書き出す

    Args:
        label_map: 書き出すボリューム
        path: .mhd ファイルのパス（rawは同じ名前の .raw）
        local: True の場合はペイロードをヘッダーと同じファイルに書く

    Returns:
        str: 書き込んだヘッダーのパス
    """
    voxels = label_map.voxels
    element_type = "MET_USHORT" if voxels.dtype == np.uint16 else "MET_UINT"
    dtype = ELEMENT_TYPES[element_type]
    payload = np.ascontiguousarray(voxels.transpose(2, 1, 0)).astype(dtype).tobytes()

    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    stem = os.path.splitext(os.path.basename(path))[0]
    data_file = "LOCAL" if local else f"{stem}.raw"

    lines = [
        "ObjectType = Image",
        "NDims = 3",
        "BinaryData = True",
        "BinaryDataByteOrderMSB = False",
        "CompressedData = False",
        "DimSize = " + " ".join(str(d) for d in label_map.dims),
        "ElementSpacing = " + " ".join(repr(float(s)) for s in label_map.spacing),
        "ElementByteOrderMSB = False",
        f"ElementType = {element_type}",
        f"ElementDataFile = {data_file}",
    ]
    header = ("\n".join(lines) + "\n").encode("ascii")

    with open(path, "wb") as f:
        f.write(header)
        if local:
            f.write(payload)
    if not local:
        with open(os.path.join(os.path.dirname(os.path.abspath(path)), data_file), "wb") as f:
            f.write(payload)

    logger.debug("Wrote label map %s (%s, dims=%s)", path, element_type, label_map.dims)
    return path


def _nearest_indices(n_out: int, n_in: int, scale: float) -> np.ndarray:
    # 出力ボクセル中心の入力添字座標; 等距離は小さい添字を採る
    u = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
    return np.clip(np.ceil(u - 0.5), 0, n_in - 1).astype(np.intp)


def resample_nearest(label_map: VoxelLabelMap, target_spacing: Sequence[float]) -> VoxelLabelMap:
    """
    最近傍補間で指定のボクセル間隔に再サンプリングする

    両格子は角の原点を共有し、入力ボクセル i の中心は (i + 0.5)・spacing にある。

    Args:
        label_map: 入力ボリューム
        target_spacing: 出力のボクセル間隔（3つの正の実数）

    Returns:
        VoxelLabelMap: 再サンプリングされたボリューム
    """
    target = tuple(float(t) for t in target_spacing)
    if len(target) != 3 or min(target) <= 0:
        raise VolumeFormatError(f"target spacing must be 3 positive reals, got {target_spacing}")

    if target == label_map.spacing:
        return VoxelLabelMap(voxels=label_map.voxels.copy(), spacing=label_map.spacing)

    axes = []
    out_dims = []
    for n_in, s_in, s_out in zip(label_map.dims, label_map.spacing, target):
        n_out = max(1, int(round(n_in * s_in / s_out)))
        out_dims.append(n_out)
        axes.append(_nearest_indices(n_out, n_in, s_out / s_in))

    voxels = label_map.voxels[np.ix_(*axes)]
    logger.debug("Resampled %s @ %s -> %s @ %s", label_map.dims, label_map.spacing, tuple(out_dims), target)
    return VoxelLabelMap(voxels=np.ascontiguousarray(voxels), spacing=target)  # type: ignore[arg-type]


def _half_neighborhood() -> List[Index3]:
    # 26近傍のうち辞書順で正の半分（13方向）
    offsets = []
    for offset in product((-1, 0, 1), repeat=3):
        if offset > (0, 0, 0):
            offsets.append(offset)
    return offsets


def _shifted_pair(voxels: np.ndarray, offset: Index3) -> Tuple[np.ndarray, np.ndarray]:
    src = []
    dst = []
    for o, n in zip(offset, voxels.shape):
        if o >= 0:
            src.append(slice(0, n - o))
            dst.append(slice(o, n))
        else:
            src.append(slice(-o, n))
            dst.append(slice(0, n + o))
    return voxels[tuple(src)], voxels[tuple(dst)]


def adjacent_label_pairs(voxels: np.ndarray) -> List[Tuple[int, int]]:
    """26近傍で接する異なる枝ラベルの組 (a < b) を昇順で返す"""
    pairs = set()
    for offset in _half_neighborhood():
        a, b = _shifted_pair(voxels, offset)
        mask = (a != b) & (a > 0) & (b > 0)
        if not mask.any():
            continue
        la = a[mask].astype(np.int64)
        lb = b[mask].astype(np.int64)
        lo = np.minimum(la, lb)
        hi = np.maximum(la, lb)
        for pair in np.unique(np.stack([lo, hi], axis=1), axis=0):
            pairs.add((int(pair[0]), int(pair[1])))
    return sorted(pairs)


def _nearest_to_centroid(coords: np.ndarray) -> Index3:
    # coords は辞書順に並んでいる → argmin の最初の一致が辞書順最小
    centroid = coords.mean(axis=0)
    d2 = ((coords - centroid) ** 2).sum(axis=1)
    best = coords[int(np.argmin(d2))]
    return (int(best[0]), int(best[1]), int(best[2]))


def branch_center(label_map: VoxelLabelMap, branch: int) -> Index3:
    """
    枝中心（枝ボクセルの重心に最も近い枝ボクセル）を返す

    Raises:
        GraphError: 枝IDがボリュームに存在しない場合
    """
    coords = np.argwhere(label_map.voxels == branch) if branch > 0 else np.empty((0, 3))
    if len(coords) == 0:
        raise GraphError(f"unknown branch id: {branch}")
    return _nearest_to_centroid(coords)


def branch_centers(label_map: VoxelLabelMap) -> Dict[int, Index3]:
    """全枝の中心を一度に計算する（branch_center と同じ結果）"""
    voxels = label_map.voxels
    centers: Dict[int, Index3] = {}
    for index, box in enumerate(ndimage.find_objects(voxels)):
        if box is None:
            continue
        branch = index + 1
        local = np.argwhere(voxels[box] == branch)
        offset = np.array([s.start for s in box])
        centers[branch] = _nearest_to_centroid(local + offset)
    return centers


def build_branch_graph(label_map: VoxelLabelMap) -> TreeGraph:
    """
    ラベルマップから枝隣接グラフを構築する

    2つの枝のボクセルが26近傍で接していれば辺で結ぶ。

    Raises:
        GraphError: ボリュームがすべて背景の場合
    """
    voxels = label_map.voxels
    counts = np.bincount(voxels.ravel().astype(np.int64))
    node_ids = [int(i) for i in np.flatnonzero(counts) if i != 0]
    if not node_ids:
        raise GraphError("label map holds no branches")

    edges = adjacent_label_pairs(voxels)
    centers = branch_centers(label_map)
    graph = TreeGraph(
        node_ids=node_ids,
        edges=edges,
        centers={i: centers[i] for i in node_ids},
        voxel_counts={i: int(counts[i]) for i in node_ids},
    )
    logger.debug("Built branch graph: %d nodes, %d edges", len(node_ids), len(edges))
    return graph


def extract_patch(label_map: VoxelLabelMap, branch: int, side: int,
                  center: Optional[Index3] = None) -> BranchPatch:
    """
    枝中心を中心とする3値パッチを切り出す

    窓は各軸で c - side//2 から side 個のボクセルを覆い、ボリューム外は0で埋める。

    Args:
        label_map: 入力ボリューム
        branch: 中心の枝ID
        side: パッチの一辺（2以上）
        center: 事前に計算した枝中心（省略時は branch_center で計算）

    Raises:
        GraphError: 枝IDが存在しない場合
        ValueError: side < 2 の場合
    """
    if side < 2:
        raise ValueError(f"patch side must be >= 2, got {side}")
    if center is None:
        center = branch_center(label_map, branch)
    elif not label_map.has_branch(branch):
        raise GraphError(f"unknown branch id: {branch}")

    values = np.zeros((side, side, side), dtype=np.float32)
    src = []
    dst = []
    for c, n in zip(center, label_map.dims):
        lo = c - side // 2
        a = max(lo, 0)
        b = min(lo + side, n)
        if a >= b:
            return BranchPatch(side=side, values=values, center_branch=branch, center=center)
        src.append(slice(a, b))
        dst.append(slice(a - lo, b - lo))

    window = label_map.voxels[tuple(src)]
    block = np.where(window == branch, PATCH_CENTER_VALUE,
                     np.where(window > 0, PATCH_OTHER_VALUE, PATCH_BACKGROUND_VALUE))
    values[tuple(dst)] = block
    return BranchPatch(side=side, values=values, center_branch=branch, center=center)


__all__ = [
    'VoxelLabelMap', 'BranchPatch', 'read_label_map', 'write_label_map',
    'resample_nearest', 'adjacent_label_pairs', 'branch_center', 'branch_centers',
    'build_branch_graph', 'extract_patch',
    'PATCH_CENTER_VALUE', 'PATCH_OTHER_VALUE', 'PATCH_BACKGROUND_VALUE',
]
