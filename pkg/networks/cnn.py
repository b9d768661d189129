"""
枝パッチCNNモジュール

3つのダウンサンプリングブロック（同サイズ畳み込み2回 + 最大値プーリング）、
2つの拡幅畳み込み、平坦化後の線形射影で1024次元の枝特徴を作り、
22クラスの分類ヘッドを通します。活性化はすべてELUです。
"""
from dataclasses import dataclass, asdict
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from utils import logger, ShapeError, ConfigError, get_config
from models.anatomy import NUM_CLASSES
from models.label_map import VoxelLabelMap, BranchPatch, extract_patch
from models.patch_cache import PatchCache
from models.tree_graph import TreeGraph
from .tensor import Tensor, conv3d, elu, linear, maxpool3d, reshape, softmax, no_grad

ParamShapes = Dict[str, Tuple[Tuple[int, ...], int]]


@dataclass
class CnnConfig:
    """
    CNNの構成

    Attributes:
        patch_side: 入力パッチの一辺
        channels: 3ブロックのチャネル数
        widen_channels: 拡幅畳み込みのチャネル数
        feature_dim: 枝特徴の次元
        num_classes: 分類ヘッドの出力数
        widen_padding: "auto" / "valid" / "same"
    """
    patch_side: int = 80
    channels: Tuple[int, int, int] = (32, 64, 128)
    widen_channels: int = 256
    feature_dim: int = 1024
    num_classes: int = NUM_CLASSES
    widen_padding: str = "auto"

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)  # type: ignore[assignment]
        if len(self.channels) != 3 or min(self.channels) < 1:
            raise ConfigError(f"cnn channels must be 3 positive integers, got {self.channels}")
        if self.patch_side < 8:
            raise ConfigError(f"patch side must be >= 8 for three pooling blocks, got {self.patch_side}")
        if self.widen_padding not in ("auto", "valid", "same"):
            raise ConfigError(f"unknown widen padding: {self.widen_padding}")
        if self.widen_channels < 1 or self.feature_dim < 1 or self.num_classes < 1:
            raise ConfigError("cnn widths must be positive")

    @property
    def pooled_side(self) -> int:
        return self.patch_side // 2 // 2 // 2

    @property
    def resolved_widen_padding(self) -> str:
        if self.widen_padding != "auto":
            return self.widen_padding
        return "valid" if self.pooled_side >= 5 else "same"

    @property
    def widened_side(self) -> int:
        side = self.pooled_side
        return side - 4 if self.resolved_widen_padding == "valid" else side

    @property
    def flatten_dim(self) -> int:
        return self.widen_channels * self.widened_side ** 3

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["channels"] = list(self.channels)
        return data

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "CnnConfig":
        known = {k: data[k] for k in ("patch_side", "channels", "widen_channels", "feature_dim",
                                      "num_classes", "widen_padding") if k in data}
        return cls(**known)

    @classmethod
    def from_settings(cls, profile: str = "cnn", patch_side: Optional[int] = None) -> "CnnConfig":
        """
        設定（cnn または desk セクション）から構成を作る

        Args:
            profile: "cnn"（既定の80³構成）または "desk"（小規模構成）
            patch_side: パッチの一辺の上書き
        """
        config = get_config()
        if profile not in ("cnn", "desk"):
            raise ConfigError(f"unknown cnn profile: {profile}")
        side = patch_side or config.get(f"{profile}.patch_side")
        return cls(
            patch_side=int(side),
            channels=tuple(config.get(f"{profile}.channels")),
            widen_channels=int(config.get(f"{profile}.widen_channels")),
            feature_dim=int(config.get("cnn.feature_dim", 1024)),
            widen_padding=str(config.get("cnn.widen_padding", "auto")),
        )


def _conv_names() -> List[str]:
    names = []
    for block in range(1, 4):
        names.extend([f"block{block}.conv1", f"block{block}.conv2"])
    names.extend(["widen.conv1", "widen.conv2"])
    return names


def cnn_param_shapes(cfg: CnnConfig) -> ParamShapes:
    """
    パラメーター名 → (形状, fan_in)

    重みは He 初期化、バイアスは fan_in = 0（ゼロ初期化）として返す。
    """
    shapes: ParamShapes = {}
    widths = [1]
    for c in cfg.channels:
        widths.extend([c, c])
    widths.extend([cfg.widen_channels, cfg.widen_channels])
    for name, c_in, c_out in zip(_conv_names(), widths[:-1], widths[1:]):
        shapes[f"{name}.weight"] = ((c_out, c_in, 3, 3, 3), c_in * 27)
        shapes[f"{name}.bias"] = ((c_out,), 0)
    shapes["feature.weight"] = ((cfg.flatten_dim, cfg.feature_dim), cfg.flatten_dim)
    shapes["feature.bias"] = ((cfg.feature_dim,), 0)
    shapes["head.weight"] = ((cfg.feature_dim, cfg.num_classes), cfg.feature_dim)
    shapes["head.bias"] = ((cfg.num_classes,), 0)
    return shapes


def _check_params(params: Mapping[str, Tensor], cfg: CnnConfig) -> None:
    for name, (shape, _) in cnn_param_shapes(cfg).items():
        if name not in params:
            raise ShapeError(f"cnn parameter missing: {name}")
        if params[name].shape != shape:
            raise ShapeError(f"cnn parameter {name} has shape {params[name].shape}, expected {shape}")


def cnn_apply(params: Mapping[str, Tensor], patches: Any, cfg: CnnConfig) -> Tuple[Tensor, Tensor]:
    """
    パッチのバッチをCNNに通す

    Args:
        params: パラメーター
        patches: (N, S, S, S) の配列またはテンソル
        cfg: 構成

    Returns:
        (features, logits): (N, feature_dim) と (N, num_classes)
    """
    x = patches if isinstance(patches, Tensor) else Tensor(np.asarray(patches, dtype=np.float32))
    side = cfg.patch_side
    if x.ndim != 4 or x.shape[1:] != (side, side, side):
        raise ShapeError(f"patch batch must be (N, {side}, {side}, {side}), got {x.shape}")
    _check_params(params, cfg)

    n = x.shape[0]
    h = reshape(x, (n, 1, side, side, side))
    for block in range(1, 4):
        for conv in ("conv1", "conv2"):
            name = f"block{block}.{conv}"
            h = elu(conv3d(h, params[f"{name}.weight"], params[f"{name}.bias"], padding="same"))
        h = maxpool3d(h)

    padding = cfg.resolved_widen_padding
    for conv in ("conv1", "conv2"):
        name = f"widen.{conv}"
        h = elu(conv3d(h, params[f"{name}.weight"], params[f"{name}.bias"], padding=padding))

    flat = reshape(h, (n, cfg.flatten_dim))
    features = elu(linear(flat, params["feature.weight"], params["feature.bias"]))
    logits = linear(features, params["head.weight"], params["head.bias"])
    return features, logits


def cnn_forward(patch: BranchPatch, params: Mapping[str, Tensor], cfg: CnnConfig) -> Tuple[np.ndarray, np.ndarray]:
    """
    1つのパッチから枝特徴とクラス確率を求める

    Returns:
        (feature, probs): (feature_dim,) と (num_classes,)

    Raises:
        ShapeError: パッチの一辺が構成と一致しない場合
    """
    if patch.side != cfg.patch_side:
        raise ShapeError(f"patch side {patch.side} does not match cnn patch side {cfg.patch_side}")
    with no_grad():
        features, logits = cnn_apply(params, patch.values[None], cfg)
        probs = softmax(logits)
    return features.data[0], probs.data[0]


def branch_patches(label_map: VoxelLabelMap, graph: TreeGraph, side: int,
                   tree_id: str = "", cache: Optional[PatchCache] = None,
                   rows: Optional[Sequence[int]] = None) -> np.ndarray:
    """
    グラフのノード順に枝パッチを切り出す（(N, S, S, S)）

    cache を渡すと (tree_id, 枝ID, side) で再利用する。
    """
    selected = range(graph.num_nodes) if rows is None else rows
    patches = []
    for row in selected:
        branch = graph.node_ids[row]
        center = graph.centers.get(branch)

        def make(branch=branch, center=center) -> np.ndarray:
            return extract_patch(label_map, branch, side, center=center).values

        if cache is None:
            patches.append(make())
        else:
            patches.append(cache.get_or_create(tree_id, branch, side, make))
    if not patches:
        return np.zeros((0, side, side, side), dtype=np.float32)
    return np.stack(patches)


def extract_features(label_map: VoxelLabelMap, graph: TreeGraph, params: Mapping[str, Tensor],
                     cfg: CnnConfig, batch_size: int = 32, tree_id: str = "",
                     cache: Optional[PatchCache] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    ツリーの全枝の特徴とクラス確率を求める（行はグラフのノード順）

    Returns:
        (features, probs): (N, feature_dim) と (N, num_classes)

    Raises:
        ShapeError: ツリーに枝が無い場合
    """
    if graph.num_nodes == 0:
        raise ShapeError("cannot extract features from an empty tree")
    if batch_size < 1:
        raise ConfigError(f"batch size must be positive, got {batch_size}")

    features = []
    probs = []
    with no_grad():
        for start in range(0, graph.num_nodes, batch_size):
            rows = range(start, min(start + batch_size, graph.num_nodes))
            batch = branch_patches(label_map, graph, cfg.patch_side, tree_id, cache, rows)
            f, logits = cnn_apply(params, batch, cfg)
            features.append(f.data)
            probs.append(softmax(logits).data)

    logger.debug("CNN features for %s: %d branches", tree_id or "tree", graph.num_nodes)
    return np.concatenate(features).astype(np.float32), np.concatenate(probs).astype(np.float32)


__all__ = [
    'CnnConfig', 'cnn_param_shapes', 'cnn_apply', 'cnn_forward',
    'branch_patches', 'extract_features',
]
