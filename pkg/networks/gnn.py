"""
グラフニューラルネットワークモジュール

グラフ注意層（GAT）、スキップ接続付きGAT（GATS）、
特徴と位置エンコーディングの2系統を持つSPGNN、比較用のGCN/GIN/SAGE層を提供します。
活性化はすべてELU、近傍 N(b) には自己ループを含みます。
"""
from dataclasses import dataclass, asdict
from typing import Any, Dict, List, Mapping, Optional, Tuple

import numpy as np

from utils import logger, ShapeError, ConfigError, GraphError, get_config
from models.anatomy import NUM_CLASSES, NUM_ANCHORS
from models.tree_graph import TreeGraph
from .tensor import (
    Tensor, concat, elu, gather_rows, linear, matmul, mul, no_grad, reshape,
    segment_max, segment_softmax, segment_sum, softmax,
)

ARCHITECTURES = ("gat", "gats", "gcn", "gin", "sage", "spgnn")
PE_MODES = ("learnable", "nlpe", "none")
# スキップ接続を付け外しできるアーキテクチャ
SKIP_OPTIONAL = ("gcn", "gin", "sage")

# 層数ごとの h 系統の出力次元
LAYER_DIMS: Dict[int, Tuple[int, ...]] = {
    2: (256, 1024),
    4: (256, 128, 64, 1024),
    7: (256, 128, 64, 64, 64, 64, 1024),
}

ParamShapes = Dict[str, Tuple[Tuple[int, ...], int]]


@dataclass
class GraphIndex:
    """
    メッセージパッシング用の辺インデックス

    src/dst は行インデックス、dst の昇順。degree は自己ループを含む入次数。
    """
    src: np.ndarray
    dst: np.ndarray
    num_nodes: int
    degree: np.ndarray
    has_self_loops: bool

    @classmethod
    def from_graph(cls, graph: TreeGraph, self_loops: bool = True) -> "GraphIndex":
        src, dst = graph.directed_edges(self_loops=self_loops)
        n = graph.num_nodes
        degree = np.bincount(dst, minlength=n).astype(np.float64)
        loops = np.zeros(n, dtype=bool)
        loops[dst[src == dst]] = True
        return cls(src=src, dst=dst, num_nodes=n, degree=degree, has_self_loops=bool(loops.all()))

    def require_self_loops(self) -> None:
        if not self.has_self_loops:
            raise GraphError("message passing needs a self-loop on every node")


@dataclass
class GnnConfig:
    """
    GNNの構成

    Attributes:
        arch: gat / gats / gcn / gin / sage / spgnn
        layers: 2 / 4 / 7
        skip: スキップ接続（None ならアーキテクチャの既定値）
        pe_mode: learnable / nlpe / none
    """
    arch: str = "spgnn"
    layers: int = 4
    skip: Optional[bool] = None
    pe_mode: Optional[str] = None
    feature_dim: int = 1024
    num_anchors: int = NUM_ANCHORS
    num_classes: int = NUM_CLASSES

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture: {self.arch} (choose from {', '.join(ARCHITECTURES)})")
        if self.layers not in LAYER_DIMS:
            raise ConfigError(f"layers must be one of {sorted(LAYER_DIMS)}, got {self.layers}")

        if self.pe_mode is None:
            self.pe_mode = "learnable" if self.arch == "spgnn" else "none"
        if self.pe_mode not in PE_MODES:
            raise ConfigError(f"unknown positional encoding mode: {self.pe_mode}")
        if self.arch == "spgnn" and self.pe_mode == "none":
            raise ConfigError("spgnn needs positional encodings (use --arch gats for a network without them)")
        if self.arch != "spgnn" and self.pe_mode != "none":
            raise ConfigError(f"positional encodings are only used by spgnn, not {self.arch}")

        default_skip = self.arch in ("gats", "spgnn")
        if self.skip is None:
            self.skip = default_skip
        if self.arch == "gats" and not self.skip:
            raise ConfigError("gats is the skip-connected gat; use --arch gat for no skip connections")
        if self.arch == "gat" and self.skip:
            raise ConfigError("gat has no skip connections; use --arch gats")

        if self.feature_dim < 1 or self.num_anchors < 1 or self.num_classes < 1:
            raise ConfigError("gnn widths must be positive")

    @property
    def hidden_dims(self) -> Tuple[int, ...]:
        return LAYER_DIMS[self.layers]

    @property
    def pe_dims(self) -> Tuple[int, ...]:
        return self.hidden_dims[:-1]

    @property
    def uses_pe(self) -> bool:
        return self.pe_mode != "none"

    @property
    def layer_kind(self) -> str:
        return "gat" if self.arch in ("gat", "gats", "spgnn") else self.arch

    def input_dims(self) -> List[int]:
        """各層の h 系統の入力幅"""
        widths = [self.feature_dim] + list(self.hidden_dims[:-1])
        if self.pe_mode == "learnable":
            return [w + p for w, p in zip(widths, (self.num_anchors,) + self.pe_dims)]
        if self.pe_mode == "nlpe":
            return [w + self.num_anchors for w in widths]
        return widths

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "GnnConfig":
        known = {k: data[k] for k in ("arch", "layers", "skip", "pe_mode", "feature_dim",
                                      "num_anchors", "num_classes") if k in data}
        return cls(**known)

    @classmethod
    def from_settings(cls, **overrides: Any) -> "GnnConfig":
        """設定の gnn セクションから構成を作る（None の上書きは無視）"""
        config = get_config()
        values = {
            "arch": config.get("gnn.arch", "spgnn"),
            "layers": int(config.get("gnn.layers", 4)),
            "skip": config.get("gnn.skip"),
            "pe_mode": None,
            "feature_dim": int(config.get("cnn.feature_dim", 1024)),
            "num_anchors": int(config.get("gnn.num_anchors", NUM_ANCHORS)),
        }
        values.update({k: v for k, v in overrides.items() if v is not None})
        if values["arch"] == "spgnn" and values["pe_mode"] is None:
            values["pe_mode"] = config.get("gnn.pe_mode", "learnable")
        return cls(**values)


def parse_variant(name: str) -> Dict[str, Any]:
    """
    評価用のモデル名（<arch> または <arch>-nlpe / <arch>-skip）を GnnConfig の引数に分ける

    -nlpe は spgnn のみ（固定の位置エンコーディング）、-skip は gcn / gin / sage のみ。

    Raises:
        ConfigError: 不明な名前や組み合わせの場合
    """
    arch, _, suffix = name.partition("-")
    if arch not in ARCHITECTURES:
        raise ConfigError(f"unknown architecture: {arch} (choose from {', '.join(ARCHITECTURES)})")
    if not suffix:
        return {"arch": arch}
    if suffix == "nlpe" and arch == "spgnn":
        return {"arch": arch, "pe_mode": "nlpe"}
    if suffix == "skip" and arch in SKIP_OPTIONAL:
        return {"arch": arch, "skip": True}
    raise ConfigError(f"unknown model variant: {name} (spgnn-nlpe or {'/'.join(SKIP_OPTIONAL)} with -skip)")


def _layer_shapes(kind: str, prefix: str, d_in: int, d_out: int) -> ParamShapes:
    if kind == "gat":
        return {
            f"{prefix}.W_g": ((d_in, d_out), d_in),
            f"{prefix}.W_a": ((d_in, d_out), d_in),
            f"{prefix}.W_r": ((2 * d_out, 1), 2 * d_out),
        }
    if kind == "gcn":
        return {f"{prefix}.W": ((d_in, d_out), d_in)}
    if kind == "gin":
        return {f"{prefix}.W": ((d_in, d_out), d_in), f"{prefix}.b": ((d_out,), 0)}
    if kind == "sage":
        return {
            f"{prefix}.W_pool": ((d_in, d_in), d_in),
            f"{prefix}.W": ((2 * d_in, d_out), 2 * d_in),
        }
    raise ConfigError(f"unknown layer kind: {kind}")


def gnn_param_shapes(cfg: GnnConfig) -> ParamShapes:
    """パラメーター名 → (形状, fan_in)（fan_in = 0 はゼロ初期化のバイアス）"""
    shapes: ParamShapes = {}
    kind = cfg.layer_kind
    stream = "hp" if cfg.arch == "spgnn" else "h"
    for l, (d_in, d_out) in enumerate(zip(cfg.input_dims(), cfg.hidden_dims)):
        prefix = f"layers.{l}.{stream}"
        shapes.update(_layer_shapes(kind, prefix, d_in, d_out))
        if cfg.skip:
            shapes[f"{prefix}.W_skip"] = ((d_in, d_out), d_in)

    if cfg.pe_mode == "learnable":
        p_in = (cfg.num_anchors,) + cfg.pe_dims[:-1]
        for l, (d_in, d_out) in enumerate(zip(p_in, cfg.pe_dims)):
            prefix = f"layers.{l}.p"
            shapes.update(_layer_shapes("gat", prefix, d_in, d_out))
            if cfg.skip:
                shapes[f"{prefix}.W_skip"] = ((d_in, d_out), d_in)

    last = cfg.hidden_dims[-1]
    shapes["head.weight"] = ((last, cfg.num_classes), last)
    shapes["head.bias"] = ((cfg.num_classes,), 0)
    return shapes


def _weights(params: Mapping[str, Tensor], prefix: str) -> Dict[str, Tensor]:
    start = prefix + "."
    return {name[len(start):]: value for name, value in params.items() if name.startswith(start)}


def gat_attention(h: Tensor, index: GraphIndex, weights: Mapping[str, Tensor]) -> Tensor:
    """辺ごとの注意係数 α（dst ごとに合計1）"""
    index.require_self_loops()
    z = matmul(h, weights["W_g"])
    pair = concat([gather_rows(z, index.dst), gather_rows(z, index.src)], axis=-1)
    scores = elu(matmul(pair, weights["W_r"]))
    return segment_softmax(reshape(scores, (len(index.src),)), index.dst, index.num_nodes)


def gat_layer(h: Tensor, index: GraphIndex, weights: Mapping[str, Tensor]) -> Tensor:
    """
    グラフ注意層

    α_bj = softmax_j(elu(W_r [W_g h_b, W_g h_j])), h'_b = elu(Σ_j α_bj W_a h_j)

    Raises:
        GraphError: 自己ループが無い場合
        ShapeError: 重みの形状が合わない場合
    """
    alpha = gat_attention(h, index, weights)
    messages = mul(gather_rows(matmul(h, weights["W_a"]), index.src),
                   reshape(alpha, (len(index.src), 1)))
    return elu(segment_sum(messages, index.dst, index.num_nodes))


def gcn_layer(h: Tensor, index: GraphIndex, weights: Mapping[str, Tensor]) -> Tensor:
    """対称正規化 D^-1/2 A D^-1/2 h W の後にELU"""
    index.require_self_loops()
    hw = matmul(h, weights["W"])
    norm = 1.0 / np.sqrt(index.degree[index.dst] * index.degree[index.src])
    messages = mul(gather_rows(hw, index.src), norm.astype(hw.dtype)[:, None])
    return elu(segment_sum(messages, index.dst, index.num_nodes))


def gin_layer(h: Tensor, index: GraphIndex, weights: Mapping[str, Tensor]) -> Tensor:
    """elu(linear(h_b + mean_{j∈N(b)} h_j))（ε = 0、平均は自己ループを含む）"""
    index.require_self_loops()
    total = segment_sum(gather_rows(h, index.src), index.dst, index.num_nodes)
    mean = mul(total, (1.0 / index.degree).astype(h.dtype)[:, None])
    return elu(linear(h + mean, weights["W"], weights["b"]))


def sage_layer(h: Tensor, index: GraphIndex, weights: Mapping[str, Tensor]) -> Tensor:
    """elu([h_b, max_j elu(W_pool h_j)] W)"""
    index.require_self_loops()
    pooled = elu(matmul(h, weights["W_pool"]))
    neighborhood = segment_max(gather_rows(pooled, index.src), index.dst, index.num_nodes)
    return elu(matmul(concat([h, neighborhood], axis=-1), weights["W"]))


LAYERS = {
    "gat": gat_layer,
    "gcn": gcn_layer,
    "gin": gin_layer,
    "sage": sage_layer,
}


def _apply_layer(kind: str, h: Tensor, index: GraphIndex, weights: Mapping[str, Tensor]) -> Tensor:
    out = LAYERS[kind](h, index, weights)
    if "W_skip" in weights:
        out = elu(matmul(h, weights["W_skip"]) + out)
    return out


def _as_tensor(value: Any) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(np.asarray(value, dtype=np.float32))


def _check_params(params: Mapping[str, Tensor], cfg: GnnConfig) -> None:
    for name, (shape, _) in gnn_param_shapes(cfg).items():
        if name not in params:
            raise ShapeError(f"gnn parameter missing: {name}")
        if params[name].shape != shape:
            raise ShapeError(f"gnn parameter {name} has shape {params[name].shape}, expected {shape}")


def gnn_apply(params: Mapping[str, Tensor], features: Any, encodings: Any,
              index: GraphIndex, cfg: GnnConfig) -> Tuple[Tensor, Tensor]:
    """
    GNNの順伝播

    Args:
        params: パラメーター
        features: (N, feature_dim) の枝特徴
        encodings: (N, num_anchors) の位置エンコーディング（pe_mode が none なら None 可）
        index: 辺インデックス
        cfg: 構成

    Returns:
        (hidden, logits): 最終層の特徴 (N, hidden_dims[-1]) と (N, num_classes)
    """
    h = _as_tensor(features)
    if h.ndim != 2 or h.shape[0] != index.num_nodes or h.shape[1] != cfg.feature_dim:
        raise ShapeError(f"features must be ({index.num_nodes}, {cfg.feature_dim}), got {h.shape}")
    p: Optional[Tensor] = None
    if cfg.uses_pe:
        if encodings is None:
            raise ShapeError(f"{cfg.arch} needs positional encodings")
        p = _as_tensor(encodings)
        if p.ndim != 2 or p.shape != (index.num_nodes, cfg.num_anchors):
            raise ShapeError(f"positional encodings must be ({index.num_nodes}, {cfg.num_anchors}), got {p.shape}")
    _check_params(params, cfg)

    kind = cfg.layer_kind
    stream = "hp" if cfg.arch == "spgnn" else "h"
    raw = p
    for l in range(cfg.layers):
        if cfg.pe_mode == "learnable":
            assert p is not None
            inputs = concat([h, p], axis=-1)
            if l < cfg.layers - 1:
                p = _apply_layer("gat", p, index, _weights(params, f"layers.{l}.p"))
        elif cfg.pe_mode == "nlpe":
            assert raw is not None
            inputs = concat([h, raw], axis=-1)
        else:
            inputs = h
        h = _apply_layer(kind, inputs, index, _weights(params, f"layers.{l}.{stream}"))

    logits = linear(h, params["head.weight"], params["head.bias"])
    return h, logits


def predict_probs(params: Mapping[str, Tensor], features: Any, encodings: Any,
                  graph: TreeGraph, cfg: GnnConfig) -> np.ndarray:
    """推論（N×22 のクラス確率）"""
    index = GraphIndex.from_graph(graph)
    with no_grad():
        _, logits = gnn_apply(params, features, encodings, index, cfg)
        probs = softmax(logits)
    return probs.data


def spgnn_forward(h0: Any, p0: Any, graph: TreeGraph, params: Mapping[str, Tensor],
                  cfg: Optional[GnnConfig] = None) -> np.ndarray:
    """
    SPGNNの順伝播

    Raises:
        ShapeError: 位置エンコーディングの幅が num_anchors でない場合など
    """
    cfg = cfg or GnnConfig(arch="spgnn")
    if cfg.arch != "spgnn":
        raise ConfigError(f"spgnn_forward needs an spgnn config, got {cfg.arch}")
    return predict_probs(params, h0, p0, graph, cfg)


def gats_forward(h0: Any, graph: TreeGraph, params: Mapping[str, Tensor],
                 cfg: Optional[GnnConfig] = None) -> np.ndarray:
    """GATS（位置エンコーディングなし、スキップ接続付きGAT）の順伝播"""
    cfg = cfg or GnnConfig(arch="gats")
    if cfg.arch != "gats":
        raise ConfigError(f"gats_forward needs a gats config, got {cfg.arch}")
    return predict_probs(params, h0, None, graph, cfg)


def hidden_features(params: Mapping[str, Tensor], features: Any, encodings: Any,
                    graph: TreeGraph, cfg: GnnConfig) -> np.ndarray:
    """最終層の枝特徴（特徴書き出し用）"""
    index = GraphIndex.from_graph(graph)
    with no_grad():
        hidden, _ = gnn_apply(params, features, encodings, index, cfg)
    logger.debug("GNN hidden features: %s", hidden.shape)
    return hidden.data


__all__ = [
    'ARCHITECTURES', 'PE_MODES', 'SKIP_OPTIONAL', 'LAYER_DIMS', 'GraphIndex', 'GnnConfig', 'parse_variant',
    'gnn_param_shapes', 'gat_attention', 'gat_layer', 'gcn_layer', 'gin_layer', 'sage_layer',
    'gnn_apply', 'predict_probs', 'spgnn_forward', 'gats_forward', 'hidden_features',
]
