"""
計算量モジュール

層の一覧から積和演算数（MACs）を、パラメーター辞書からパラメーター数を数えます。
"""
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Tuple

import numpy as np

from .cnn import CnnConfig
from .gnn import GnnConfig


@dataclass
class LayerSpec:
    """MACsを数えるための層の記述"""
    name: str
    kind: str
    component: str
    dims: Dict[str, int] = field(default_factory=dict)


def layer_macs(spec: LayerSpec) -> int:
    """
    1層の積和演算数

    Raises:
        ValueError: 未知の層の種類
    """
    d = spec.dims
    if spec.kind == "linear":
        return d["rows"] * d["d_in"] * d["d_out"]
    if spec.kind == "conv3d":
        return d["c_out"] * d["c_in"] * 27 * d["out_volume"] * d.get("batch", 1)
    if spec.kind == "maxpool3d":
        return 0
    if spec.kind == "gat":
        # W_g と W_a の射影、辺ごとの W_r スコア、注意で重み付けした和
        return (2 * d["nodes"] * d["d_in"] * d["d_out"]
                + d["edges"] * 2 * d["d_out"]
                + d["edges"] * d["d_out"])
    if spec.kind == "gcn":
        return d["nodes"] * d["d_in"] * d["d_out"] + d["edges"] * d["d_out"]
    if spec.kind == "gin":
        return d["edges"] * d["d_in"] + d["nodes"] * d["d_in"] * d["d_out"]
    if spec.kind == "sage":
        return d["nodes"] * d["d_in"] * d["d_in"] + d["nodes"] * 2 * d["d_in"] * d["d_out"]
    raise ValueError(f"unknown layer kind: {spec.kind}")


def count_macs(specs: List[LayerSpec]) -> int:
    return sum(layer_macs(spec) for spec in specs)


def macs_by_component(specs: List[LayerSpec]) -> Dict[str, int]:
    """コンポーネントごとのMACsと合計（"total"）"""
    totals: Dict[str, int] = {}
    for spec in specs:
        totals[spec.component] = totals.get(spec.component, 0) + layer_macs(spec)
    totals["total"] = sum(totals.values())
    return totals


def count_params(params: Mapping[str, Any]) -> int:
    """パラメーター数（テンソルでも numpy 配列でもよい）"""
    total = 0
    for value in params.values():
        shape = value.shape
        total += int(np.prod(shape, dtype=np.int64))
    return total


def _component_of(name: str) -> str:
    if name.startswith("head."):
        return "head"
    if name.startswith("layers."):
        return "gnn_p" if name.split(".")[2] == "p" else "gnn_h"
    return "cnn"


def params_by_component(shapes: Mapping[str, Tuple[Tuple[int, ...], int]]) -> Dict[str, int]:
    """
    パラメーター形状の辞書（*_param_shapes の出力）からコンポーネントごとの数と合計を求める

    重みを確保せずに数えられるので、既定の80³構成でもそのまま使える。
    """
    totals: Dict[str, int] = {}
    for name, (shape, _) in shapes.items():
        component = _component_of(name)
        totals[component] = totals.get(component, 0) + int(np.prod(shape, dtype=np.int64))
    totals["total"] = sum(totals.values())
    return totals


def cnn_layer_specs(cfg: CnnConfig, batch: int = 1) -> List[LayerSpec]:
    """1パッチ（batch 個）あたりのCNNの層一覧"""
    specs: List[LayerSpec] = []
    side = cfg.patch_side
    c_in = 1
    for block, channels in enumerate(cfg.channels, start=1):
        for conv in ("conv1", "conv2"):
            specs.append(LayerSpec(f"block{block}.{conv}", "conv3d", "cnn", {
                "c_in": c_in, "c_out": channels, "out_volume": side ** 3, "batch": batch}))
            c_in = channels
        side //= 2
        specs.append(LayerSpec(f"block{block}.pool", "maxpool3d", "cnn"))

    shrink = 2 if cfg.resolved_widen_padding == "valid" else 0
    for conv in ("conv1", "conv2"):
        side -= shrink
        specs.append(LayerSpec(f"widen.{conv}", "conv3d", "cnn", {
            "c_in": c_in, "c_out": cfg.widen_channels, "out_volume": side ** 3, "batch": batch}))
        c_in = cfg.widen_channels

    specs.append(LayerSpec("feature", "linear", "cnn", {
        "rows": batch, "d_in": cfg.flatten_dim, "d_out": cfg.feature_dim}))
    specs.append(LayerSpec("head", "linear", "head", {
        "rows": batch, "d_in": cfg.feature_dim, "d_out": cfg.num_classes}))
    return specs


def gnn_layer_specs(cfg: GnnConfig, num_nodes: int, num_edges: int) -> List[LayerSpec]:
    """
    1ツリーあたりのGNNの層一覧

    Args:
        num_nodes: 枝の数
        num_edges: 自己ループを含む有向辺の数
    """
    specs: List[LayerSpec] = []
    kind = cfg.layer_kind
    for l, (d_in, d_out) in enumerate(zip(cfg.input_dims(), cfg.hidden_dims)):
        dims = {"nodes": num_nodes, "edges": num_edges, "d_in": d_in, "d_out": d_out}
        specs.append(LayerSpec(f"layers.{l}.h", kind, "gnn_h", dims))
        if cfg.skip:
            specs.append(LayerSpec(f"layers.{l}.h.skip", "linear", "gnn_h",
                                   {"rows": num_nodes, "d_in": d_in, "d_out": d_out}))

    if cfg.pe_mode == "learnable":
        p_in = (cfg.num_anchors,) + cfg.pe_dims[:-1]
        for l, (d_in, d_out) in enumerate(zip(p_in, cfg.pe_dims)):
            dims = {"nodes": num_nodes, "edges": num_edges, "d_in": d_in, "d_out": d_out}
            specs.append(LayerSpec(f"layers.{l}.p", "gat", "gnn_p", dims))
            if cfg.skip:
                specs.append(LayerSpec(f"layers.{l}.p.skip", "linear", "gnn_p",
                                       {"rows": num_nodes, "d_in": d_in, "d_out": d_out}))

    specs.append(LayerSpec("head", "linear", "head", {
        "rows": num_nodes, "d_in": cfg.hidden_dims[-1], "d_out": cfg.num_classes}))
    return specs


__all__ = [
    'LayerSpec', 'layer_macs', 'count_macs', 'macs_by_component', 'count_params', 'params_by_component',
    'cnn_layer_specs', 'gnn_layer_specs',
]
