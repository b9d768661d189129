"""
ネットワークモジュールの初期化ファイル

自動微分テンソル、枝パッチCNN、GNN、計算量の計数を提供します。
"""
from .tensor import Tensor, no_grad, parameter
from .cnn import CnnConfig, cnn_param_shapes, cnn_apply, cnn_forward, extract_features
from .gnn import (
    ARCHITECTURES, GraphIndex, GnnConfig, gnn_param_shapes, gnn_apply,
    gat_layer, gcn_layer, gin_layer, sage_layer, spgnn_forward, gats_forward,
)
from .complexity import count_macs, count_params, macs_by_component, cnn_layer_specs, gnn_layer_specs

__all__ = [
    'Tensor', 'no_grad', 'parameter',
    'CnnConfig', 'cnn_param_shapes', 'cnn_apply', 'cnn_forward', 'extract_features',
    'ARCHITECTURES', 'GraphIndex', 'GnnConfig', 'gnn_param_shapes', 'gnn_apply',
    'gat_layer', 'gcn_layer', 'gin_layer', 'sage_layer', 'spgnn_forward', 'gats_forward',
    'count_macs', 'count_params', 'macs_by_component', 'cnn_layer_specs', 'gnn_layer_specs',
]
