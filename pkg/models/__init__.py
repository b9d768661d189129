"""
モデルモジュールの初期化ファイル

ラベルボリューム、ツリーグラフ、チェックポイント、パッチキャッシュを提供します。
"""
from .anatomy import CLASS_NAMES, NUM_CLASSES, SEGMENTAL_CLASSES, NAMED_CLASSES, NUM_ANCHORS
from .tree_graph import (
    TreeGraph, AnchorSet, UNREACHABLE,
    bfs_shortest_paths, hop_matrix, hop_distance, graph_diameter,
    find_leaves, select_anchors, compute_positional_encodings,
)
from .label_map import (
    VoxelLabelMap, BranchPatch, read_label_map, write_label_map,
    resample_nearest, branch_center, branch_centers, build_branch_graph, extract_patch,
)
from .checkpoint import Checkpoint, save_checkpoint, load_checkpoint
from .patch_cache import PatchCache

__all__ = [
    'CLASS_NAMES', 'NUM_CLASSES', 'SEGMENTAL_CLASSES', 'NAMED_CLASSES', 'NUM_ANCHORS',
    'TreeGraph', 'AnchorSet', 'UNREACHABLE',
    'bfs_shortest_paths', 'hop_matrix', 'hop_distance', 'graph_diameter',
    'find_leaves', 'select_anchors', 'compute_positional_encodings',
    'VoxelLabelMap', 'BranchPatch', 'read_label_map', 'write_label_map',
    'resample_nearest', 'branch_center', 'branch_centers', 'build_branch_graph', 'extract_patch',
    'Checkpoint', 'save_checkpoint', 'load_checkpoint',
    'PatchCache',
]
