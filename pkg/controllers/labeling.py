"""
ラベル割り当てモジュール

クラス確率行列 C（N×22）から、解剖学的クラス → 枝の割り当てを作ります。

- assign_labels_basic: 区域枝18列それぞれの最尤枝。衝突した枝は最も確率の高い列だけを残す
- assign_labels_leave_one_out: 名前付き21列の大域貪欲マッチング。割り当て済みの行は候補から外す
"""
from typing import Dict, List, Optional, Sequence

import numpy as np

from utils import logger, ShapeError
from models.anatomy import NAMED_CLASSES, NUM_CLASSES, SEGMENTAL_CLASSES

# クラスインデックス → 行インデックス（ノードIDへの変換は呼び出し側）
LabelAssignment = Dict[int, int]

ROW_SUM_TOLERANCE = 1e-6


def validate_prob_matrix(probs: np.ndarray, num_classes: int = NUM_CLASSES) -> np.ndarray:
    """
    クラス確率行列を検証して float64 で返す

    Raises:
        ShapeError: 形が N×num_classes でない、値が [0,1] 外、行和が1でない場合
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[1] != num_classes:
        raise ShapeError(f"class probability matrix must be N x {num_classes}, got {probs.shape}")
    if probs.size and (not np.isfinite(probs).all() or probs.min() < 0.0 or probs.max() > 1.0):
        raise ShapeError("class probabilities must lie in [0, 1]")
    if probs.size and np.abs(probs.sum(axis=1) - 1.0).max() > ROW_SUM_TOLERANCE:
        raise ShapeError("class probability rows must sum to 1")
    return probs


def _score_matrix(probs: np.ndarray, columns: Optional[Sequence[int]]) -> np.ndarray:
    # 既定の列を使うときは確率行列として検証し、列を指定したときは任意のスコア行列を受け付ける
    if columns is None:
        return validate_prob_matrix(probs)
    scores = np.asarray(probs, dtype=np.float64)
    if scores.ndim != 2:
        raise ShapeError(f"score matrix must be 2-D, got shape {scores.shape}")
    if any(not 0 <= c < scores.shape[1] for c in columns):
        raise ShapeError(f"columns {list(columns)} out of range for {scores.shape[1]} classes")
    if len(set(columns)) != len(columns):
        raise ShapeError("columns must be distinct")
    return scores


def assign_labels_basic(probs: np.ndarray,
                        columns: Optional[Sequence[int]] = None) -> LabelAssignment:
    """
    列ごとの最尤枝による割り当て

    同じ枝が複数の列で最大になった場合、その枝は確率が最も高い列だけを取り、
    残りの列は未割り当てになる（割り当て数は列数より少なくなりうる）。
    同確率の列は小さいクラスインデックスを優先する。

    Returns:
        dict: クラスインデックス → 行インデックス
    """
    probs = _score_matrix(probs, columns)
    columns = list(SEGMENTAL_CLASSES if columns is None else columns)
    if probs.shape[0] == 0:
        return {}

    # np.argmax は最初の最大値を返す → 同確率は小さい行
    candidates = {c: int(np.argmax(probs[:, c])) for c in columns}
    best_column: Dict[int, int] = {}
    for c in columns:
        row = candidates[c]
        current = best_column.get(row)
        if current is None or probs[row, c] > probs[row, current]:
            best_column[row] = c

    assignment = {c: row for row, c in best_column.items()}
    dropped = len(columns) - len(assignment)
    if dropped:
        logger.debug(f"basic assignment: {dropped} classes left unassigned by conflicts")
    return dict(sorted(assignment.items()))


def assign_labels_leave_one_out(probs: np.ndarray,
                                columns: Optional[Sequence[int]] = None) -> LabelAssignment:
    """
    leave-one-out 方式の割り当て（大域貪欲）

    残っている (行, 列) の組から確率が最大のものを選んで割り当て、その行と列を外す。
    同確率は (小さい列, 小さい行) を優先する。

    Args:
        probs: クラス確率行列（N×22）
        columns: 割り当てる列（省略時は名前付き21クラス）

    Raises:
        ShapeError: 行数が列数より少ない場合
    """
    probs = _score_matrix(probs, columns)
    columns = list(NAMED_CLASSES if columns is None else columns)
    n_rows = probs.shape[0]
    if n_rows < len(columns):
        raise ShapeError(f"leave-one-out assignment needs at least {len(columns)} branches, got {n_rows}")

    # (-p, 列, 行) の昇順 = 貪欲の選択順
    sub = probs[:, columns]
    rows, cols = np.meshgrid(np.arange(n_rows), np.arange(len(columns)), indexing="ij")
    order = np.lexsort((rows.ravel(), cols.ravel(), -sub.ravel()))

    assignment: LabelAssignment = {}
    used_rows = set()
    for flat in order:
        row, col = divmod(int(flat), len(columns))
        c = columns[col]
        if c in assignment or row in used_rows:
            continue
        assignment[c] = row
        used_rows.add(row)
        if len(assignment) == len(columns):
            break
    return dict(sorted(assignment.items()))


def assignment_to_nodes(assignment: LabelAssignment, node_ids: Sequence[int]) -> Dict[int, int]:
    """行インデックスの割り当てをノードIDに変換する"""
    return {c: int(node_ids[row]) for c, row in assignment.items()}


def is_injective(assignment: Dict[int, int]) -> bool:
    values: List[int] = list(assignment.values())
    return len(values) == len(set(values))


__all__ = [
    'LabelAssignment', 'validate_prob_matrix', 'assign_labels_basic',
    'assign_labels_leave_one_out', 'assignment_to_nodes', 'is_injective',
]
