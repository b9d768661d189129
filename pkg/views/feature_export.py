"""
特徴書き出しモジュール

枝特徴を CSV（branch_id,label,f0000,...）に書き出します。
可視化の前処理として主成分分析で次元を下げることもできます。
"""
import csv
import os
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from utils import logger, ShapeError
from models.anatomy import class_name

Label = Union[int, str, None]


def _label_text(label: Label) -> str:
    if label is None:
        return ""
    if isinstance(label, (int, np.integer)):
        return class_name(int(label)) or ""
    return str(label)


def export_features_csv(features: np.ndarray, labels: Sequence[Label], path: str,
                        branch_ids: Optional[Sequence[int]] = None) -> str:
    """
    特徴行列をCSVに書き出す

    値は float32 として 9桁で書くので、読み戻すと32ビット精度で一致する。

    Args:
        features: N×D の特徴行列
        labels: 行ごとのクラス（インデックス、名前、または None）
        path: 出力先
        branch_ids: 行ごとの枝ID（省略時は 1..N）

    Raises:
        ShapeError: 行数が一致しない場合
    """
    features = np.asarray(features, dtype=np.float32)
    if features.ndim != 2:
        raise ShapeError(f"feature matrix must be 2-D, got shape {features.shape}")
    rows = features.shape[0]
    if branch_ids is None:
        branch_ids = list(range(1, rows + 1))
    if len(labels) != rows or len(branch_ids) != rows:
        raise ShapeError(f"{rows} feature rows, {len(labels)} labels, {len(branch_ids)} branch ids")

    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["branch_id", "label"] + [f"f{i:04d}" for i in range(features.shape[1])])
        for branch, label, row in zip(branch_ids, labels, features):
            writer.writerow([int(branch), _label_text(label)] + [format(float(v), ".9g") for v in row])
    logger.info(f"特徴を書き出しました: {path} ({rows}x{features.shape[1]})")
    return path


def read_features_csv(path: str) -> Tuple[List[int], List[str], np.ndarray]:
    """export_features_csv の出力を読み込む（枝ID、ラベル、float32 の特徴）"""
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        dim = len(header) - 2
        ids: List[int] = []
        labels: List[str] = []
        values: List[List[float]] = []
        for row in reader:
            ids.append(int(row[0]))
            labels.append(row[1])
            values.append([float(v) for v in row[2:]])
    matrix = np.asarray(values, dtype=np.float32).reshape(len(values), dim)
    return ids, labels, matrix


def pca_reduce(features: np.ndarray, components: int) -> np.ndarray:
    """
    主成分分析による次元削減

    中心化した行列の特異値分解を使う。各主成分は絶対値が最大の係数が正になるよう符号をそろえる。

    Raises:
        ValueError: 成分数が 1 未満、または min(N, D) を超える場合
    """
    data = np.asarray(features, dtype=np.float64)
    if data.ndim != 2:
        raise ShapeError(f"feature matrix must be 2-D, got shape {data.shape}")
    limit = min(data.shape)
    if not 1 <= components <= limit:
        raise ValueError(f"pca components must be in 1..{limit}, got {components}")
    centered = data - data.mean(axis=0, keepdims=True)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    basis = vt[:components]
    signs = np.sign(basis[np.arange(components), np.argmax(np.abs(basis), axis=1)])
    signs[signs == 0] = 1.0
    basis = basis * signs[:, None]
    return (centered @ basis.T).astype(np.float32)


__all__ = ['export_features_csv', 'read_features_csv', 'pca_reduce']
