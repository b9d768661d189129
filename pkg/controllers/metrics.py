"""
評価指標モジュール

- 区域枝ごとの正解率（ACC）: 正しく予測された木の数 / そのクラスを参照に持つ木の数
- 位相距離（TD）: 誤ラベルの枝と正解枝の間のホップ数（正解と未予測は除外）
- 線形重み付きカッパと95%信頼区間（Fleiss–Cohen–Everitt の大標本分散）
"""
import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from utils import GraphError
from models.anatomy import SEGMENTAL_CLASSES, class_name
from models.tree_graph import TreeGraph, UNREACHABLE, bfs_shortest_paths

# クラスインデックス → ノードID
NodeAssignment = Mapping[int, int]

KAPPA_Z = 1.96


@dataclass
class ClassMetrics:
    """1クラス分の集計"""
    n_ref: int = 0
    n_correct: int = 0
    n_unpredicted: int = 0
    td_samples: List[int] = field(default_factory=list)

    @property
    def acc(self) -> Optional[float]:
        return None if self.n_ref == 0 else self.n_correct / self.n_ref

    @property
    def n_td(self) -> int:
        return len(self.td_samples)

    @property
    def td_mean(self) -> Optional[float]:
        return float(np.mean(self.td_samples)) if self.td_samples else None

    @property
    def td_std(self) -> Optional[float]:
        return float(np.std(self.td_samples)) if self.td_samples else None

    def to_dict(self) -> Dict[str, object]:
        return {
            "acc": self.acc,
            "td_mean": self.td_mean,
            "td_std": self.td_std,
            "n_td": self.n_td,
            "n_ref": self.n_ref,
            "n_unpredicted": self.n_unpredicted,
        }


@dataclass
class DatasetMetrics:
    """
    データセット全体の評価結果

    overall の ACC と TD はクラスごとの値の平均と標準偏差（値の無いクラスは除く）。
    """
    per_class: Dict[int, ClassMetrics]

    def _summary(self, values: List[float]) -> Dict[str, Optional[float]]:
        if not values:
            return {"mean": None, "std": None}
        return {"mean": float(np.mean(values)), "std": float(np.std(values))}

    @property
    def overall_acc(self) -> Dict[str, Optional[float]]:
        return self._summary([m.acc for m in self.per_class.values() if m.acc is not None])

    @property
    def overall_td(self) -> Dict[str, Optional[float]]:
        return self._summary([m.td_mean for m in self.per_class.values() if m.td_mean is not None])

    def to_dict(self) -> Dict[str, object]:
        acc = self.overall_acc
        td = self.overall_td
        return {
            "per_class": {class_name(c): m.to_dict() for c, m in self.per_class.items()},
            "overall": {
                "acc": acc["mean"], "acc_std": acc["std"],
                "td": td["mean"], "td_std": td["std"],
                "n_unpredicted": sum(m.n_unpredicted for m in self.per_class.values()),
            },
        }


def _check_dataset(assignments: Sequence[NodeAssignment], references: Sequence[NodeAssignment]) -> None:
    if not references:
        raise ValueError("metrics need at least one tree")
    if len(assignments) != len(references):
        raise ValueError(f"{len(assignments)} assignments for {len(references)} references")


def accuracy_per_class(assignments: Sequence[NodeAssignment], references: Sequence[NodeAssignment],
                       classes: Sequence[int] = SEGMENTAL_CLASSES) -> DatasetMetrics:
    """
    クラスごとの正解率

    参照に無いクラスはその木の分母から除く。参照にあって予測が無い場合は不正解として数え、
    n_unpredicted にも記録する。

    Raises:
        ValueError: データセットが空、または件数が一致しない場合
    """
    _check_dataset(assignments, references)
    per_class = {c: ClassMetrics() for c in classes}
    for assignment, reference in zip(assignments, references):
        for c in classes:
            if c not in reference:
                continue
            metrics = per_class[c]
            metrics.n_ref += 1
            predicted = assignment.get(c)
            if predicted is None:
                metrics.n_unpredicted += 1
            elif predicted == reference[c]:
                metrics.n_correct += 1
    return DatasetMetrics(per_class=per_class)


def tree_topological_distances(assignment: NodeAssignment, reference: NodeAssignment, g: TreeGraph,
                               classes: Sequence[int] = SEGMENTAL_CLASSES) -> Dict[int, int]:
    """
    1本の木の誤ラベルごとの位相距離（クラス → ホップ数）

    Raises:
        GraphError: ノードがグラフに無い、またはグラフが非連結の場合
    """
    distances: Dict[int, int] = {}
    for c in classes:
        if c not in reference or c not in assignment:
            continue
        predicted, target = assignment[c], reference[c]
        if predicted not in g:
            raise GraphError(f"predicted node {predicted} for {class_name(c)} is not in the graph")
        if target not in g:
            raise GraphError(f"reference node {target} for {class_name(c)} is not in the graph")
        if predicted == target:
            continue
        hops = bfs_shortest_paths(g, target)[predicted]
        if hops == UNREACHABLE:
            raise GraphError(f"nodes {predicted} and {target} are not connected")
        distances[c] = hops
    return distances


def topological_distance(assignments: Sequence[NodeAssignment], references: Sequence[NodeAssignment],
                         graphs: Sequence[TreeGraph],
                         metrics: Optional[DatasetMetrics] = None) -> DatasetMetrics:
    """
    データセット全体の位相距離を集計する

    metrics を渡すとその per_class に TD のサンプルを追加する（ACC と同じ結果にまとめる用）。
    """
    _check_dataset(assignments, references)
    if len(graphs) != len(references):
        raise ValueError(f"{len(graphs)} graphs for {len(references)} references")
    if metrics is None:
        metrics = DatasetMetrics(per_class={c: ClassMetrics() for c in SEGMENTAL_CLASSES})
    for assignment, reference, g in zip(assignments, references, graphs):
        for c, hops in tree_topological_distances(assignment, reference, g, list(metrics.per_class)).items():
            metrics.per_class[c].td_samples.append(hops)
    return metrics


def evaluate_dataset(assignments: Sequence[NodeAssignment], references: Sequence[NodeAssignment],
                     graphs: Sequence[TreeGraph]) -> DatasetMetrics:
    """ACC と TD をまとめて計算する"""
    metrics = accuracy_per_class(assignments, references)
    return topological_distance(assignments, references, graphs, metrics)


@dataclass
class KappaResult:
    kappa: float
    ci_low: float
    ci_high: float
    se: float
    n: int

    def to_dict(self) -> Dict[str, float]:
        return {"kappa": self.kappa, "ci_low": self.ci_low, "ci_high": self.ci_high,
                "se": self.se, "n": self.n, "level": kappa_agreement_level(self.kappa)}


def weighted_kappa_linear(ratings_a: Sequence, ratings_b: Sequence, categories: Sequence) -> KappaResult:
    """
    線形重み付きカッパ

    一致重み w_ij = 1 − |i−j|/(k−1)。信頼区間は kappa ± 1.96·SE。
    両評価者の不一致の和がともに0のとき kappa = 1。

    Args:
        ratings_a: 評価者Aのカテゴリ列
        ratings_b: 評価者Bのカテゴリ列
        categories: カテゴリの順序

    Raises:
        ValueError: 長さが異なる、2未満、または未知のカテゴリを含む場合
    """
    if len(ratings_a) != len(ratings_b):
        raise ValueError(f"rating sequences differ in length: {len(ratings_a)} vs {len(ratings_b)}")
    n = len(ratings_a)
    if n < 2:
        raise ValueError("kappa needs at least 2 paired ratings")
    order = {category: index for index, category in enumerate(categories)}
    k = len(order)
    if k < 2:
        raise ValueError("kappa needs at least 2 categories")

    observed = np.zeros((k, k), dtype=np.float64)
    for a, b in zip(ratings_a, ratings_b):
        if a not in order or b not in order:
            raise ValueError(f"unknown category in pair ({a!r}, {b!r})")
        observed[order[a], order[b]] += 1.0

    p = observed / n
    row = p.sum(axis=1)
    col = p.sum(axis=0)
    idx = np.arange(k)
    weights = 1.0 - np.abs(idx[:, None] - idx[None, :]) / (k - 1)

    p_o = float((weights * p).sum())
    p_e = float((weights * np.outer(row, col)).sum())
    if math.isclose(1.0 - p_o, 0.0, abs_tol=1e-15) and math.isclose(1.0 - p_e, 0.0, abs_tol=1e-15):
        return KappaResult(kappa=1.0, ci_low=1.0, ci_high=1.0, se=0.0, n=n)
    kappa = (p_o - p_e) / (1.0 - p_e)

    w_row = weights @ col   # 行カテゴリごとの重みの平均
    w_col = row @ weights   # 列カテゴリごとの重みの平均
    term = weights * (1.0 - p_e) - (w_row[:, None] + w_col[None, :]) * (1.0 - p_o)
    variance = ((p * term ** 2).sum() - (p_o * p_e - 2.0 * p_e + p_o) ** 2) / (n * (1.0 - p_e) ** 4)
    se = math.sqrt(max(float(variance), 0.0))
    return KappaResult(kappa=kappa, ci_low=kappa - KAPPA_Z * se, ci_high=kappa + KAPPA_Z * se, se=se, n=n)


def kappa_agreement_level(kappa: float) -> str:
    """カッパ値を一致の程度に変換する"""
    if kappa <= 0.20:
        return "slight"
    if kappa <= 0.40:
        return "fair"
    if kappa <= 0.60:
        return "moderate"
    if kappa <= 0.80:
        return "good"
    return "excellent"


__all__ = [
    'ClassMetrics', 'DatasetMetrics', 'KappaResult',
    'accuracy_per_class', 'tree_topological_distances', 'topological_distance',
    'evaluate_dataset', 'weighted_kappa_linear', 'kappa_agreement_level',
]
