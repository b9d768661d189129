"""
レポートビューモジュール

評価結果や学習ログ、割り当て結果をファイルとテキストに書き出すクラスを提供します。
書き出す内容は入力とシードだけで決まるようにし、時間の計測値は timing.json に分けます。
"""
import csv
import json
import os
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence

from utils import logger
from models.anatomy import SEGMENTAL_CLASSES, class_name
from controllers.metrics import DatasetMetrics, KappaResult
from controllers.trainer import EpochRecord

METRICS_NAME = "metrics.json"
TIMING_NAME = "timing.json"
TABLE_NAME = "per_class.txt"


def _percent(value: Optional[float]) -> str:
    return "-" if value is None else f"{100.0 * value:6.2f}"


def _number(value: Optional[float]) -> str:
    return "-" if value is None else f"{value:6.2f}"


def write_json(document: Any, path: str) -> str:
    """キーを並べ替えたJSONを書き出す（同じ内容なら同じバイト列になる）"""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(document, f, indent=2, sort_keys=True)
        f.write("\n")
    logger.info(f"保存しました: {path}")
    return path


def format_class_table(results: Mapping[str, DatasetMetrics],
                       classes: Sequence[int] = SEGMENTAL_CLASSES) -> str:
    """
    クラスごとの ACC(%) と TD のテキスト表

    列はモデル構成ごとに "ACC TD" の2列。最後の行は全体の平均 ± 標準偏差。
    """
    names = list(results)
    header = f"{'class':<8}" + "".join(f" | {name:^15}" for name in names)
    sub = f"{'':<8}" + "".join(f" | {'ACC':>6}  {'TD':>6} " for _ in names)
    lines = [header, sub, "-" * len(header)]
    for c in classes:
        cells = []
        for name in names:
            metrics = results[name].per_class.get(c)
            if metrics is None:
                cells.append(f" | {'-':>6}  {'-':>6} ")
            else:
                cells.append(f" | {_percent(metrics.acc)}  {_number(metrics.td_mean)} ")
        lines.append(f"{class_name(c):<8}" + "".join(cells))
    lines.append("-" * len(header))

    overall = []
    for name in names:
        acc = results[name].overall_acc
        td = results[name].overall_td
        overall.append(f" | {_percent(acc['mean'])}  {_number(td['mean'])} ")
    lines.append(f"{'overall':<8}" + "".join(overall))
    spread = []
    for name in names:
        acc = results[name].overall_acc
        td = results[name].overall_td
        spread.append(f" | {_percent(acc['std'])}  {_number(td['std'])} ")
    lines.append(f"{'std':<8}" + "".join(spread))
    return "\n".join(lines) + "\n"


def read_training_log(path: str) -> List[EpochRecord]:
    with open(path, "r", encoding="utf-8", newline="") as f:
        return [EpochRecord(epoch=int(row["epoch"]), loss=float(row["loss"]), acc=float(row["acc"]))
                for row in csv.DictReader(f)]


class ReportView:
    """
    1回の実行の出力ディレクトリに成果物を書き出すクラス

    Attributes:
        out_dir: 出力ディレクトリ
    """

    def __init__(self, out_dir: str):
        self.out_dir = out_dir
        os.makedirs(out_dir, exist_ok=True)

    def path(self, name: str) -> str:
        return os.path.join(self.out_dir, name)

    def save_metrics(self, results: Mapping[str, DatasetMetrics],
                     complexity: Optional[Mapping[str, Mapping[str, Any]]] = None,
                     folds: Optional[Sequence[Mapping[str, Sequence[str]]]] = None) -> str:
        """
        評価結果のJSONを書き出す

        Args:
            results: 構成名 → データセット評価
            complexity: 構成名 → {"macs": {...}, "params": {...}}
            folds: 分割ごとの {"train": [...], "test": [...]}
        """
        document: Dict[str, Any] = {"models": {}}
        for name, metrics in results.items():
            entry = metrics.to_dict()
            if complexity and name in complexity:
                entry.update(complexity[name])
            document["models"][name] = entry
        if folds is not None:
            document["folds"] = [{"fold": i, "train": list(f["train"]), "test": list(f["test"])}
                                 for i, f in enumerate(folds, start=1)]
        return write_json(document, self.path(METRICS_NAME))

    def save_timing(self, timing: Mapping[str, Mapping[str, float]]) -> str:
        """ツリーごとのラベル付け時間の集計（実行ごとに変わる値なので評価JSONとは別）"""
        for name, values in timing.items():
            logger.info(f"{name}: {values['mean']:.3f} ± {values['std']:.3f} s per tree")
        return write_json(dict(timing), self.path(TIMING_NAME))

    def save_class_table(self, results: Mapping[str, DatasetMetrics]) -> str:
        table = format_class_table(results)
        path = self.path(TABLE_NAME)
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(table)
        logger.info(f"保存しました: {path}")
        return path

    def save_training_log(self, history: Iterable[EpochRecord], name: str = "training_log.csv") -> str:
        """学習ログCSV（epoch,loss,acc）"""
        path = self.path(name)
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["epoch", "loss", "acc"])
            for record in history:
                writer.writerow([record.epoch, format(record.loss, ".9g"), format(record.acc, ".9g")])
        logger.info(f"保存しました: {path}")
        return path

    def save_prediction(self, prediction: Mapping[str, Any], name: Optional[str] = None) -> str:
        """割り当て結果のJSON（LabelPrediction.to_json_dict の出力）"""
        name = name or f"{prediction['tree_id'] or 'tree'}.labels.json"
        return write_json(dict(prediction), self.path(name))

    def save_kappa(self, result: KappaResult) -> str:
        logger.info(f"kappa {result.kappa:.4f} ({result.ci_low:.4f}, {result.ci_high:.4f}) "
                    f"{result.to_dict()['level']}")
        return write_json(result.to_dict(), self.path("kappa.json"))

    def save_complexity(self, complexity: Mapping[str, Mapping[str, Any]]) -> str:
        for name, values in complexity.items():
            macs = values["macs"]["total"]
            params = values["params"]["total"]
            logger.info(f"{name}: {macs / 1e9:.3f} GMACs, {params / 1e6:.3f} M params")
        return write_json(dict(complexity), self.path("macs.json"))


__all__ = ['METRICS_NAME', 'TIMING_NAME', 'write_json', 'format_class_table', 'read_training_log', 'ReportView']
