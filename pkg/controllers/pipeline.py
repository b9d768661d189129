"""
パイプラインモジュール

各段階はディスク上の形式（MHD、グラフJSON、チェックポイント、CSV）だけでつながります。

- コーパス: manifest.json と、ツリーごとの .mhd/.raw とグラフJSON
- 特徴ディレクトリ: <tree_id>.features.csv、<tree_id>.probs.csv、features.json
- 推論: CNN → leave-one-out 割り当て → アンカー → 位置エンコーディング → GNN → 割り当て
- 評価: k分割交差検証（分割ごとにCNNを学習し、同じ特徴で各GNNを学習）
"""
import json
import os
import time
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from utils import logger, CorpusError, CheckpointError, GraphError
from models.anatomy import CLASS_NAMES, NUM_CLASSES, OTHER, SEGMENTAL_CLASSES, class_index, class_name
from models.checkpoint import Checkpoint
from models.label_map import VoxelLabelMap, build_branch_graph, read_label_map, resample_nearest, write_label_map
from models.patch_cache import PatchCache
from models.tree_graph import TreeGraph, compute_positional_encodings, select_anchors
from networks.cnn import CnnConfig, extract_features
from networks.gnn import GnnConfig, predict_probs
from .batch_processor import BatchProcessor
from .labeling import assign_labels_basic, assign_labels_leave_one_out, assignment_to_nodes
from .metrics import DatasetMetrics, evaluate_dataset
from .synthetic_generator import SyntheticTreeSpec, generate_tree, rasterize_tree
from .trainer import (
    CnnSample, GnnSample, TrainConfig, TrainingRun, kfold_split, params_from_tensors,
    train_cnn, train_gnn,
)

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1
FEATURES_INDEX = "features.json"


# --- コーパス -----------------------------------------------------------------

@dataclass
class CorpusEntry:
    """
    コーパスの1ツリー

    mhd と graph はマニフェストのディレクトリからの相対パス。
    labels は クラス名 → 枝ID の参照ラベル。
    """
    tree_id: str
    seed: Optional[int]
    mhd: str
    graph: str
    labels: Dict[str, int] = field(default_factory=dict)

    def reference(self) -> Dict[int, int]:
        """クラスインデックス → 枝ID"""
        return {class_index(name): node for name, node in self.labels.items()}  # type: ignore[misc]

    def to_dict(self) -> Dict[str, Any]:
        return {"tree_id": self.tree_id, "seed": self.seed, "mhd": self.mhd, "graph": self.graph,
                "labels": dict(self.labels)}


@dataclass
class Corpus:
    root: str
    entries: List[CorpusEntry]

    def path(self, relative: str) -> str:
        return os.path.join(self.root, relative)

    def load_label_map(self, entry: CorpusEntry) -> VoxelLabelMap:
        return read_label_map(self.path(entry.mhd))

    def load_graph(self, entry: CorpusEntry) -> TreeGraph:
        return TreeGraph.load_json(self.path(entry.graph))

    def subset(self, indices: Sequence[int]) -> List[CorpusEntry]:
        return [self.entries[int(i)] for i in indices]

    def __len__(self) -> int:
        return len(self.entries)


def write_manifest(corpus: Corpus) -> str:
    path = os.path.join(corpus.root, MANIFEST_NAME)
    os.makedirs(corpus.root, exist_ok=True)
    document = {"version": MANIFEST_VERSION, "trees": [entry.to_dict() for entry in corpus.entries]}
    with open(path, "w", encoding="utf-8") as f:
        json.dump(document, f, indent=2)
        f.write("\n")
    logger.info(f"マニフェストを保存: {path} ({len(corpus.entries)} trees)")
    return path


def read_manifest(path: str) -> Corpus:
    """
    マニフェストを読み込む（ディレクトリを渡した場合はその中の manifest.json）

    Raises:
        CorpusError: ファイルが無い、JSONが不正、必須キーが無い場合
    """
    if os.path.isdir(path):
        path = os.path.join(path, MANIFEST_NAME)
    if not os.path.exists(path):
        raise CorpusError(f"corpus manifest not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        try:
            document = json.load(f)
        except json.JSONDecodeError as e:
            raise CorpusError(f"invalid corpus manifest {path}: {e}") from e
    if document.get("version") != MANIFEST_VERSION:
        raise CorpusError(f"unsupported manifest version: {document.get('version')}")
    try:
        entries = [CorpusEntry(tree_id=str(t["tree_id"]), seed=t.get("seed"), mhd=t["mhd"], graph=t["graph"],
                               labels={str(k): int(v) for k, v in t.get("labels", {}).items()})
                   for t in document["trees"]]
    except (KeyError, TypeError, ValueError) as e:
        raise CorpusError(f"malformed tree entry in {path}: {e}") from e
    return Corpus(root=os.path.dirname(os.path.abspath(path)), entries=entries)


def generate_corpus(out_dir: str, seed: int, count: int,
                    processor: Optional[BatchProcessor] = None, **spec_overrides: Any) -> Corpus:
    """
    seed, seed+1, ... の合成ツリーを count 本生成してコーパスにする

    ボリュームから構築したグラフに生成時の正解ラベルを付けて保存する。
    """
    if count < 1:
        raise CorpusError(f"count must be positive, got {count}")
    os.makedirs(out_dir, exist_ok=True)

    def make(tree_seed: int) -> CorpusEntry:
        spec = SyntheticTreeSpec.from_settings(tree_seed, **spec_overrides)
        tree = generate_tree(spec)
        label_map = rasterize_tree(tree)
        tree_id = f"tree_{tree_seed:05d}"
        write_label_map(label_map, os.path.join(out_dir, f"{tree_id}.mhd"))
        graph = build_branch_graph(label_map)
        graph.labels = {node: tree.labels[node] for node in graph.node_ids}
        graph.save_json(os.path.join(out_dir, f"{tree_id}.graph.json"))
        return CorpusEntry(tree_id=tree_id, seed=tree_seed, mhd=f"{tree_id}.mhd", graph=f"{tree_id}.graph.json",
                           labels={class_name(c): n for c, n in sorted(graph.reference_map().items())})  # type: ignore[misc]

    processor = processor or BatchProcessor()
    entries = processor.map(make, [seed + i for i in range(count)], label="synth")
    corpus = Corpus(root=os.path.abspath(out_dir), entries=entries)
    write_manifest(corpus)
    return corpus


def volume_to_graph(path: str, target_spacing: Optional[Sequence[float]] = None) -> Tuple[VoxelLabelMap, TreeGraph]:
    """ラベルボリュームを読み込み（必要なら再サンプリングして）枝グラフを作る"""
    label_map = read_label_map(path)
    if target_spacing is not None:
        label_map = resample_nearest(label_map, target_spacing)
    return label_map, build_branch_graph(label_map)


# --- 特徴 ---------------------------------------------------------------------

@dataclass
class TreeFeatures:
    """ツリー1本分のCNN出力（行はグラフのノード順）"""
    node_ids: List[int]
    features: np.ndarray
    probs: np.ndarray
    seconds: float = 0.0


def _write_matrix(path: str, node_ids: Sequence[int], header: Sequence[str], values: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(",".join(["branch_id", *header]) + "\n")
        for node, row in zip(node_ids, values):
            f.write(",".join([str(int(node))] + [format(float(v), ".9g") for v in row]) + "\n")


def _read_matrix(path: str) -> Tuple[List[int], np.ndarray]:
    if not os.path.exists(path):
        raise CorpusError(f"feature file not found: {path}")
    table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2, dtype=np.float64)
    return [int(v) for v in table[:, 0]], table[:, 1:].astype(np.float32)


def save_tree_features(directory: str, tree_id: str, tree_features: TreeFeatures) -> None:
    os.makedirs(directory, exist_ok=True)
    dim = tree_features.features.shape[1]
    _write_matrix(os.path.join(directory, f"{tree_id}.features.csv"), tree_features.node_ids,
                  [f"f{i:04d}" for i in range(dim)], tree_features.features)
    _write_matrix(os.path.join(directory, f"{tree_id}.probs.csv"), tree_features.node_ids,
                  CLASS_NAMES, tree_features.probs)


def load_tree_features(directory: str, tree_id: str) -> TreeFeatures:
    """
    Raises:
        CorpusError: ファイルが無い、または特徴と確率の枝が一致しない場合
    """
    node_ids, features = _read_matrix(os.path.join(directory, f"{tree_id}.features.csv"))
    prob_ids, probs = _read_matrix(os.path.join(directory, f"{tree_id}.probs.csv"))
    if node_ids != prob_ids or probs.shape[1] != NUM_CLASSES:
        raise CorpusError(f"feature and probability files of {tree_id} do not match")
    return TreeFeatures(node_ids=node_ids, features=features, probs=probs)


def save_feature_store(directory: str, store: Mapping[str, TreeFeatures], source: str = "") -> str:
    for tree_id, tree_features in store.items():
        save_tree_features(directory, tree_id, tree_features)
    index_path = os.path.join(directory, FEATURES_INDEX)
    dims = {t.features.shape[1] for t in store.values()}
    with open(index_path, "w", encoding="utf-8") as f:
        json.dump({"version": 1, "source": source, "feature_dim": dims.pop() if len(dims) == 1 else None,
                   "trees": list(store)}, f, indent=2)
        f.write("\n")
    logger.info(f"特徴を保存: {directory} ({len(store)} trees)")
    return index_path


def load_feature_store(directory: str) -> Dict[str, TreeFeatures]:
    index_path = os.path.join(directory, FEATURES_INDEX)
    if not os.path.exists(index_path):
        raise CorpusError(f"features index not found: {index_path}")
    with open(index_path, "r", encoding="utf-8") as f:
        try:
            index = json.load(f)
        except json.JSONDecodeError as e:
            raise CorpusError(f"invalid features index {index_path}: {e}") from e
    return {tree_id: load_tree_features(directory, tree_id) for tree_id in index.get("trees", [])}


def _cnn_from_checkpoint(checkpoint: Checkpoint) -> Tuple[Dict[str, Any], CnnConfig]:
    if checkpoint.kind != "cnn" or "cnn" not in checkpoint.config:
        raise CheckpointError(f"expected a cnn checkpoint, got kind={checkpoint.kind}")
    return params_from_tensors(checkpoint.tensors), CnnConfig.from_dict(checkpoint.config["cnn"])


def _gnn_from_checkpoint(checkpoint: Checkpoint) -> Tuple[Dict[str, Any], GnnConfig]:
    if checkpoint.kind != "gnn" or "gnn" not in checkpoint.config:
        raise CheckpointError(f"expected a gnn checkpoint, got kind={checkpoint.kind}")
    return params_from_tensors(checkpoint.tensors), GnnConfig.from_dict(checkpoint.config["gnn"])


def extract_corpus_features(corpus: Corpus, entries: Sequence[CorpusEntry], cnn_checkpoint: Checkpoint,
                            processor: Optional[BatchProcessor] = None,
                            cache: Optional[PatchCache] = None) -> Dict[str, TreeFeatures]:
    """学習済みCNNで各ツリーの特徴とクラス確率を求める（ツリー単位で並列）"""
    params, cnn_cfg = _cnn_from_checkpoint(cnn_checkpoint)

    def run(entry: CorpusEntry) -> TreeFeatures:
        label_map = corpus.load_label_map(entry)
        graph = corpus.load_graph(entry)
        started = time.perf_counter()
        features, probs = extract_features(label_map, graph, params, cnn_cfg, tree_id=entry.tree_id, cache=cache)
        return TreeFeatures(node_ids=list(graph.node_ids), features=features, probs=probs,
                            seconds=time.perf_counter() - started)

    processor = processor or BatchProcessor()
    results = processor.map(run, list(entries), label="features")
    return {entry.tree_id: result for entry, result in zip(entries, results)}


# --- GNN入力 ------------------------------------------------------------------

def cnn_anchor_encodings(graph: TreeGraph, probs: np.ndarray) -> np.ndarray:
    """
    CNNの確率から leave-one-out 割り当てでアンカーを選び、位置エンコーディングを返す

    Raises:
        ShapeError: 枝が21本未満の場合
    """
    assignment = assign_labels_leave_one_out(probs)
    anchors = select_anchors(graph, assignment_to_nodes(assignment, graph.node_ids))
    return compute_positional_encodings(graph, anchors)


def _aligned(graph: TreeGraph, tree_features: TreeFeatures, tree_id: str) -> None:
    if list(graph.node_ids) != list(tree_features.node_ids):
        raise GraphError(f"features of {tree_id} do not match its graph nodes")


def build_gnn_samples(corpus: Corpus, entries: Sequence[CorpusEntry], store: Mapping[str, TreeFeatures],
                      gnn_cfg: GnnConfig) -> List[GnnSample]:
    """
    GNN学習用のサンプルを作る

    位置エンコーディングは学習前に一度だけ、CNNの予測から計算する。
    正解は各枝の参照クラス（参照に無い枝は "other"）。
    """
    samples = []
    for entry in entries:
        graph = corpus.load_graph(entry)
        tree_features = store[entry.tree_id]
        _aligned(graph, tree_features, entry.tree_id)
        encodings = cnn_anchor_encodings(graph, tree_features.probs) if gnn_cfg.uses_pe else None
        samples.append(GnnSample(tree_id=entry.tree_id, graph=graph, features=tree_features.features,
                                 encodings=encodings, targets=graph.class_targets(default=OTHER)))
    return samples


# --- 推論 ---------------------------------------------------------------------

@dataclass
class LabelPrediction:
    """ツリー1本のラベル割り当て（クラスインデックス → 枝ID）"""
    tree_id: str
    mode: str
    assignment: Dict[int, int]
    probs: np.ndarray
    seconds: float = 0.0

    def to_json_dict(self) -> Dict[str, Any]:
        """出力用の辞書（時間は含めないので同じ入力なら同じ内容になる）"""
        return {
            "tree_id": self.tree_id,
            "mode": self.mode,
            "assignment": {class_name(c): node for c, node in sorted(self.assignment.items())},
            "unassigned": [class_name(c) for c in SEGMENTAL_CLASSES if c not in self.assignment],
        }


class Labeler:
    """
    学習済みモデルで枝にラベルを付けるクラス

    GNNのチェックポイントが無い場合はCNNの確率で割り当てる（CNNのみのベースライン）。
    """

    def __init__(self, cnn_checkpoint: Checkpoint, gnn_checkpoint: Optional[Checkpoint] = None,
                 batch_size: int = 32):
        self.cnn_params, self.cnn_cfg = _cnn_from_checkpoint(cnn_checkpoint)
        self.gnn_params: Optional[Dict[str, Any]] = None
        self.gnn_cfg: Optional[GnnConfig] = None
        if gnn_checkpoint is not None:
            self.gnn_params, self.gnn_cfg = _gnn_from_checkpoint(gnn_checkpoint)
        self.batch_size = batch_size

    @property
    def mode(self) -> str:
        return "cnn" if self.gnn_cfg is None else self.gnn_cfg.arch

    def label_features(self, graph: TreeGraph, tree_features: TreeFeatures, tree_id: str = "") -> LabelPrediction:
        """CNNの特徴と確率から割り当てる"""
        _aligned(graph, tree_features, tree_id)
        started = time.perf_counter()
        if self.gnn_cfg is None or self.gnn_params is None:
            probs = tree_features.probs
        else:
            encodings = cnn_anchor_encodings(graph, tree_features.probs) if self.gnn_cfg.uses_pe else None
            probs = predict_probs(self.gnn_params, tree_features.features, encodings, graph, self.gnn_cfg)
        assignment = assignment_to_nodes(assign_labels_basic(probs), graph.node_ids)
        seconds = tree_features.seconds + time.perf_counter() - started
        return LabelPrediction(tree_id=tree_id, mode=self.mode, assignment=assignment,
                               probs=np.asarray(probs, dtype=np.float32), seconds=seconds)

    def label(self, label_map: VoxelLabelMap, graph: TreeGraph, tree_id: str = "",
              cache: Optional[PatchCache] = None) -> LabelPrediction:
        """ボリュームとグラフから割り当てる（CNN特徴の抽出から）"""
        started = time.perf_counter()
        features, probs = extract_features(label_map, graph, self.cnn_params, self.cnn_cfg,
                                           batch_size=self.batch_size, tree_id=tree_id, cache=cache)
        tree_features = TreeFeatures(node_ids=list(graph.node_ids), features=features, probs=probs,
                                     seconds=time.perf_counter() - started)
        prediction = self.label_features(graph, tree_features, tree_id)
        logger.info(f"{tree_id or 'tree'}: {len(prediction.assignment)} labels ({self.mode}) "
                    f"in {prediction.seconds:.2f}s")
        return prediction


# --- 交差検証 -----------------------------------------------------------------

@dataclass
class EvaluationResult:
    """1つのモデル構成の評価（全分割のテスト結果をまとめたもの）"""
    name: str
    metrics: DatasetMetrics
    predictions: List[LabelPrediction]

    @property
    def timing(self) -> Dict[str, float]:
        seconds = [p.seconds for p in self.predictions]
        return {"mean": float(np.mean(seconds)), "std": float(np.std(seconds)), "trees": len(seconds)}


@dataclass
class CrossValidation:
    folds: List[Tuple[List[str], List[str]]]
    results: Dict[str, EvaluationResult]
    cnn_runs: List[TrainingRun] = field(default_factory=list)
    gnn_runs: Dict[str, List[TrainingRun]] = field(default_factory=dict)


def cross_validate(corpus: Corpus, cnn_cfg: CnnConfig, cnn_train: TrainConfig,
                   variants: Mapping[str, Optional[GnnConfig]], gnn_train: Mapping[str, TrainConfig],
                   folds: int, seed: int, processor: Optional[BatchProcessor] = None) -> CrossValidation:
    """
    k分割交差検証

    分割ごとにCNNを学習して全ツリーの特徴を求め、variants の各GNNをその特徴で学習する。
    値が None の構成はCNNのみで割り当てる。テスト分割の結果を全分割でまとめて評価する。

    Args:
        corpus: 正解ラベル付きのコーパス
        cnn_cfg: CNNの構成
        cnn_train: CNNの学習設定
        variants: 名前 → GNN構成（None ならCNNのみ）
        gnn_train: 名前 → GNNの学習設定
        folds: 分割数
        seed: 分割のシード

    Raises:
        ValueError: 分割数がツリー数より多い場合
    """
    splits = kfold_split(len(corpus), folds, seed)
    cache = PatchCache()
    predictions: Dict[str, List[LabelPrediction]] = {name: [] for name in variants}
    references: List[Dict[int, int]] = []
    graphs: List[TreeGraph] = []
    fold_ids: List[Tuple[List[str], List[str]]] = []
    result = CrossValidation(folds=fold_ids, results={}, gnn_runs={name: [] for name in variants})

    for fold, (train_idx, test_idx) in enumerate(splits, start=1):
        train_entries = corpus.subset(train_idx)
        test_entries = corpus.subset(test_idx)
        fold_ids.append(([e.tree_id for e in train_entries], [e.tree_id for e in test_entries]))
        logger.info(f"fold {fold}/{folds}: train {len(train_entries)} trees, test {len(test_entries)} trees")

        cnn_samples = [CnnSample(e.tree_id, corpus.load_label_map(e), corpus.load_graph(e)) for e in train_entries]
        cnn_run = train_cnn(cnn_samples, cnn_cfg, cnn_train, cache=cache)
        result.cnn_runs.append(cnn_run)
        store = extract_corpus_features(corpus, train_entries + test_entries, cnn_run.checkpoint,
                                        processor=processor, cache=cache)

        test_graphs = [corpus.load_graph(e) for e in test_entries]
        references.extend(e.reference() for e in test_entries)
        graphs.extend(test_graphs)

        for name, gnn_cfg in variants.items():
            gnn_checkpoint = None
            if gnn_cfg is not None:
                samples = build_gnn_samples(corpus, train_entries, store, gnn_cfg)
                gnn_run = train_gnn(samples, gnn_cfg, gnn_train[name])
                result.gnn_runs[name].append(gnn_run)
                gnn_checkpoint = gnn_run.checkpoint
            labeler = Labeler(cnn_run.checkpoint, gnn_checkpoint)
            for entry, graph in zip(test_entries, test_graphs):
                predictions[name].append(labeler.label_features(graph, store[entry.tree_id], entry.tree_id))

    for name in variants:
        metrics = evaluate_dataset([p.assignment for p in predictions[name]], references, graphs)
        result.results[name] = EvaluationResult(name=name, metrics=metrics, predictions=predictions[name])
        overall = metrics.overall_acc
        logger.info(f"{name}: overall acc {overall['mean']}, td {metrics.overall_td['mean']}")
    return result


__all__ = [
    'MANIFEST_NAME', 'CorpusEntry', 'Corpus', 'write_manifest', 'read_manifest', 'generate_corpus',
    'volume_to_graph', 'TreeFeatures', 'save_tree_features', 'load_tree_features',
    'save_feature_store', 'load_feature_store', 'extract_corpus_features',
    'cnn_anchor_encodings', 'build_gnn_samples', 'LabelPrediction', 'Labeler',
    'EvaluationResult', 'CrossValidation', 'cross_validate',
]
