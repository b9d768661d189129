"""
学習モジュール

初期化、重み付き交差エントロピー、モーメンタムSGD、クラス重み、k分割、
2段階の学習ドライバー（CNN → 固定したCNN特徴でGNN）を提供します。

学習は (seed, 構成, コーパス) が同じなら損失の推移までビット単位で一致します。
"""
import time
from dataclasses import dataclass, asdict, field
from typing import Any, Callable, Dict, List, Mapping, MutableMapping, Optional, Sequence, Tuple

import numpy as np

from utils import logger, get_config, ConfigError, ShapeError, MemoryMonitor
from models.anatomy import NUM_CLASSES, OTHER
from models.checkpoint import Checkpoint
from models.label_map import VoxelLabelMap, extract_patch
from models.patch_cache import PatchCache
from models.tree_graph import TreeGraph
from networks.tensor import Tensor, log_softmax, mul, parameter, pick, sum_all
from networks.cnn import CnnConfig, cnn_apply, cnn_param_shapes
from networks.gnn import GnnConfig, GraphIndex, gnn_apply, gnn_param_shapes

LOG_CLAMP = 1e-12
CLASS_WEIGHT_MODES = ("inverse_frequency", "uniform")

EpochCallback = Callable[["EpochRecord"], None]


@dataclass
class TrainConfig:
    """
    学習の設定

    Attributes:
        lr: 学習率
        momentum: モーメンタム係数
        epochs: エポック数
        seed: 初期化とシャッフルのシード
        folds: 交差検証の分割数
        batch_size: CNNの1ステップあたりのパッチ数
        class_weight_mode: "inverse_frequency" または "uniform"
        log_every: 何エポックごとにログを出すか
    """
    lr: float = 5e-4
    momentum: float = 0.9
    epochs: int = 150
    seed: int = 0
    folds: int = 5
    batch_size: int = 32
    class_weight_mode: str = "inverse_frequency"
    log_every: int = 1

    def __post_init__(self):
        if not self.lr >= 0:
            raise ConfigError(f"learning rate must be non-negative, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.folds < 2:
            raise ConfigError(f"folds must be >= 2, got {self.folds}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be positive, got {self.batch_size}")
        if self.class_weight_mode not in CLASS_WEIGHT_MODES:
            raise ConfigError(f"unknown class weight mode: {self.class_weight_mode}")
        self.log_every = max(1, int(self.log_every))

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_settings(cls, layers: Optional[int] = None, **overrides: Any) -> "TrainConfig":
        """
        設定の train セクションから作る

        7層構成では lr と epochs の既定値に deep_lr / deep_epochs を使う（明示した値が優先）。
        """
        config = get_config()
        deep = layers == 7
        values: Dict[str, Any] = {
            "lr": float(config.get("train.deep_lr" if deep else "train.lr", 5e-4)),
            "momentum": float(config.get("train.momentum", 0.9)),
            "epochs": int(config.get("train.deep_epochs" if deep else "train.epochs", 150)),
            "seed": int(config.get("train.seed", 0)),
            "folds": int(config.get("train.folds", 5)),
            "batch_size": int(config.get("cnn.batch_size", 32)),
            "class_weight_mode": str(config.get("train.class_weight_mode", "inverse_frequency")),
            "log_every": int(config.get("train.log_every", 1)),
        }
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    @classmethod
    def for_overfit(cls, model: str, seed: int = 0, **overrides: Any) -> "TrainConfig":
        """
        1ツリーへの過学習確認用の設定（overfit セクション）

        Args:
            model: "cnn" またはGNNのアーキテクチャ名
            seed: 初期化とシャッフルのシード

        Raises:
            ConfigError: model の学習率が設定に無い場合
        """
        config = get_config()
        lr = config.get(f"overfit.lr.{model}")
        if lr is None:
            raise ConfigError(f"no overfit learning rate for {model}")
        values: Dict[str, Any] = {
            "lr": float(lr),
            "momentum": float(config.get("train.momentum", 0.9)),
            "epochs": int(config.get("overfit.epochs", 200)),
            "seed": seed,
            "batch_size": int(config.get("overfit.batch_size", 4)),
            "class_weight_mode": str(config.get("overfit.class_weight_mode", "uniform")),
            "log_every": int(config.get("overfit.epochs", 200)),
        }
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


@dataclass
class EpochRecord:
    """1エポック分の学習ログ"""
    epoch: int
    loss: float
    acc: float


@dataclass
class TrainingRun:
    """学習結果（チェックポイントとエポックごとの記録）"""
    checkpoint: Checkpoint
    history: List[EpochRecord] = field(default_factory=list)
    elapsed: float = 0.0

    @property
    def best_acc(self) -> float:
        """全エポックでの最高の学習正解率"""
        return max((record.acc for record in self.history), default=0.0)

    def first_epoch_reaching(self, acc: float) -> Optional[int]:
        """学習正解率が acc 以上になった最初のエポック（無ければ None）"""
        for record in self.history:
            if record.acc >= acc:
                return record.epoch
        return None


# --- 初期化 -------------------------------------------------------------------

def he_init(shape: Sequence[int], fan_in: int, rng: np.random.Generator) -> np.ndarray:
    """
    He 初期化（平均0、分散 2/fan_in の正規分布、float32）

    Raises:
        ValueError: fan_in が1未満の場合
    """
    if fan_in < 1:
        raise ValueError(f"fan_in must be >= 1, got {fan_in}")
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=tuple(shape)).astype(np.float32)


def init_params(shapes: Mapping[str, Tuple[Tuple[int, ...], int]], seed: int) -> Dict[str, Tensor]:
    """
    パラメーター名 → (形状, fan_in) の辞書から学習用テンソルを作る

    fan_in が0のもの（バイアス）はゼロで初期化する。乱数は辞書の順に引く。
    """
    rng = np.random.default_rng(seed)
    params: Dict[str, Tensor] = {}
    for name, (shape, fan_in) in shapes.items():
        if fan_in == 0:
            params[name] = parameter(np.zeros(shape, dtype=np.float32))
        else:
            params[name] = parameter(he_init(shape, fan_in, rng))
    return params


def params_from_tensors(tensors: Mapping[str, np.ndarray]) -> Dict[str, Tensor]:
    """チェックポイントのテンソルを推論用パラメーターにする"""
    return {name: Tensor(np.asarray(value, dtype=np.float32)) for name, value in tensors.items()}


def tensors_from_params(params: Mapping[str, Tensor]) -> Dict[str, np.ndarray]:
    return {name: np.array(p.data, dtype=np.float32) for name, p in params.items()}


# --- 損失とクラス重み ---------------------------------------------------------

def class_weights(labels: Sequence[int], num_classes: int = NUM_CLASSES) -> np.ndarray:
    """
    逆頻度のクラス重み（平均1に正規化）

    w_c = N / (C · max(count_c, 1))

    Raises:
        ValueError: ラベルが空、または範囲外のクラスを含む場合
    """
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if labels.size == 0:
        raise ValueError("class weights need at least one label")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(f"class labels must be in [0, {num_classes})")
    counts = np.bincount(labels, minlength=num_classes).astype(np.float64)
    weights = labels.size / (num_classes * np.maximum(counts, 1.0))
    return weights / weights.mean()


def weighted_cross_entropy(probs: np.ndarray, target: int, weights: np.ndarray) -> float:
    """
    1行分の重み付き交差エントロピー −w[t]·log(p[t])（log は 1e-12 でクランプ）

    Raises:
        ValueError: target が範囲外の場合
    """
    probs = np.asarray(probs, dtype=np.float64)
    if not 0 <= target < probs.shape[-1]:
        raise ValueError(f"target class {target} out of range for {probs.shape[-1]} classes")
    return float(-weights[target] * np.log(max(probs[target], LOG_CLAMP)))


def weighted_loss(logits: Tensor, targets: np.ndarray, weights: np.ndarray) -> Tensor:
    """行平均の重み付き交差エントロピー（ロジットから log-softmax で計算、微分可能）"""
    targets = np.asarray(targets, dtype=np.intp)
    n = targets.shape[0]
    if logits.ndim != 2 or logits.shape[0] != n:
        raise ShapeError(f"logits {logits.shape} do not match {n} targets")
    picked = pick(log_softmax(logits), targets)
    coefficients = (-np.asarray(weights, dtype=np.float64)[targets] / n).astype(logits.dtype)
    return sum_all(mul(picked, coefficients))


# --- 最適化 -------------------------------------------------------------------

def sgd_momentum_step(params: Mapping[str, Tensor], grads: Mapping[str, Optional[np.ndarray]],
                      state: MutableMapping[str, np.ndarray], lr: float, momentum: float) -> None:
    """
    モーメンタムSGDの1ステップ（その場で更新）

    v ← momentum·v + g、p ← p − lr·v。速度は float64 で state に保持する。
    勾配が None のパラメーターは勾配0として扱う。

    Raises:
        ShapeError: 勾配の形がパラメーターと一致しない場合
    """
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros(p.shape, dtype=np.float64)
        elif g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        v = state.get(name)
        if v is None:
            v = np.zeros(p.shape, dtype=np.float64)
        v = momentum * v + g
        state[name] = v
        p.data = (p.data.astype(np.float64) - lr * v).astype(p.dtype)


def _step(params: Mapping[str, Tensor], loss: Tensor, state: MutableMapping[str, np.ndarray],
          cfg: TrainConfig) -> None:
    for p in params.values():
        p.zero_grad()
    loss.backward()
    sgd_momentum_step(params, {name: p.grad for name, p in params.items()}, state, cfg.lr, cfg.momentum)


def kfold_split(size: int, folds: int, seed: int) -> List[Tuple[np.ndarray, np.ndarray]]:
    """
    k分割（テストの大きさの差は1以内、シードで決定的）

    Returns:
        list: (学習インデックス, テストインデックス) の組（どちらも昇順）

    Raises:
        ValueError: folds < 2 または folds > size の場合
    """
    if folds < 2:
        raise ValueError(f"folds must be >= 2, got {folds}")
    if folds > size:
        raise ValueError(f"cannot split {size} items into {folds} folds")
    order = np.random.default_rng(seed).permutation(size)
    splits = []
    for chunk in np.array_split(order, folds):
        test = np.sort(chunk)
        train = np.setdiff1d(np.arange(size), test)
        splits.append((train, test))
    return splits


# --- 学習ドライバー -----------------------------------------------------------

@dataclass
class CnnSample:
    """CNN学習用のツリー（ラベルマップと正解ラベル付きグラフ）"""
    tree_id: str
    label_map: VoxelLabelMap
    graph: TreeGraph


@dataclass
class GnnSample:
    """GNN学習用のツリー（固定したCNN特徴と位置エンコーディング）"""
    tree_id: str
    graph: TreeGraph
    features: np.ndarray
    encodings: Optional[np.ndarray]
    targets: np.ndarray
    index: Optional[GraphIndex] = None

    def __post_init__(self):
        if self.features.shape[0] != self.graph.num_nodes or len(self.targets) != self.graph.num_nodes:
            raise ShapeError(f"tree {self.tree_id}: features/targets do not match {self.graph.num_nodes} nodes")
        if self.index is None:
            self.index = GraphIndex.from_graph(self.graph)


def _weights_for(targets: np.ndarray, cfg: TrainConfig) -> np.ndarray:
    if cfg.class_weight_mode == "uniform":
        return np.ones(NUM_CLASSES, dtype=np.float64)
    return class_weights(targets)


class _EpochLogger:
    """エポックごとの記録とログ出力（メモリ使用量も出す）"""

    def __init__(self, name: str, cfg: TrainConfig, callback: Optional[EpochCallback]):
        self.name = name
        self.cfg = cfg
        self.callback = callback
        self.history: List[EpochRecord] = []
        self.memory_monitor = MemoryMonitor(int(get_config().get("memory.threshold_percent", 80)))
        self.auto_optimize = bool(get_config().get("memory.auto_optimize", True))

    def register_release(self, release: Callable[[], None]) -> None:
        self.memory_monitor.register_release_callback(release)

    def record(self, epoch: int, loss: float, acc: float) -> None:
        record = EpochRecord(epoch=epoch, loss=loss, acc=acc)
        self.history.append(record)
        if epoch == 1 or epoch % self.cfg.log_every == 0 or epoch == self.cfg.epochs:
            memory = self.memory_monitor.get_formatted_memory_info()
            logger.info(f"[{self.name}] epoch {epoch}/{self.cfg.epochs} loss={loss:.6f} acc={acc:.4f} "
                        f"memory={memory['process_memory']}")
        if self.auto_optimize:
            self.memory_monitor.optimize_if_needed()
        if self.callback is not None:
            self.callback(record)


def train_cnn(samples: Sequence[CnnSample], cnn_cfg: CnnConfig, cfg: TrainConfig,
              cache: Optional[PatchCache] = None,
              on_epoch: Optional[EpochCallback] = None) -> TrainingRun:
    """
    枝パッチCNNを学習する

    1ステップは batch_size 個のパッチ。枝の並びはエポックごとにシードからシャッフルする。
    正解はグラフのラベル（未ラベルの枝は "other"）。

    Raises:
        ValueError: コーパスが空の場合
    """
    if not samples:
        raise ValueError("cannot train the cnn on an empty corpus")
    started = time.time()
    cache = cache if cache is not None else PatchCache()

    items: List[Tuple[int, int]] = []
    targets: List[int] = []
    for s, sample in enumerate(samples):
        rows_targets = sample.graph.class_targets(default=OTHER)
        for row in range(sample.graph.num_nodes):
            items.append((s, row))
            targets.append(int(rows_targets[row]))
    all_targets = np.asarray(targets, dtype=np.intp)
    weights = _weights_for(all_targets, cfg)

    def patch(item: Tuple[int, int]) -> np.ndarray:
        s, row = item
        sample = samples[s]
        branch = sample.graph.node_ids[row]
        center = sample.graph.centers.get(branch)
        return cache.get_or_create(
            sample.tree_id, branch, cnn_cfg.patch_side,
            lambda: extract_patch(sample.label_map, branch, cnn_cfg.patch_side, center=center).values)

    params = init_params(cnn_param_shapes(cnn_cfg), cfg.seed)
    state: Dict[str, np.ndarray] = {}
    shuffle_rng = np.random.default_rng(cfg.seed + 1)
    epochs = _EpochLogger("cnn", cfg, on_epoch)
    epochs.register_release(cache.clear)
    logger.info(f"CNN学習を開始: {len(samples)} trees, {len(items)} branches, "
                f"patch_side={cnn_cfg.patch_side}, lr={cfg.lr}, epochs={cfg.epochs}")

    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(len(items))
        total_loss = 0.0
        correct = 0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            patches = np.stack([patch(items[i]) for i in batch])
            batch_targets = all_targets[batch]
            _, logits = cnn_apply(params, patches, cnn_cfg)
            loss = weighted_loss(logits, batch_targets, weights)
            total_loss += float(loss.data) * len(batch)
            correct += int((logits.data.argmax(axis=1) == batch_targets).sum())
            _step(params, loss, state, cfg)
        epochs.record(epoch, total_loss / len(items), correct / len(items))

    checkpoint = Checkpoint(
        tensors=tensors_from_params(params), kind="cnn",
        config={"cnn": cnn_cfg.to_dict(), "train": cfg.to_dict()},
        seed=cfg.seed, epoch=cfg.epochs,
    )
    elapsed = time.time() - started
    logger.info(f"CNN学習が完了: {elapsed:.1f}s, patch cache hit ratio {cache.get_stats()['hit_ratio']:.1f}%")
    return TrainingRun(checkpoint=checkpoint, history=epochs.history, elapsed=elapsed)


def train_gnn(samples: Sequence[GnnSample], gnn_cfg: GnnConfig, cfg: TrainConfig,
              on_epoch: Optional[EpochCallback] = None) -> TrainingRun:
    """
    固定したCNN特徴の上でGNNを学習する（1ツリー = 1ステップ）

    Raises:
        ValueError: コーパスが空の場合
        ShapeError: 特徴や位置エンコーディングの形が構成と一致しない場合
    """
    if not samples:
        raise ValueError("cannot train the gnn on an empty corpus")
    started = time.time()
    weights = _weights_for(np.concatenate([s.targets for s in samples]), cfg)
    total_nodes = sum(s.graph.num_nodes for s in samples)

    params = init_params(gnn_param_shapes(gnn_cfg), cfg.seed)
    state: Dict[str, np.ndarray] = {}
    shuffle_rng = np.random.default_rng(cfg.seed + 1)
    epochs = _EpochLogger(gnn_cfg.arch, cfg, on_epoch)
    logger.info(f"GNN学習を開始: arch={gnn_cfg.arch}, layers={gnn_cfg.layers}, skip={gnn_cfg.skip}, "
                f"pe={gnn_cfg.pe_mode}, {len(samples)} trees, lr={cfg.lr}, epochs={cfg.epochs}")

    for epoch in range(1, cfg.epochs + 1):
        total_loss = 0.0
        correct = 0
        for i in shuffle_rng.permutation(len(samples)):
            sample = samples[i]
            assert sample.index is not None
            encodings = sample.encodings if gnn_cfg.uses_pe else None
            _, logits = gnn_apply(params, sample.features, encodings, sample.index, gnn_cfg)
            loss = weighted_loss(logits, sample.targets, weights)
            total_loss += float(loss.data)
            correct += int((logits.data.argmax(axis=1) == sample.targets).sum())
            _step(params, loss, state, cfg)
        epochs.record(epoch, total_loss / len(samples), correct / total_nodes)

    checkpoint = Checkpoint(
        tensors=tensors_from_params(params), kind="gnn",
        config={"gnn": gnn_cfg.to_dict(), "train": cfg.to_dict()},
        seed=cfg.seed, epoch=cfg.epochs,
    )
    elapsed = time.time() - started
    logger.info(f"GNN学習が完了: {elapsed:.1f}s")
    return TrainingRun(checkpoint=checkpoint, history=epochs.history, elapsed=elapsed)


__all__ = [
    'TrainConfig', 'EpochRecord', 'TrainingRun', 'CnnSample', 'GnnSample',
    'he_init', 'init_params', 'params_from_tensors', 'tensors_from_params',
    'class_weights', 'weighted_cross_entropy', 'weighted_loss',
    'sgd_momentum_step', 'kfold_split', 'train_cnn', 'train_gnn',
]
