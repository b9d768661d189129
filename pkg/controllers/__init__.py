"""
コントローラーモジュールの初期化ファイル

合成ツリー生成、学習、ラベル割り当て、評価、並列処理を担当するクラスを提供します。
"""
from .worker_manager import WorkerManager
from .workers import BaseWorker, BatchWorker, CancellationError
from .batch_processor import BatchProcessor
from .synthetic_generator import SyntheticTreeSpec, SyntheticTree, generate_tree, rasterize_tree
from .labeling import assign_labels_basic, assign_labels_leave_one_out
from .metrics import (
    accuracy_per_class, topological_distance, evaluate_dataset,
    weighted_kappa_linear, kappa_agreement_level,
)
from .trainer import (
    TrainConfig, he_init, init_params, class_weights, weighted_cross_entropy,
    sgd_momentum_step, kfold_split, train_cnn, train_gnn,
)
from .pipeline import Corpus, Labeler, read_manifest, generate_corpus, cross_validate

__all__ = [
    'WorkerManager',
    'BaseWorker',
    'BatchWorker',
    'CancellationError',
    'BatchProcessor',
    'SyntheticTreeSpec', 'SyntheticTree', 'generate_tree', 'rasterize_tree',
    'assign_labels_basic', 'assign_labels_leave_one_out',
    'accuracy_per_class', 'topological_distance', 'evaluate_dataset',
    'weighted_kappa_linear', 'kappa_agreement_level',
    'TrainConfig', 'he_init', 'init_params', 'class_weights', 'weighted_cross_entropy',
    'sgd_momentum_step', 'kfold_split', 'train_cnn', 'train_gnn',
    'Corpus', 'Labeler', 'read_manifest', 'generate_corpus', 'cross_validate',
]
