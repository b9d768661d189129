"""
バッチ処理モジュール

項目の列をバッチに分けてワーカーで並列処理し、結果を入力順に返すクラスを提供します。
枝ごとのパッチ切り出し、シードごとのツリー生成、ツリーごとの特徴抽出に使います。
"""
from typing import Any, Callable, List, Optional, Sequence

from utils import logger, get_config
from .worker_manager import WorkerManager
from .workers import BatchWorker, CancellationError, ProgressCallback


class BatchProcessor:
    """
    一括処理を行うクラス

    結果は実行順に依存せず、常に入力と同じ順序で返します。
    """

    def __init__(self, worker_manager: Optional[WorkerManager] = None, batch_size: Optional[int] = None):
        """
        初期化

        Args:
            worker_manager: ワーカーマネージャー（省略時は内部で作成）
            batch_size: 1ワーカーあたりの項目数（Noneの場合は設定から取得）
        """
        config = get_config()
        if batch_size is None:
            batch_size = int(config.get("workers.batch_size", 16))
        if batch_size < 1:
            raise ValueError(f"batch_size must be positive, got {batch_size}")

        self._owns_manager = worker_manager is None
        self.worker_manager = worker_manager or WorkerManager()
        self.batch_size = batch_size
        self.total_count = 0
        self.completed_count = 0

        logger.debug(f"BatchProcessor initialized: batch_size={batch_size}")

    def _batches(self, items: Sequence[Any]) -> List[Sequence[Any]]:
        return [items[i:i + self.batch_size] for i in range(0, len(items), self.batch_size)]

    def map(self, function: Callable[[Any], Any], items: Sequence[Any], label: str = "batch",
            progress_callback: Optional[ProgressCallback] = None) -> List[Any]:
        """
        各項目に function を適用する

        Args:
            function: 1項目を処理する関数（スレッドセーフであること）
            items: 処理する項目
            label: ワーカーIDとログに使う名前
            progress_callback: ワーカーごとの進捗通知

        Returns:
            list: 入力順の結果

        Raises:
            Exception: いずれかの項目の処理で発生した例外（投入順で最初のもの）
            CancellationError: 途中でキャンセルされ、結果の揃わないバッチがある場合
        """
        items = list(items)
        self.total_count = len(items)
        self.completed_count = 0
        if not items:
            logger.debug(f"{label}: nothing to process")
            return []

        batches = self._batches(items)
        worker_ids = []
        for number, batch in enumerate(batches):
            worker_id = f"{label}_{number:04d}"
            worker = BatchWorker(function, batch, worker_id, progress_callback)
            self.worker_manager.start_worker(worker_id, worker)
            worker_ids.append(worker_id)

        logger.debug(f"{label}: {len(items)} items in {len(batches)} batches")
        try:
            results = self.worker_manager.wait_for_all()
        except Exception:
            self.worker_manager.cancel_all()
            raise

        missing = [worker_id for worker_id in worker_ids if worker_id not in results]
        if missing:
            raise CancellationError(f"{label}: {len(missing)} of {len(worker_ids)} batches were cancelled")

        ordered: List[Any] = []
        for worker_id in worker_ids:
            ordered.extend(results[worker_id])
        self.completed_count = len(ordered)
        return ordered

    def cancel(self) -> None:
        """実行中のバッチをキャンセル"""
        self.worker_manager.cancel_all()

    def close(self) -> None:
        if self._owns_manager:
            self.worker_manager.shutdown()


__all__ = ['BatchProcessor']
