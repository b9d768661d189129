"""
ワーカーマネージャーモジュール

マルチスレッド処理を管理するクラスを提供します。
"""
import threading
import time
from concurrent.futures import CancelledError, Future, ThreadPoolExecutor
from typing import Any, Dict, List, Optional

from utils import logger, get_config
from .workers import BaseWorker, CancellationError


class WorkerManager:
    """
    マルチスレッド処理を管理するクラス

    ThreadPoolExecutor を使用して BaseWorker を実行します。
    ワーカーの起動、キャンセル、完了待ちを行います。
    """

    def __init__(self, max_threads: Optional[int] = None):
        """
        初期化

        Args:
            max_threads: 最大スレッド数（Noneの場合は設定値 workers.max_concurrent）
        """
        config = get_config()
        if max_threads is None:
            max_threads = int(config.get("workers.max_concurrent", 4))
        if max_threads < 1:
            raise ValueError(f"max_threads must be positive, got {max_threads}")

        self.max_threads = max_threads
        self.executor = ThreadPoolExecutor(max_workers=max_threads, thread_name_prefix="airway-worker")

        # ワーカー管理用のデータ構造（投入順を保つ）
        self.active_workers: Dict[str, BaseWorker] = {}
        self.futures: Dict[str, "Future[Any]"] = {}
        self.worker_start_times: Dict[str, float] = {}
        self.mutex = threading.RLock()

        logger.debug(f"WorkerManager initialized: Max Threads={max_threads}")

    def start_worker(self, worker_id: str, worker: BaseWorker) -> bool:
        """
        ワーカーを開始

        Args:
            worker_id: ワーカーの識別子
            worker: 実行するワーカー

        Returns:
            bool: ワーカーの起動に成功した場合はTrue
        """
        if not isinstance(worker, BaseWorker):
            logger.error(f"Worker {worker_id} must inherit from BaseWorker.")
            return False

        with self.mutex:
            if worker_id in self.active_workers:
                logger.warning(f"Worker with ID '{worker_id}' already active. Cancelling existing one.")
                self.cancel_worker(worker_id)

            self.active_workers[worker_id] = worker
            self.worker_start_times[worker_id] = time.time()
            future = self.executor.submit(worker.run)
            self.futures[worker_id] = future
            future.add_done_callback(lambda _f, w_id=worker_id: self.mark_worker_finished(w_id))
            logger.debug(f"Starting worker: {worker_id}")
            return True

    def cancel_worker(self, worker_id: str) -> bool:
        """
        ワーカーをキャンセル

        Returns:
            bool: キャンセル操作が試行された場合はTrue
        """
        with self.mutex:
            worker = self.active_workers.pop(worker_id, None)
            future = self.futures.pop(worker_id, None)
            self.worker_start_times.pop(worker_id, None)
        if worker is None:
            logger.debug(f"Worker {worker_id} not found in active workers for cancellation.")
            return False
        worker.cancel()
        if future is not None:
            future.cancel()
        return True

    def cancel_all(self) -> int:
        """
        すべてのワーカーをキャンセル

        Returns:
            int: キャンセルが試行されたワーカーの数
        """
        with self.mutex:
            worker_ids = list(self.active_workers.keys())
        cancelled = sum(1 for worker_id in worker_ids if self.cancel_worker(worker_id))
        logger.info(f"Cancellation attempted for {cancelled} / {len(worker_ids)} workers.")
        return cancelled

    def wait_for_all(self) -> Dict[str, Any]:
        """
        すべてのワーカーの完了を待ち、結果を返す

        Returns:
            dict: ワーカーID → 結果（投入順、キャンセルされたもの・開始前に取り消されたものは除く）

        Raises:
            Exception: 失敗したワーカーのうち投入順で最初のものの例外
        """
        with self.mutex:
            pending = list(self.futures.items())

        results: Dict[str, Any] = {}
        first_error: Optional[BaseException] = None
        for worker_id, future in pending:
            try:
                results[worker_id] = future.result()
            except (CancellationError, CancelledError):
                continue
            except BaseException as e:  # noqa: B902
                if first_error is None:
                    first_error = e

        with self.mutex:
            for worker_id, _ in pending:
                self.futures.pop(worker_id, None)

        if first_error is not None:
            raise first_error
        return results

    def active_worker_count(self) -> int:
        """現在アクティブなワーカーの数を取得"""
        with self.mutex:
            return len(self.active_workers)

    def is_worker_active(self, worker_id: str) -> bool:
        with self.mutex:
            return worker_id in self.active_workers

    def get_status(self) -> Dict[str, Any]:
        """ワーカーマネージャーの状態情報を取得"""
        with self.mutex:
            current_time = time.time()
            elapsed: List[float] = [current_time - self.worker_start_times[w]
                                    for w in self.active_workers if w in self.worker_start_times]
            return {
                'active_workers': len(self.active_workers),
                'max_threads': self.max_threads,
                'longest_running_seconds': max(elapsed, default=0.0),
                'active_worker_ids': list(self.active_workers.keys()),
            }

    def mark_worker_finished(self, worker_id: str) -> None:
        """ワーカーを完了状態としてマーク（Future の完了時に呼ばれる）"""
        with self.mutex:
            if worker_id in self.active_workers:
                start_time = self.worker_start_times.pop(worker_id, 0)
                del self.active_workers[worker_id]
                logger.debug(f"Worker '{worker_id}' marked as finished. Elapsed: {time.time() - start_time:.2f}s")

    def shutdown(self) -> None:
        """スレッドプールを停止する"""
        self.executor.shutdown(wait=True)

    def __enter__(self) -> "WorkerManager":
        return self

    def __exit__(self, *exc: Any) -> None:
        self.shutdown()


__all__ = ['WorkerManager']
