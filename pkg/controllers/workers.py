"""
ワーカーモジュール

スレッドプール上で実行する処理単位（ワーカー）の基盤を提供します。
"""
import logging
import time
from typing import Any, Callable, List, Optional, Sequence

from utils import logger, get_config


class CancellationError(Exception):
    """ワーカーのキャンセルを示す例外"""
    pass


ProgressCallback = Callable[[str, int, Optional[str]], None]


class BaseWorker:
    """
    基本ワーカークラス

    すべてのワーカークラスの基底クラスとして使用します。
    処理のキャンセル、進捗報告、エラー処理などの共通機能を提供します。
    """

    def __init__(self, worker_id: Optional[str] = None,
                 progress_callback: Optional[ProgressCallback] = None):
        """
        初期化

        Args:
            worker_id: ワーカーの識別子（省略時は自動生成）
            progress_callback: 進捗の通知先 (worker_id, 進捗率, 状態)
        """
        self._is_cancelled = False
        self._start_time = 0.0
        self.worker_id = worker_id or f"worker_{id(self)}"
        self.progress_callback = progress_callback
        self._last_progress = -1
        self._last_progress_time = 0.0
        self.elapsed = 0.0

        # 設定から進捗の更新間隔を取得
        config = get_config()
        self.progress_update_interval = config.get("workers.progress_update_interval_ms", 500) / 1000.0

    @property
    def is_cancelled(self) -> bool:
        return self._is_cancelled

    def cancel(self) -> bool:
        """
        処理をキャンセル

        Returns:
            bool: キャンセルフラグが設定された場合はTrue, 既にキャンセル済みの場合はFalse
        """
        if self._is_cancelled:
            logger.debug(f"Worker {self.worker_id} already cancelled.")
            return False

        logger.info(f"Cancellation requested for worker: {self.worker_id}")
        self._is_cancelled = True
        return True

    def check_cancelled(self) -> None:
        """
        キャンセル状態をチェックし、キャンセルされていた場合は例外を発生させる

        Raises:
            CancellationError: キャンセルされた場合
        """
        if self._is_cancelled:
            raise CancellationError(f"Worker {self.worker_id} was cancelled.")

    def update_progress(self, progress: int, status: Optional[str] = None) -> None:
        """
        進捗状況を更新

        5%以上の変化、更新間隔の経過、100%到達のいずれかで通知する。

        Args:
            progress: 進捗率（0-100）
            status: 状態の説明（オプション）
        """
        progress = max(0, min(100, progress))

        current_time = time.time()
        significant_change = abs(progress - self._last_progress) >= 5
        time_elapsed = current_time - self._last_progress_time > self.progress_update_interval
        should_update = (progress == 100 and self._last_progress != 100) or significant_change or time_elapsed
        if not should_update:
            return

        self._last_progress = progress
        self._last_progress_time = current_time
        logger.debug(f"Worker '{self.worker_id}' progress: {progress}% {status or ''}".rstrip())
        if self.progress_callback is not None:
            self.progress_callback(self.worker_id, progress, status)

    def run(self) -> Any:
        """
        ワーカーを実行して結果を返す

        例外はログに記録してから呼び出し元に再送出する。

        Raises:
            CancellationError: キャンセルされた場合
        """
        self._start_time = time.time()
        logger.debug(f"Worker '{self.worker_id}' started.")
        error_occurred = False

        try:
            self.check_cancelled()
            result = self.work()
            self.check_cancelled()
            return result

        except CancellationError:
            logger.info(f"Worker '{self.worker_id}' cancelled.")
            raise

        except Exception as e:
            error_occurred = True
            logger.error(f"Worker '{self.worker_id}' encountered an error: {type(e).__name__}: {e}")
            logger.debug(f"Error details for {self.worker_id}:", exc_info=True)
            raise

        finally:
            self.elapsed = time.time() - self._start_time
            log_level = logging.ERROR if error_occurred else logging.DEBUG
            logger.log(log_level, f"Worker '{self.worker_id}' finished. Elapsed: {self.elapsed:.3f}s")

    def work(self) -> Any:
        """
        実際の処理を行うメソッド（サブクラスで実装する）

        処理中は定期的に check_cancelled() を呼び出して、キャンセル要求をチェックしてください。
        """
        raise NotImplementedError("Subclasses must implement the 'work' method.")


class BatchWorker(BaseWorker):
    """項目のバッチに関数を順に適用するワーカー（結果は入力順）"""

    def __init__(self, function: Callable[[Any], Any], items: Sequence[Any],
                 worker_id: Optional[str] = None,
                 progress_callback: Optional[ProgressCallback] = None):
        super().__init__(worker_id, progress_callback)
        self.function = function
        self.items = list(items)

    def work(self) -> List[Any]:
        results = []
        total = len(self.items)
        for done, item in enumerate(self.items, start=1):
            self.check_cancelled()
            results.append(self.function(item))
            self.update_progress(int(done * 100 / total))
        return results


__all__ = ['CancellationError', 'BaseWorker', 'BatchWorker', 'ProgressCallback']
