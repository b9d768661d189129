"""
パッチキャッシュモジュール

切り出し済みのCNN入力パッチをメモリ上にLRUで保持します。
CNNの学習は毎エポック同じ枝のパッチを使うため、切り出しを1回で済ませます。
"""
import threading
from collections import OrderedDict
from typing import Any, Callable, Dict, Optional, Tuple

import numpy as np

from utils import logger, get_config

CacheKey = Tuple[str, int, int]


class PatchCache:
    """
    パッチのメモリキャッシュ

    キーは (ツリーID, 枝ID, パッチの一辺)。スレッドセーフ。
    """

    def __init__(self, memory_limit: Optional[int] = None):
        """
        初期化

        Args:
            memory_limit: 保持するパッチ数の上限（省略時は設定値 cache.memory_limit）
        """
        if memory_limit is None:
            memory_limit = get_config().get("cache.memory_limit", 4096)
        if memory_limit < 1:
            raise ValueError(f"memory_limit must be positive, got {memory_limit}")

        self.memory_limit: int = memory_limit
        self.memory_cache: "OrderedDict[CacheKey, np.ndarray]" = OrderedDict()
        self.mutex = threading.RLock()

        # 統計情報の初期化
        self.stats = {
            "hits": 0,
            "misses": 0,
            "writes": 0,
            "evictions": 0,
        }

        logger.debug(f"{self.__class__.__name__}を初期化: memory_limit={memory_limit}")

    def _make_cache_key(self, tree_id: str, branch: int, side: int) -> CacheKey:
        return (str(tree_id), int(branch), int(side))

    def get_patch(self, tree_id: str, branch: int, side: int) -> Optional[np.ndarray]:
        """
        パッチを取得（キャッシュにない場合はNone）
        """
        key = self._make_cache_key(tree_id, branch, side)
        with self.mutex:
            values = self.memory_cache.get(key)
            if values is None:
                self.stats["misses"] += 1
                return None
            self.memory_cache.move_to_end(key)
            self.stats["hits"] += 1
            return values

    def store_patch(self, tree_id: str, branch: int, side: int, values: np.ndarray) -> None:
        """
        パッチをキャッシュに保存（上限を超えたら最も古いものを捨てる）
        """
        key = self._make_cache_key(tree_id, branch, side)
        with self.mutex:
            if key not in self.memory_cache and len(self.memory_cache) >= self.memory_limit:
                oldest_key, _ = self.memory_cache.popitem(last=False)
                self.stats["evictions"] += 1
                logger.debug(f"古いパッチをメモリキャッシュから削除: {oldest_key}")
            self.memory_cache[key] = values
            self.memory_cache.move_to_end(key)
            self.stats["writes"] += 1

    def get_or_create(self, tree_id: str, branch: int, side: int,
                      factory: Callable[[], np.ndarray]) -> np.ndarray:
        """キャッシュにあれば返し、なければ factory で作って保存する"""
        values = self.get_patch(tree_id, branch, side)
        if values is None:
            values = factory()
            self.store_patch(tree_id, branch, side, values)
        return values

    def clear(self) -> None:
        """キャッシュをクリア"""
        with self.mutex:
            count = len(self.memory_cache)
            self.memory_cache.clear()
        logger.debug(f"パッチキャッシュをクリア: {count} entries")

    def __len__(self) -> int:
        return len(self.memory_cache)

    def _get_hit_ratio(self) -> float:
        """
        キャッシュヒット率を計算

        Returns:
            float: ヒット率（0～100）
        """
        total = self.stats["hits"] + self.stats["misses"]
        if total == 0:
            return 0.0
        return (self.stats["hits"] / total) * 100.0

    def get_stats(self) -> Dict[str, Any]:
        """
        キャッシュの統計情報を取得
        """
        with self.mutex:
            return {
                **self.stats,
                "entries": len(self.memory_cache),
                "memory_limit": self.memory_limit,
                "hit_ratio": self._get_hit_ratio(),
            }


__all__ = ['PatchCache']
