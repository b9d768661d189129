"""
ユーティリティモジュールの初期化ファイル

共通のユーティリティ機能をエクスポートします。
"""
# ロガーをエクスポート
from .logger import (
    logger, initialize_file_logging, shutdown_file_logging,
    set_log_level, enable_debug_logging,
)

# 設定をエクスポート
from .config import get_config, set_config, reset_config, Config

# 例外をエクスポート
from .errors import (
    AirwayLabelerError, VolumeFormatError, GraphError, ShapeError,
    AutodiffError, ConfigError, CheckpointError, GenerationError, CorpusError,
)

# メモリモニターをエクスポート
from .memory_monitor import MemoryMonitor
