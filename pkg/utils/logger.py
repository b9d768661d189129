"""
ロギングユーティリティモジュール

ラベリングパイプライン全体で使用される一貫したロギング機能を提供します。
"""
import os
import logging
import sys
from logging.handlers import RotatingFileHandler

# ロガーの設定
logger = logging.getLogger('airway_labeler')

# ログレベルの初期化（デフォルトはINFO）
logger.setLevel(logging.INFO)

# 親ロガーへの伝播を止める（二重出力の防止）
logger.propagate = False

# ログフォーマット
formatter = logging.Formatter(
    '%(asctime)s - %(name)s - %(levelname)s - %(message)s',
    datefmt='%Y-%m-%d %H:%M:%S')

# コンソールハンドラー
console_handler = logging.StreamHandler(sys.stdout)
console_handler.setLevel(logging.INFO)
console_handler.setFormatter(formatter)
logger.addHandler(console_handler)

LOG_FILE_NAME = "airway_labeler.log"


def initialize_file_logging(log_dir):
    """ファイルベースのロギングを初期化する

    CLIの各実行は成果物と同じ出力ディレクトリにログを残します。

    Args:
        log_dir (str): ログディレクトリのパス（通常は --out ディレクトリ）

    Returns:
        str: ログファイルのパス
    """
    os.makedirs(log_dir, exist_ok=True)

    log_file = os.path.join(log_dir, LOG_FILE_NAME)

    # ローテーティングファイルハンドラー（1MBごとにローテーション、最大5ファイル）
    file_handler = RotatingFileHandler(
        log_file, maxBytes=1024*1024, backupCount=5, encoding='utf-8')
    file_handler.setLevel(logger.level)
    file_handler.setFormatter(formatter)

    # 既存のファイルハンドラーを削除（再初期化のため）
    for handler in logger.handlers[:]:
        if isinstance(handler, RotatingFileHandler):
            logger.removeHandler(handler)
            handler.close()

    logger.addHandler(file_handler)
    logger.info("File logging initialized: %s", log_file)
    return log_file


def shutdown_file_logging():
    """ファイルハンドラーを閉じて取り外す"""
    for handler in logger.handlers[:]:
        if isinstance(handler, RotatingFileHandler):
            logger.removeHandler(handler)
            handler.close()


def set_log_level(level):
    """ロガーのログレベルを設定する

    Args:
        level: ログレベル（logging.DEBUG, logging.INFO, logging.WARNING, logging.ERROR, logging.CRITICAL）
    """
    logger.setLevel(level)
    for handler in logger.handlers:
        handler.setLevel(level)

    logger.debug("Log level set to %s", logging.getLevelName(level))


def enable_debug_logging():
    """デバッグログを有効化する"""
    set_log_level(logging.DEBUG)


# エクスポートする関数とオブジェクト
__all__ = [
    'logger', 'initialize_file_logging', 'shutdown_file_logging',
    'set_log_level', 'enable_debug_logging',
]
