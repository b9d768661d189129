"""
設定管理モジュール

パイプライン全体の設定を一元管理するためのクラスとユーティリティを提供します。
設定はメモリ上のデフォルト値から始まり、--config で指定したJSONと
CLIフラグの上書きがこの順にマージされます。環境変数は参照しません。
"""
import os
import copy
import json
from typing import Any, Dict, Optional

from .logger import logger
from .errors import ConfigError


class Config:
    """パイプライン設定を管理するクラス"""

    # デフォルト設定値
    DEFAULT_CONFIG: Dict[str, Any] = {
        # アプリケーション全般
        "app": {
            "name": "airway-labeler",
            "version": "0.1.0",
            "debug_mode": False,
        },

        # ボリューム関連
        "volume": {
            "target_spacing": (0.625, 0.625, 0.5),  # 再サンプリング後の間隔（mm、矢状・冠状・軸位）
            "adjacency": 26,  # 枝の隣接判定に使う近傍（26近傍固定）
        },

        # CNN関連（80³の既定構成）
        "cnn": {
            "patch_side": 80,           # パッチの一辺（ボクセル）
            "channels": (32, 64, 128),  # ダウンサンプリングブロックのチャンネル数
            "widen_channels": 256,      # 拡幅畳み込みのチャンネル数
            "feature_dim": 1024,        # 枝特徴の次元
            "widen_padding": "auto",    # "auto" / "valid" / "same"
            "batch_size": 32,           # 1ステップあたりのパッチ数
        },

        # デスクスケールのCNNプロファイル
        "desk": {
            "patch_side": 32,
            "channels": (8, 16, 32),
            "widen_channels": 64,
        },

        # GNN関連
        "gnn": {
            "arch": "spgnn",          # gat / gats / gcn / gin / sage / spgnn
            "layers": 4,              # 2 / 4 / 7
            "skip": None,             # None = アーキテクチャの既定値
            "pe_mode": "learnable",   # learnable / nlpe / none
            "num_anchors": 39,
        },

        # 学習関連
        "train": {
            "lr": 5e-4,
            "momentum": 0.9,
            "epochs": 150,
            "deep_lr": 1e-5,         # 7層構成の学習率
            "deep_epochs": 250,      # 7層構成のエポック数
            "seed": 0,
            "folds": 5,
            "class_weight_mode": "inverse_frequency",  # inverse_frequency / uniform
            "log_every": 1,          # 何エポックごとにログを出すか
        },

        # 1ツリーへの過学習確認（学習できることの確認用）
        "overfit": {
            "epochs": 200,
            "class_weight_mode": "uniform",  # 全枝を同じ重みで数える
            "batch_size": 4,                 # CNNのみ
            "lr": {
                "cnn": 5e-3,
                "gat": 5e-3,
                "gats": 5e-3,
                "gcn": 1e-2,
                "gin": 5e-3,
                "sage": 5e-3,
                "spgnn": 5e-3,
            },
        },

        # 合成ツリー生成
        "synth": {
            "depth": 4,                      # 区域枝以下の最大世代数（区域枝を含む）
            "extension_probability": 0.35,   # 亜区域枝が分岐する確率
            "missing_probability": 0.0,      # 区域枝が欠損する確率（0〜0.3）
            "angle_jitter": 0.15,            # 接合点の横方向の揺らぎ（枝間隔に対する比）
            "length_jitter": 0.1,            # 枝長の揺らぎ（比）
            "spacing": (0.625, 0.625, 0.5),
            "max_attempts": 64,              # 配置に失敗したときの再試行回数
        },

        # ワーカー関連
        "workers": {
            "max_concurrent": 4,  # 同時実行ワーカーの最大数
            "batch_size": 16,     # バッチ処理サイズ
            "progress_update_interval_ms": 500,  # 進捗更新間隔（ミリ秒）
        },

        # パッチキャッシュ
        "cache": {
            "memory_limit": 4096,  # メモリ内に保持するパッチ数
        },

        # メモリ管理
        "memory": {
            "threshold_percent": 80,  # 最適化を開始するメモリ使用率閾値
            "auto_optimize": True,    # 自動メモリ最適化
        },
    }

    def __init__(self, config_file: Optional[str] = None):
        """
        設定を初期化

        Args:
            config_file: マージするJSON設定ファイルのパス（省略時はデフォルトのみ）
        """
        # デフォルト設定をコピー
        self._config = copy.deepcopy(self.DEFAULT_CONFIG)
        self._config_file = config_file

        if config_file is not None:
            self.load(config_file)

        logger.debug(f"設定を初期化: {config_file or '(defaults)'}")

    def get(self, key_path: str, default: Any = None) -> Any:
        """
        設定値を取得

        Args:
            key_path: ドット区切りのキーパス (例: "train.lr")
            default: キーが存在しない場合のデフォルト値

        Returns:
            設定値、またはデフォルト値
        """
        parts = key_path.split('.')
        current: Any = self._config

        for part in parts:
            if isinstance(current, dict) and part in current:
                current = current[part]
            else:
                return default
        return current

    def set(self, key_path: str, value: Any) -> bool:
        """
        設定値を変更

        Args:
            key_path: ドット区切りのキーパス (例: "train.lr")
            value: 新しい設定値

        Returns:
            bool: 成功した場合はTrue
        """
        parts = key_path.split('.')
        current = self._config

        try:
            # 最後のキー以外をたどる
            for part in parts[:-1]:
                if part not in current or not isinstance(current[part], dict):
                    current[part] = {}
                current = current[part]

            # 最後のキーに値を設定
            current[parts[-1]] = value
            logger.debug(f"設定を更新: {key_path} = {value}")
            return True
        except TypeError as e:
            logger.error(f"設定値の更新エラー: {key_path} = {value} - {e}")
            return False

    def apply_overrides(self, overrides: Dict[str, Any]) -> None:
        """
        CLIフラグなどの上書きを適用する（値がNoneのキーは無視）

        Args:
            overrides: ドット区切りキーパス → 値 の辞書
        """
        for key_path, value in overrides.items():
            if value is None:
                continue
            self.set(key_path, value)

    def load(self, config_file: str) -> None:
        """
        JSON設定ファイルを読み込んで現在の設定にマージする

        Args:
            config_file: 設定ファイルのパス

        Raises:
            ConfigError: ファイルが存在しない、またはJSONとして不正な場合
        """
        if not os.path.exists(config_file):
            raise ConfigError(f"config file not found: {config_file}")

        try:
            with open(config_file, 'r', encoding='utf-8') as f:
                loaded_config = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"invalid config file {config_file}: {e}") from e

        if not isinstance(loaded_config, dict):
            raise ConfigError(f"config file must hold a JSON object: {config_file}")

        # 読み込んだ設定を現在の設定にマージ
        self._merge_config(self._config, loaded_config)
        logger.info(f"設定を読み込みました: {config_file}")

    def save(self, path: str, extra: Optional[Dict[str, Any]] = None) -> str:
        """
        解決済みの設定をファイルに保存する

        Args:
            path: 出力パス（ディレクトリを渡した場合は config.json を作る）
            extra: 一緒に保存する追加情報（サブコマンド名と引数など）

        Returns:
            str: 書き込んだファイルのパス
        """
        if os.path.isdir(path):
            path = os.path.join(path, "config.json")
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)

        # タプルをリストに変換（JSONシリアライズのため）
        document = self._convert_tuples_to_lists(self._config)
        if extra:
            document = {"run": self._convert_tuples_to_lists(extra), **document}

        with open(path, 'w', encoding='utf-8') as f:
            json.dump(document, f, ensure_ascii=False, indent=2, sort_keys=True)
            f.write("\n")

        logger.info(f"設定を保存しました: {path}")
        return path

    def snapshot(self) -> Dict[str, Any]:
        """現在の設定のJSON互換コピーを返す"""
        return self._convert_tuples_to_lists(self._config)

    def _convert_tuples_to_lists(self, obj: Any) -> Any:
        """
        オブジェクト内のタプルをリストに変換（JSONシリアライズのため）

        Args:
            obj: 変換するオブジェクト

        Returns:
            変換後のオブジェクト
        """
        if isinstance(obj, (tuple, list)):
            return [self._convert_tuples_to_lists(item) for item in obj]
        elif isinstance(obj, dict):
            return {key: self._convert_tuples_to_lists(value) for key, value in obj.items()}
        else:
            return obj

    def reset(self) -> None:
        """設定をデフォルト値にリセット"""
        self._config = copy.deepcopy(self.DEFAULT_CONFIG)
        logger.info("設定をデフォルト値にリセットしました")

    def _merge_config(self, target: Dict[str, Any], source: Dict[str, Any]) -> None:
        """
        設定を再帰的にマージ

        Args:
            target: マージ先の辞書
            source: マージ元の辞書
        """
        for key, value in source.items():
            if key in target and isinstance(target[key], dict) and isinstance(value, dict):
                # 両方が辞書の場合は再帰的にマージ
                self._merge_config(target[key], value)
            else:
                # それ以外の場合は値を上書き
                target[key] = value

    def get_target_spacing(self) -> tuple:
        """再サンプリング先のボクセル間隔を返す"""
        spacing = tuple(float(s) for s in self.get("volume.target_spacing"))
        if len(spacing) != 3 or min(spacing) <= 0:
            raise ConfigError(f"volume.target_spacing must be 3 positive reals: {spacing}")
        return spacing


# 設定インスタンスのシングルトン
_instance: Optional[Config] = None


def get_config() -> Config:
    """
    設定インスタンスを取得

    Returns:
        Config: 設定インスタンス
    """
    global _instance
    if _instance is None:
        _instance = Config()
    return _instance


def set_config(config: Config) -> None:
    """CLIが解決した設定をシングルトンとして登録する"""
    global _instance
    _instance = config


def reset_config() -> None:
    """設定をデフォルト値にリセット"""
    get_config().reset()


# エクスポートする関数とクラス
__all__ = ['Config', 'get_config', 'set_config', 'reset_config']
