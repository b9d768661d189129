"""
例外定義モジュール

パイプラインの各段階が送出する例外クラスをまとめます。
CLIは AirwayLabelerError を1行の診断メッセージに変換します。
"""


class AirwayLabelerError(Exception):
    """すべてのパイプライン例外の基底クラス"""
    pass


class VolumeFormatError(AirwayLabelerError):
    """MetaImageヘッダーやrawペイロードが対応サブセットに合わない"""
    pass


class GraphError(AirwayLabelerError):
    """未知のノード、非連結グラフ、不完全なアンカー指定など"""
    pass


class ShapeError(AirwayLabelerError, ValueError):
    """テンソルやネットワークの形状不一致"""
    pass


class AutodiffError(AirwayLabelerError):
    """逆伝播できない損失（非スカラー、計算グラフから切り離されている）"""
    pass


class ConfigError(AirwayLabelerError, ValueError):
    """設定値の範囲外、またはCLIフラグの矛盾"""
    pass


class CheckpointError(AirwayLabelerError):
    """チェックポイントコンテナの破損（マジック、バージョン、長さ）"""
    pass


class GenerationError(AirwayLabelerError):
    """合成ツリーの仕様が不正、または形状を配置できない"""
    pass


class CorpusError(AirwayLabelerError):
    """コーパスのマニフェストや特徴ディレクトリが不正"""
    pass


__all__ = [
    'AirwayLabelerError', 'VolumeFormatError', 'GraphError', 'ShapeError',
    'AutodiffError', 'ConfigError', 'CheckpointError', 'GenerationError', 'CorpusError',
]
