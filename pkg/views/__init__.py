"""
ビューモジュールの初期化ファイル

評価レポート、特徴CSV、パッチプレビューの出力を担当するクラスを提供します。
"""
from .report_view import ReportView, format_class_table, write_json
from .feature_export import export_features_csv, read_features_csv, pca_reduce
from .patch_preview import PatchPreview

__all__ = [
    'ReportView',
    'format_class_table',
    'write_json',
    'export_features_csv',
    'read_features_csv',
    'pca_reduce',
    'PatchPreview',
]
