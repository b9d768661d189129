"""
パッチプレビューモジュール

3値パッチの3つの直交する中央断面を並べたPNG画像を作ります。
"""
import os
from typing import List, Optional

import numpy as np
from PIL import Image

from utils import logger, ShapeError
from models.label_map import BranchPatch, PATCH_CENTER_VALUE

GAP = 2


def slice_to_gray(values: np.ndarray) -> np.ndarray:
    """パッチ値（0.0 / 0.5 / 0.9）を 0..255 の階調に変換する（0.9 が白）"""
    scaled = np.clip(np.asarray(values, dtype=np.float64) / float(PATCH_CENTER_VALUE), 0.0, 1.0)
    return np.rint(scaled * 255.0).astype(np.uint8)


def mid_slices(values: np.ndarray) -> List[np.ndarray]:
    """i, j, k 各軸の中央断面"""
    values = np.asarray(values)
    if values.ndim != 3:
        raise ShapeError(f"patch must be 3-D, got shape {values.shape}")
    ci, cj, ck = (n // 2 for n in values.shape)
    return [values[ci, :, :], values[:, cj, :], values[:, :, ck]]


class PatchPreview:
    """
    パッチのプレビュー画像を作るクラス

    Attributes:
        scale: 1ボクセルあたりのピクセル数
    """

    def __init__(self, scale: int = 4):
        if scale < 1:
            raise ValueError(f"preview scale must be >= 1, got {scale}")
        self.scale = scale

    def render(self, patch: BranchPatch) -> Image.Image:
        """3つの断面を横に並べたグレースケール画像"""
        tiles = []
        for section in mid_slices(patch.values):
            # 行 = 画像の縦方向
            tile = Image.fromarray(slice_to_gray(section.T))
            tiles.append(tile.resize((tile.width * self.scale, tile.height * self.scale), Image.NEAREST))

        width = sum(t.width for t in tiles) + GAP * (len(tiles) - 1)
        height = max(t.height for t in tiles)
        montage = Image.new("L", (width, height), color=0)
        x = 0
        for tile in tiles:
            montage.paste(tile, (x, 0))
            x += tile.width + GAP
        return montage

    def save(self, patch: BranchPatch, path: str, image: Optional[Image.Image] = None) -> str:
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        image = image or self.render(patch)
        image.save(path, format="PNG")
        logger.info(f"プレビューを保存: {path} (branch {patch.center_branch}, center {patch.center})")
        return path


__all__ = ['PatchPreview', 'slice_to_gray', 'mid_slices']
