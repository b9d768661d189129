"""
解剖学的クラス定義モジュール

22クラスの順序、18区域枝、名前とインデックスの対応を定義します。
クラスの並びは確率行列の列順であり、重み付きカッパの順序でもあります。
"""
from typing import Dict, List, Optional

CLASS_NAMES: List[str] = [
    "trachea", "left_main", "right_main",
    "LB1+2", "LB3", "LB4", "LB5", "LB6", "LB7+8", "LB9", "LB10",
    "RB1", "RB2", "RB3", "RB4", "RB5", "RB6", "RB7", "RB8", "RB9", "RB10",
    "other",
]

NUM_CLASSES = len(CLASS_NAMES)  # 22

TRACHEA = 0
LEFT_MAIN = 1
RIGHT_MAIN = 2
OTHER = NUM_CLASSES - 1

# 区域枝（分類対象）の列インデックス 3..20
SEGMENTAL_CLASSES: List[int] = list(range(3, 21))

# 名前付きクラス（気管、主気管支2本、区域枝18本）
NAMED_CLASSES: List[int] = list(range(0, 21))

NUM_ANCHORS = 3 + 2 * len(SEGMENTAL_CLASSES)  # 39

CLASS_INDEX: Dict[str, int] = {name: index for index, name in enumerate(CLASS_NAMES)}

# 区域枝が属する肺葉
LOBE_OF_CLASS: Dict[int, str] = {
    CLASS_INDEX["LB1+2"]: "LUL", CLASS_INDEX["LB3"]: "LUL",
    CLASS_INDEX["LB4"]: "LUL", CLASS_INDEX["LB5"]: "LUL",
    CLASS_INDEX["LB6"]: "LLL", CLASS_INDEX["LB7+8"]: "LLL",
    CLASS_INDEX["LB9"]: "LLL", CLASS_INDEX["LB10"]: "LLL",
    CLASS_INDEX["RB1"]: "RUL", CLASS_INDEX["RB2"]: "RUL", CLASS_INDEX["RB3"]: "RUL",
    CLASS_INDEX["RB4"]: "RML", CLASS_INDEX["RB5"]: "RML",
    CLASS_INDEX["RB6"]: "RLL", CLASS_INDEX["RB7"]: "RLL", CLASS_INDEX["RB8"]: "RLL",
    CLASS_INDEX["RB9"]: "RLL", CLASS_INDEX["RB10"]: "RLL",
}


def class_name(index: Optional[int]) -> Optional[str]:
    """クラスインデックスを名前に変換（Noneはそのまま）"""
    if index is None:
        return None
    if not 0 <= index < NUM_CLASSES:
        raise ValueError(f"class index out of range: {index}")
    return CLASS_NAMES[index]


def class_index(name: Optional[str]) -> Optional[int]:
    """クラス名をインデックスに変換（Noneはそのまま）"""
    if name is None:
        return None
    try:
        return CLASS_INDEX[name]
    except KeyError:
        raise ValueError(f"unknown class name: {name}") from None


__all__ = [
    'CLASS_NAMES', 'NUM_CLASSES', 'TRACHEA', 'LEFT_MAIN', 'RIGHT_MAIN', 'OTHER',
    'SEGMENTAL_CLASSES', 'NAMED_CLASSES', 'NUM_ANCHORS', 'CLASS_INDEX',
    'LOBE_OF_CLASS', 'class_name', 'class_index',
]
