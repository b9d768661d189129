"""
チェックポイントモジュール

名前付きテンソルをバイナリコンテナ（SPGN形式）に保存し、
設定・シード・エポックはJSONのサイドカー（<ckpt>.json）に書きます。

コンテナ形式（すべてリトルエンディアン）:
    "SPGN" | u32 version | u32 count |
    count × ( u16 name_len | name(UTF-8) | u8 ndim | u32 dims[ndim] | f32 payload )
"""
import json
import os
import struct
from dataclasses import dataclass, field
from typing import Any, Dict, Mapping, Tuple

import numpy as np

from utils import logger, CheckpointError

MAGIC = b"SPGN"
VERSION = 1


@dataclass
class Checkpoint:
    """名前付きテンソルとメタデータ（kind, config, seed, epoch）"""
    tensors: Dict[str, np.ndarray]
    kind: str = "gnn"
    config: Dict[str, Any] = field(default_factory=dict)
    seed: int = 0
    epoch: int = 0

    def metadata(self) -> Dict[str, Any]:
        return {"kind": self.kind, "config": self.config, "seed": self.seed, "epoch": self.epoch}


def encode_tensors(tensors: Mapping[str, np.ndarray]) -> bytes:
    """テンソル辞書をコンテナのバイト列にする（辞書の順序を保つ）"""
    chunks = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, value in tensors.items():
        array = np.ascontiguousarray(value, dtype="<f4")
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name[:32]}...")
        if array.ndim > 0xFF:
            raise CheckpointError(f"tensor {name} has too many dimensions")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", array.ndim))
        chunks.append(struct.pack(f"<{array.ndim}I", *array.shape))
        chunks.append(array.tobytes())
    return b"".join(chunks)


def _take(buffer: bytes, offset: int, size: int) -> Tuple[bytes, int]:
    end = offset + size
    if end > len(buffer):
        raise CheckpointError("checkpoint is truncated")
    return buffer[offset:end], end


def decode_tensors(buffer: bytes) -> Dict[str, np.ndarray]:
    """
    コンテナのバイト列からテンソル辞書を復元する

    Raises:
        CheckpointError: マジック・バージョンの不一致、途中で切れている、余分なバイトがある
    """
    magic, offset = _take(buffer, 0, 4)
    if magic != MAGIC:
        raise CheckpointError(f"bad checkpoint magic: {magic!r}")
    raw, offset = _take(buffer, offset, 8)
    version, count = struct.unpack("<II", raw)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version: {version}")

    tensors: Dict[str, np.ndarray] = {}
    for _ in range(count):
        raw, offset = _take(buffer, offset, 2)
        (name_len,) = struct.unpack("<H", raw)
        raw, offset = _take(buffer, offset, name_len)
        try:
            name = raw.decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointError(f"tensor name is not UTF-8: {e}") from e
        raw, offset = _take(buffer, offset, 1)
        (ndim,) = struct.unpack("<B", raw)
        raw, offset = _take(buffer, offset, 4 * ndim)
        shape = struct.unpack(f"<{ndim}I", raw)
        raw, offset = _take(buffer, offset, 4 * int(np.prod(shape, dtype=np.int64)))
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)

    if offset != len(buffer):
        raise CheckpointError(f"checkpoint has {len(buffer) - offset} trailing bytes")
    return tensors


def sidecar_path(path: str) -> str:
    return path + ".json"


def save_checkpoint(checkpoint: Checkpoint, path: str) -> str:
    """
    チェックポイントを保存する（バイナリ本体 + JSONサイドカー）

    Returns:
        str: 書き込んだバイナリのパス
    """
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as f:
        f.write(encode_tensors(checkpoint.tensors))
    with open(sidecar_path(path), "w", encoding="utf-8") as f:
        json.dump(checkpoint.metadata(), f, indent=2, sort_keys=True)
        f.write("\n")
    logger.info(f"チェックポイントを保存: {path} ({len(checkpoint.tensors)} tensors, epoch {checkpoint.epoch})")
    return path


def load_checkpoint(path: str) -> Checkpoint:
    """
    チェックポイントを読み込む

    Raises:
        CheckpointError: ファイルが無い、またはコンテナ・サイドカーが壊れている
    """
    if not os.path.exists(path):
        raise CheckpointError(f"checkpoint not found: {path}")
    with open(path, "rb") as f:
        tensors = decode_tensors(f.read())

    meta: Dict[str, Any] = {}
    side = sidecar_path(path)
    if os.path.exists(side):
        with open(side, "r", encoding="utf-8") as f:
            try:
                meta = json.load(f)
            except json.JSONDecodeError as e:
                raise CheckpointError(f"invalid checkpoint sidecar {side}: {e}") from e

    logger.debug(f"チェックポイントを読み込み: {path} ({len(tensors)} tensors)")
    return Checkpoint(
        tensors=tensors,
        kind=str(meta.get("kind", "gnn")),
        config=dict(meta.get("config", {})),
        seed=int(meta.get("seed", 0)),
        epoch=int(meta.get("epoch", 0)),
    )


__all__ = [
    'Checkpoint', 'MAGIC', 'VERSION', 'encode_tensors', 'decode_tensors',
    'save_checkpoint', 'load_checkpoint', 'sidecar_path',
]
