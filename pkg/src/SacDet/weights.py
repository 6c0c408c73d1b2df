"""
重みコンテナ（SACW 形式）の読み書き。

レイアウト（全てリトルエンディアン）:

    magic "SACW" | u32 version=1 | u32 tensor count
    各テンソル: u16 名前長 | UTF-8 名前 | u8 階数 | u32 dims[階数] | float32 データ

保存順は渡されたマッピングの順序のまま維持され、
load → save で同一バイト列が再現されます。
"""

import logging
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Mapping, Union

import numpy as np

logger = logging.getLogger(__name__)

MAGIC = b"SACW"
VERSION = 1

_HEADER = struct.Struct("<4sII")
_NAME_LEN = struct.Struct("<H")
_RANK = struct.Struct("<B")


class ContainerError(ValueError):
    """重みコンテナが壊れている、または期待する内容と一致しない場合に発生する例外"""
    pass


def encode_weights(tensors: Mapping[str, np.ndarray]) -> bytes:
    """テンソル群を SACW のバイト列に変換する"""
    parts = [_HEADER.pack(MAGIC, VERSION, len(tensors))]
    seen = set()
    for name, array in tensors.items():
        if name in seen:
            raise ContainerError(f"duplicate tensor name: {name}")
        seen.add(name)
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise ContainerError(f"tensor name too long: {name[:40]}...")
        array = np.asarray(array)
        if array.ndim > 0xFF:
            raise ContainerError(f"{name}: rank {array.ndim} exceeds 255")
        parts.append(_NAME_LEN.pack(len(encoded)))
        parts.append(encoded)
        parts.append(_RANK.pack(array.ndim))
        parts.append(struct.pack(f"<{array.ndim}I", *array.shape))
        parts.append(np.ascontiguousarray(array, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_weights(blob: bytes) -> "OrderedDict[str, np.ndarray]":
    """
    SACW のバイト列を名前順序付きの float32 配列群に戻す。

    Raises:
        ContainerError: マジック・バージョン不一致、途中で途切れている、名前の重複など
    """
    if len(blob) < _HEADER.size:
        raise ContainerError("container is shorter than its header")
    magic, version, count = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise ContainerError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")

    tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
    offset = _HEADER.size
    for index in range(count):
        name = f"<tensor #{index}>"
        try:
            (name_len,) = _NAME_LEN.unpack_from(blob, offset)
            offset += _NAME_LEN.size
            raw_name = blob[offset:offset + name_len]
            if len(raw_name) != name_len:
                raise ContainerError(f"{name}: truncated name")
            name = raw_name.decode("utf-8")
            offset += name_len
            (rank,) = _RANK.unpack_from(blob, offset)
            offset += _RANK.size
            dims = struct.unpack_from(f"<{rank}I", blob, offset)
            offset += 4 * rank
        except (struct.error, UnicodeDecodeError) as e:
            raise ContainerError(f"{name}: malformed tensor header ({e})") from None
        n_bytes = 4 * int(np.prod(dims, dtype=np.int64))
        if offset + n_bytes > len(blob):
            raise ContainerError(f"{name}: data truncated, expected {n_bytes} bytes")
        if name in tensors:
            raise ContainerError(f"duplicate tensor name: {name}")
        data = np.frombuffer(blob, dtype="<f4", count=n_bytes // 4, offset=offset)
        tensors[name] = data.reshape(dims).astype(np.float32)
        offset += n_bytes
    if offset != len(blob):
        raise ContainerError(f"{len(blob) - offset} trailing bytes after {count} tensors")
    return tensors


def save_weights(path: Union[str, Path], tensors: Mapping[str, np.ndarray]) -> Path:
    path = Path(path)
    blob = encode_weights(tensors)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(blob)
    except OSError as e:
        raise OSError(f"重みを書き込めません: {path} ({e})") from e
    logger.debug(f"重みを保存: {path} ({len(tensors)} テンソル, {len(blob)} bytes)")
    return path


def load_weights(path: Union[str, Path]) -> "OrderedDict[str, np.ndarray]":
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"重みファイルが見つかりません: {path}")
    tensors = decode_weights(path.read_bytes())
    logger.debug(f"重みを読み込み: {path} ({len(tensors)} テンソル)")
    return tensors
