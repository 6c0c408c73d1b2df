"""
カウンタベース乱数生成器。

全ての乱数は (seed, ストリーム名...) から Philox で決定的に導出します。
同じ引数からは、呼び出し順やスレッドに関係なく同じ系列が得られます。
"""

import zlib
from typing import Union

import numpy as np

StreamKey = Union[int, str]


def _key(part: StreamKey) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    if part < 0:
        raise ValueError(f"stream key must be non-negative, is {part}")
    return int(part)


def make_rng(seed: int, *stream: StreamKey) -> np.random.Generator:
    """
    名前付きストリームの乱数生成器を返す。

    例: `make_rng(42, "init", "stage1.block0.expand")`
    """
    entropy = [_key(seed)] + [_key(part) for part in stream]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
