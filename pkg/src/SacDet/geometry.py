"""
アトラス畳み込みの幾何計算。

実効カーネルサイズ、same パディング、ベースラインからの変換計画を
純粋関数として提供します。
"""

import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

# 変換対象にできる深さ方向カーネル
SUPPORTED_KERNELS = (3, 5)

# 変換時の既定アトラスレート
DEFAULT_RATE = 3


class GeometryError(ValueError):
    """幾何クエリが不正、または変換できないカーネルの場合に発生する例外"""
    pass


@dataclass(frozen=True)
class GeometryQuery:
    """
    幾何クエリ。

    k_s: 基本カーネルサイズ（正の奇数）
    a_r: アトラスレート
    s_t: ストライド
    i_s: 入力の空間サイズ
    """

    k_s: int
    a_r: int = 1
    s_t: int = 1
    i_s: int = 64

    def __post_init__(self):
        for name in ("k_s", "a_r", "s_t", "i_s"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise GeometryError(f"{name} must be a positive integer, is {value!r}")
        if self.k_s % 2 == 0:
            raise GeometryError(f"k_s must be odd, is {self.k_s}")


@dataclass(frozen=True)
class GeometryResult:
    k_d: int
    pad: Tuple[int, int]

    def to_dict(self) -> dict:
        return {"k_d": self.k_d, "pad": list(self.pad)}


def effective_kernel(q: GeometryQuery) -> int:
    """k_d = 1 + a_r·(k_s − 1)"""
    return 1 + q.a_r * (q.k_s - 1)


def same_padding(q: GeometryQuery) -> Tuple[int, int]:
    """
    出力サイズが ceil(i_s / s_t) になる (左, 右) パディングを返す。

    総量 T = (ceil(i_s/s_t) − 1)·s_t + k_d − i_s を (floor(T/2), ceil(T/2)) に分けます。
    ストライド 1 では T = k_d − 1 となり i_s に依存しません。

    Raises:
        GeometryError: T < 0（カーネルがストライドの被覆より小さい）の場合
    """
    k_d = effective_kernel(q)
    out = math.ceil(q.i_s / q.s_t)
    total = (out - 1) * q.s_t + k_d - q.i_s
    if total < 0:
        raise GeometryError(
            f"negative total padding {total} for k_d={k_d}, stride={q.s_t}, input={q.i_s}")
    return total // 2, total - total // 2


def resolve(q: GeometryQuery) -> GeometryResult:
    return GeometryResult(k_d=effective_kernel(q), pad=same_padding(q))


def plan_conversion(layers: Sequence[Sequence[int]], rate: int = DEFAULT_RATE) -> List[Tuple[int, Tuple[int, int]]]:
    """
    深さ方向畳み込み層の列に、アトラスレートとパディングを割り当てる。

    Args:
        layers: (カーネルサイズ, ストライド) または (カーネルサイズ, ストライド, 入力サイズ) の列。
            入力サイズ省略時は 64 とします（ストライド 1 では結果に影響しません）。
        rate: 割り当てるアトラスレート

    Returns:
        各層の (レート, (左, 右)パディング)

    Raises:
        GeometryError: カーネルサイズが 3 / 5 以外の場合
    """
    plan = []
    for index, layer in enumerate(layers):
        kernel, stride = int(layer[0]), int(layer[1])
        size = int(layer[2]) if len(layer) > 2 else 64
        if kernel not in SUPPORTED_KERNELS:
            raise GeometryError(
                f"layer {index}: kernel size {kernel} is not convertible, supported: {list(SUPPORTED_KERNELS)}")
        q = GeometryQuery(k_s=kernel, a_r=rate, s_t=stride, i_s=size)
        plan.append((rate, same_padding(q)))
    return plan
