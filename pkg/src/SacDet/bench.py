"""
中核層のマイクロベンチマーク。

plain / dsac / dapsc の深さ方向中核について、conv2d の乗算回数（解析値）と
forward / backward のスループット（出力要素数 / 秒）を測ります。
"""

import logging
import time
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from ._prng import make_rng
from .blocks import CORE_MODES, DapscLayer, DsacLayer, PlainDepthwise
from .functional import count_multiplies
from .geometry import DEFAULT_RATE
from .module import Module
from .tensor import Tensor, backward

logger = logging.getLogger(__name__)


@dataclass
class BenchResult:
    core: str
    multiplies: int
    elements: int
    forward_seconds: float
    backward_seconds: float
    repeats: int

    @property
    def forward_throughput(self) -> float:
        """出力要素数 / 秒（forward のみ）"""
        return self.elements * self.repeats / self.forward_seconds if self.forward_seconds > 0 else float("inf")

    @property
    def backward_throughput(self) -> float:
        return self.elements * self.repeats / self.backward_seconds if self.backward_seconds > 0 else float("inf")

    def to_dict(self) -> dict:
        data = asdict(self)
        data["forward_elements_per_sec"] = self.forward_throughput
        data["backward_elements_per_sec"] = self.backward_throughput
        return data


def build_core(core: str,
               channels: int,
               kernel: int = 3,
               rate: int = DEFAULT_RATE,
               global_context: bool = False,
               seed: int = 0) -> Module:
    if core not in CORE_MODES:
        raise ValueError(f"core must be one of {CORE_MODES}, is {core!r}")
    rng = make_rng(seed, "bench", core)
    if core == "plain":
        return PlainDepthwise(channels, kernel, 1, global_context, rng=rng)
    if core == "dsac":
        return DsacLayer(channels, kernel, 1, rate, global_context, rng=rng)
    return DapscLayer(channels, channels, kernel, 1, rate, global_context, activation="swish", rng=rng)


def bench_core(core: str,
               channels: int = 32,
               size: int = 32,
               batch: int = 4,
               repeats: int = 3,
               kernel: int = 3,
               global_context: bool = False,
               seed: int = 0) -> BenchResult:
    """
    1 つの中核を計測する。乗算回数は forward 1 回分（バッチ全体）。

    Raises:
        ValueError: 未知の中核、または repeats < 1
    """
    if repeats < 1:
        raise ValueError(f"repeats must be >= 1, is {repeats}")
    layer = build_core(core, channels, kernel, global_context=global_context, seed=seed)
    rng = make_rng(seed, "bench", "input")
    x = Tensor(rng.standard_normal((batch, channels, size, size)).astype(np.float32), requires_grad=True)

    with count_multiplies() as counted:
        out = layer(x)
    elements = out.size

    forward_seconds = 0.0
    backward_seconds = 0.0
    for _ in range(repeats):
        layer.zero_grad()
        x.zero_grad()
        started = time.perf_counter()
        out = layer(x)
        forward_seconds += time.perf_counter() - started
        started = time.perf_counter()
        backward(out.sum())
        backward_seconds += time.perf_counter() - started

    result = BenchResult(core=core, multiplies=counted.total, elements=elements,
                         forward_seconds=forward_seconds, backward_seconds=backward_seconds, repeats=repeats)
    logger.info(f"bench {core}: {result.multiplies:,} 乗算, forward {result.forward_throughput:,.0f} 要素/秒, "
                f"backward {result.backward_throughput:,.0f} 要素/秒")
    return result


def compare_cores(cores: Sequence[str] = CORE_MODES, baseline: Optional[str] = "plain", **kwargs) -> pd.DataFrame:
    """
    複数の中核を計測し、baseline に対する乗算回数比・スループット比を付けた表を返す。
    """
    rows = [bench_core(core, **kwargs).to_dict() for core in cores]
    frame = pd.DataFrame(rows).set_index("core")
    if baseline is not None and baseline in frame.index:
        base = frame.loc[baseline]
        frame["multiply_ratio"] = frame["multiplies"] / base["multiplies"]
        frame["forward_speed_ratio"] = frame["forward_elements_per_sec"] / base["forward_elements_per_sec"]
    return frame
