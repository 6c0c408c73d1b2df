"""
スイッチャブル・アトラス畳み込みの構成ブロック。

- `SwitchFunction`: 位置ごとのブレンド係数 S(x)（反射パディング 2 → 5×5 平均プーリング → 1×1 畳み込み）
- `GlobalContextBlock`: 特徴量へ加算する大域（または局所）コンテキスト項
- `SeBlock`: squeeze-and-excitation によるチャネル再重み付け
- `PlainDepthwise` / `DsacLayer` / `DapscLayer`: MBConv の中核となる深さ方向畳み込み
- `MbconvSac`: expand → core → (SE) → project → skip

ベースラインから変換した直後（スイッチ重み 0・バイアス 1、コンテキスト 0）は、
各ブロックの出力がベースラインと完全に一致します。
"""

from typing import Optional

import numpy as np

from . import functional as F
from .geometry import DEFAULT_RATE, GeometryQuery, same_padding
from .module import Conv2d, Module, kaiming_normal, parameter
from .tensor import ShapeError, Tensor

CORE_MODES = ("plain", "dsac", "dapsc")
GC_MODES = ("global", "local")

# スイッチ／局所コンテキストの前処理
SWITCH_POOL = 5
SWITCH_PAD = 2


def _require_spatial(x: Tensor, minimum: int, op: str) -> None:
    h, w = x.shape[2:]
    if h < minimum or w < minimum:
        raise ShapeError(f"{op}: spatial size ({h}, {w}) must be at least {minimum} on both axes")


def _require_channels(x: Tensor, channels: int, op: str) -> None:
    if x.ndim != 4 or x.shape[1] != channels:
        raise ShapeError(f"{op}: expected {channels} input channels, got shape {x.shape}")


def _local_pool(x: Tensor, stride: int = 1) -> Tensor:
    x = F.reflection_pad2d(x, SWITCH_PAD)
    return F.avg_pool2d(x, SWITCH_POOL, stride=stride, padding=0)


class SwitchFunction(Module):
    """
    スイッチ関数 S(x)。出力は 1 チャネルの生のアフィン写像（シグモイドなし）。

    初期状態は重み 0・バイアス 1 なので、任意の入力で S(x) ≡ 1 です。
    `stride` はブロックのストライドに合わせ、出力を枝の出力サイズに揃えます。
    """

    def __init__(self, channels: int, stride: int = 1):
        super().__init__()
        self.channels = channels
        self.stride = stride
        self.weight = parameter(np.zeros((1, channels, 1, 1)))
        self.bias = parameter(np.ones(1))

    def forward(self, x: Tensor) -> Tensor:
        _require_channels(x, self.channels, "switch")
        _require_spatial(x, SWITCH_PAD + 1, "switch")
        pooled = _local_pool(x, self.stride)
        return F.conv2d(pooled, F.ConvParams(weight=self.weight, bias=self.bias))


class GlobalContextBlock(Module):
    """
    コンテキスト項を返すブロック（加算は呼び出し側）。

    global: 大域平均プーリング → 1×1 畳み込み、(N, C, 1, 1) を返しブロードキャスト加算される
    local: 反射パディング 2 → 5×5 平均プーリング → 1×1 畳み込み、(N, C, H, W) を返す

    重み・バイアスとも 0 で初期化され、初期状態の寄与は厳密に 0 です。
    """

    def __init__(self, channels: int, mode: str = "global"):
        super().__init__()
        if mode not in GC_MODES:
            raise ValueError(f"global context mode must be one of {GC_MODES}, is {mode!r}")
        self.channels = channels
        self.mode = mode
        self.weight = parameter(np.zeros((channels, channels, 1, 1)))
        self.bias = parameter(np.zeros(channels))

    def forward(self, x: Tensor) -> Tensor:
        _require_channels(x, self.channels, "global_context")
        if self.mode == "global":
            pooled = F.global_avg_pool(x)
        else:
            _require_spatial(x, SWITCH_PAD + 1, "global_context(local)")
            pooled = _local_pool(x)
        return F.conv2d(pooled, F.ConvParams(weight=self.weight, bias=self.bias))


class SeBlock(Module):
    """x · sigmoid(expand(act(reduce(squeeze(x)))))"""

    def __init__(self,
                 channels: int,
                 ratio: int = 4,
                 activation: str = "swish",
                 rng: Optional[np.random.Generator] = None):
        super().__init__()
        if ratio < 1 or channels % ratio:
            raise ShapeError(f"SE: channels={channels} must be divisible by ratio={ratio}")
        self.channels = channels
        self.ratio = ratio
        self.activation = activation
        self.reduce = Conv2d(channels, channels // ratio, 1, rng=rng)
        self.expand = Conv2d(channels // ratio, channels, 1, rng=rng)

    def scales(self, x: Tensor) -> Tensor:
        """(N, C, 1, 1) のチャネル係数（値域は (0, 1)）"""
        act = F.activation(self.activation)
        return F.sigmoid(self.expand(act(self.reduce(F.global_avg_pool(x)))))

    def forward(self, x: Tensor) -> Tensor:
        _require_channels(x, self.channels, "se")
        return x * self.scales(x)


class _ContextCore(Module):
    """
    深さ方向重み `weight` と任意の前後コンテキスト（pre_gc / post_gc）を持つ中核の共通部。

    ベースラインの深さ方向畳み込みとパラメータ名 `weight` を共有するため、
    変換は名前の対応付けだけで行えます。
    """

    mode = "plain"

    def __init__(self,
                 channels: int,
                 kernel: int,
                 stride: int,
                 rate: int,
                 global_context: bool,
                 gc_mode: str,
                 out_channels: Optional[int] = None,
                 rng: Optional[np.random.Generator] = None):
        super().__init__()
        if kernel % 2 == 0 or kernel < 1:
            raise ShapeError(f"depthwise kernel must be odd and positive, is {kernel}")
        self.channels = channels
        self.out_channels = out_channels or channels
        self.kernel = kernel
        self.stride = stride
        self.rate = rate
        self.global_context = global_context
        self.gc_mode = gc_mode
        shape = (channels, 1, kernel, kernel)
        self.weight = parameter(kaiming_normal(rng, shape) if rng is not None else np.zeros(shape))
        if global_context:
            self.pre_gc = GlobalContextBlock(channels, gc_mode)
            self.post_gc = GlobalContextBlock(self.out_channels, gc_mode)

    def depthwise(self, x: Tensor, rate: int = 1) -> Tensor:
        """共有重みでの深さ方向畳み込み DConv(x, w, rate)（same パディング）"""
        h, w = x.shape[2:]
        rows = same_padding(GeometryQuery(k_s=self.kernel, a_r=rate, s_t=self.stride, i_s=h))
        cols = same_padding(GeometryQuery(k_s=self.kernel, a_r=rate, s_t=self.stride, i_s=w))
        return F.conv2d(x, F.ConvParams(weight=self.weight, stride=self.stride, padding=(rows, cols),
                                        dilation=rate, groups=self.channels))

    def pre(self, x: Tensor) -> Tensor:
        return x + self.pre_gc(x) if self.global_context else x

    def post(self, y: Tensor) -> Tensor:
        return y + self.post_gc(y) if self.global_context else y

    def blend(self, s: Tensor, branch_1: Tensor, branch_r: Tensor) -> Tensor:
        """s⊙branch_1 + (1 − s)⊙branch_r（s はチャネル方向にブロードキャスト）"""
        return s * branch_1 + (1.0 - s) * branch_r


class PlainDepthwise(_ContextCore):
    """
    ベースラインの深さ方向畳み込み。`global_context=True` で
    x' = x + PrG(x), y = DConv(x', w, 1), y + PoG(y) になります。
    """

    mode = "plain"

    def __init__(self,
                 channels: int,
                 kernel: int = 3,
                 stride: int = 1,
                 global_context: bool = False,
                 gc_mode: str = "global",
                 rng: Optional[np.random.Generator] = None):
        super().__init__(channels, kernel, stride, 1, global_context, gc_mode, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        _require_channels(x, self.channels, "depthwise")
        return self.post(self.depthwise(self.pre(x), 1))


class DsacLayer(_ContextCore):
    """
    深さ方向スイッチャブル・アトラス畳み込み。

        x' = x + PrG(x)
        y  = S(x')⊙DConv(x', w, 1) + (1 − S(x'))⊙DConv(x', w, r)
        out = y + PoG(y)

    両枝は同じ重み `w` を参照します。
    """

    mode = "dsac"

    def __init__(self,
                 channels: int,
                 kernel: int = 3,
                 stride: int = 1,
                 rate: int = DEFAULT_RATE,
                 global_context: bool = True,
                 gc_mode: str = "global",
                 rng: Optional[np.random.Generator] = None):
        super().__init__(channels, kernel, stride, rate, global_context, gc_mode, rng=rng)
        self.switch = SwitchFunction(channels, stride)

    def forward(self, x: Tensor) -> Tensor:
        _require_channels(x, self.channels, "dsac")
        x = self.pre(x)
        s = self.switch(x)
        return self.post(self.blend(s, self.depthwise(x, 1), self.depthwise(x, self.rate)))


class DapscLayer(_ContextCore):
    """
    スイッチを pointwise 段の後ろに置く変種。

        branch_k = PConv(SE(act(DConv(x', w, k))))   k ∈ {1, r}
        out = S(x')⊙branch_1 + (1 − S(x'))⊙branch_r  （前後コンテキストは DsacLayer と同じ）

    SE と pointwise の重みは両枝で共有されます。
    単体で使う場合の既定は活性化なし（`activation=None`）です。
    """

    mode = "dapsc"

    def __init__(self,
                 channels: int,
                 out_channels: int,
                 kernel: int = 3,
                 stride: int = 1,
                 rate: int = DEFAULT_RATE,
                 global_context: bool = True,
                 gc_mode: str = "global",
                 activation: Optional[str] = None,
                 se_ratio: int = 4,
                 rng: Optional[np.random.Generator] = None):
        super().__init__(channels, kernel, stride, rate, global_context, gc_mode,
                         out_channels=out_channels, rng=rng)
        self.activation = activation
        self.switch = SwitchFunction(channels, stride)
        self.se = SeBlock(channels, se_ratio, activation or "swish", rng=rng)
        self.project = Conv2d(channels, out_channels, 1, rng=rng)

    def branch(self, x: Tensor, rate: int) -> Tensor:
        act = F.activation(self.activation)
        return self.project(self.se(act(self.depthwise(x, rate))))

    def forward(self, x: Tensor) -> Tensor:
        _require_channels(x, self.channels, "dapsc")
        x = self.pre(x)
        s = self.switch(x)
        return self.post(self.blend(s, self.branch(x, 1), self.branch(x, self.rate)))


class MbconvSac(Module):
    """
    MBConv ブロック。

    expand 1×1 → act → core → (act → SE → project 1×1) → skip

    core が `dapsc` の場合、活性化・SE・project は core 内部に移ります。
    skip は stride 1 かつ入出力チャネル数が等しい場合のみ加算します。
    expand_ratio = 1 では expand 層を持ちません。
    """

    def __init__(self,
                 in_channels: int,
                 out_channels: int,
                 expand_ratio: int = 1,
                 kernel: int = 3,
                 stride: int = 1,
                 core: str = "plain",
                 global_context: bool = False,
                 gc_mode: str = "global",
                 rate: int = DEFAULT_RATE,
                 activation: str = "swish",
                 se_ratio: int = 4,
                 rng: Optional[np.random.Generator] = None):
        super().__init__()
        if core not in CORE_MODES:
            raise ValueError(f"core must be one of {CORE_MODES}, is {core!r}")
        if stride not in (1, 2):
            raise ValueError(f"MBConv stride must be 1 or 2, is {stride}")
        hidden = in_channels * expand_ratio
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.expand_ratio = expand_ratio
        self.kernel = kernel
        self.stride = stride
        self.activation = activation
        self.se_ratio = se_ratio
        self.skip = stride == 1 and in_channels == out_channels

        if expand_ratio != 1:
            self.expand = Conv2d(in_channels, hidden, 1, rng=rng)
        if core == "plain":
            self.core = PlainDepthwise(hidden, kernel, stride, global_context, gc_mode, rng=rng)
        elif core == "dsac":
            self.core = DsacLayer(hidden, kernel, stride, rate, global_context, gc_mode, rng=rng)
        else:
            self.core = DapscLayer(hidden, out_channels, kernel, stride, rate, global_context, gc_mode,
                                   activation=activation, se_ratio=se_ratio, rng=rng)
        if core != "dapsc":
            self.se = SeBlock(hidden, se_ratio, activation, rng=rng)
            self.project = Conv2d(hidden, out_channels, 1, rng=rng)

    @property
    def core_mode(self) -> str:
        return self.core.mode

    def forward(self, x: Tensor) -> Tensor:
        _require_channels(x, self.in_channels, "mbconv")
        act = F.activation(self.activation)
        h = act(self.expand(x)) if self.expand_ratio != 1 else x
        h = self.core(h)
        if self.core.mode != "dapsc":
            h = self.project(self.se(act(h)))
        return x + h if self.skip else h
