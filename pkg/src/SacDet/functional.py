"""
微分可能プリミティブ。

畳み込み（グループ・膨張対応）、プーリング、反射パディング、
活性化関数、ブロードキャスト演算、縮約、形状変換を提供します。
畳み込みは相互相関（カーネル反転なし）です。
"""

import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .tensor import Function, ShapeError, Tensor, as_tensor

logger = logging.getLogger(__name__)

Pair = Tuple[int, int]
PaddingSpec = Union[int, Pair, Tuple[Pair, Pair]]

_counter = threading.local()


# =============================================================================
# 乗算回数カウンタ（bench 用）
# =============================================================================

class MultiplyCount:
    """`count_multiplies()` ブロック内で実行された conv2d の乗算回数"""

    def __init__(self):
        self.total = 0


@contextmanager
def count_multiplies():
    """ブロック内の conv2d の乗算回数を数える"""
    count = MultiplyCount()
    previous = getattr(_counter, "active", None)
    _counter.active = count
    try:
        yield count
    finally:
        _counter.active = previous


# =============================================================================
# 引数の正規化
# =============================================================================

def _pair(value, name: str) -> Pair:
    if isinstance(value, (int, np.integer)):
        return int(value), int(value)
    a, b = value
    return int(a), int(b)


def _padding(value: PaddingSpec) -> Tuple[Pair, Pair]:
    """int / (ph, pw) / ((top, bottom), (left, right)) を辺ごとのペアに正規化する"""
    if isinstance(value, (int, np.integer)):
        return (int(value), int(value)), (int(value), int(value))
    ph, pw = value
    ph = (int(ph), int(ph)) if isinstance(ph, (int, np.integer)) else (int(ph[0]), int(ph[1]))
    pw = (int(pw), int(pw)) if isinstance(pw, (int, np.integer)) else (int(pw[0]), int(pw[1]))
    return ph, pw


def _require_rank4(x: Tensor, op: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{op}: expected a 4-D (N, C, H, W) tensor, got shape {x.shape}")


def _output_extent(size: int, pad: Pair, kernel: int, stride: int, dilation: int) -> int:
    return (size + pad[0] + pad[1] - dilation * (kernel - 1) - 1) // stride + 1


def _windows(xp: np.ndarray, kernel: Pair, stride: Pair, dilation: Pair, out: Pair) -> np.ndarray:
    """パディング済み入力から (N, C, Ho, Wo, kh, kw) の窓ビューを作る"""
    eff_h = (kernel[0] - 1) * dilation[0] + 1
    eff_w = (kernel[1] - 1) * dilation[1] + 1
    view = sliding_window_view(xp, (eff_h, eff_w), axis=(2, 3))
    view = view[:, :, ::stride[0], ::stride[1], ::dilation[0], ::dilation[1]]
    return view[:, :, :out[0], :out[1]]


def _scatter_windows(cols: np.ndarray, padded_shape, stride: Pair, dilation: Pair) -> np.ndarray:
    """`_windows` の随伴：窓ごとの勾配をパディング済み入力へ加算で戻す"""
    n, c, ho, wo, kh, kw = cols.shape
    out = np.zeros(padded_shape, dtype=cols.dtype)
    for i in range(kh):
        r0 = i * dilation[0]
        for j in range(kw):
            c0 = j * dilation[1]
            out[:, :, r0:r0 + stride[0] * (ho - 1) + 1:stride[0],
                c0:c0 + stride[1] * (wo - 1) + 1:stride[1]] += cols[..., i, j]
    return out


# =============================================================================
# 畳み込み
# =============================================================================

@dataclass
class ConvParams:
    """
    conv2d のパラメータ。

    `weight` は (C_out, C_in/groups, kH, kW)。
    `padding` は int、(ph, pw)、または ((top, bottom), (left, right))。
    `groups == C_in == C_out` で深さ方向（depthwise）畳み込みになります。
    """

    weight: Tensor
    bias: Optional[Tensor] = None
    stride: Union[int, Pair] = 1
    padding: PaddingSpec = 0
    dilation: Union[int, Pair] = 1
    groups: int = 1

    def __post_init__(self):
        if self.weight.ndim != 4:
            raise ShapeError(f"conv2d: weight must be 4-D (C_out, C_in/groups, kH, kW), got {self.weight.shape}")
        self.stride = _pair(self.stride, "stride")
        self.dilation = _pair(self.dilation, "dilation")
        self.padding = _padding(self.padding)
        if min(self.stride) < 1:
            raise ValueError(f"conv2d: stride must be positive, is {self.stride}")
        if min(self.dilation) < 1:
            raise ValueError(f"conv2d: dilation must be >= 1, is {self.dilation}")
        if min(min(p) for p in self.padding) < 0:
            raise ValueError(f"conv2d: padding must be non-negative, is {self.padding}")
        if self.groups < 1 or self.weight.shape[0] % self.groups:
            raise ShapeError(f"conv2d: groups={self.groups} does not divide C_out={self.weight.shape[0]}")
        if self.bias is not None and self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(f"conv2d: bias shape {self.bias.shape} does not match C_out={self.weight.shape[0]}")

    @property
    def kernel(self) -> Pair:
        return self.weight.shape[2], self.weight.shape[3]

    def output_size(self, height: int, width: int) -> Pair:
        return (_output_extent(height, self.padding[0], self.kernel[0], self.stride[0], self.dilation[0]),
                _output_extent(width, self.padding[1], self.kernel[1], self.stride[1], self.dilation[1]))

    def multiplies(self, input_shape: Sequence[int]) -> int:
        """この畳み込みを `input_shape` に適用したときの乗算回数"""
        n, _, h, w = input_shape
        ho, wo = self.output_size(h, w)
        c_out, c_group, kh, kw = self.weight.shape
        return n * c_out * ho * wo * c_group * kh * kw


class _Conv2d(Function):

    def forward(self, x, weight, *rest, params: ConvParams):
        self.params = params
        self.has_bias = bool(rest)
        n, c, h, w = x.shape
        c_out, c_group, kh, kw = weight.shape
        groups = params.groups
        if c != c_group * groups:
            raise ShapeError(
                f"conv2d: input channels C_in={c} do not match weight C_in/groups={c_group} x groups={groups}")
        ho, wo = params.output_size(h, w)
        if ho < 1 or wo < 1:
            raise ShapeError(f"conv2d: non-positive output size ({ho}, {wo}) for input ({h}, {w})")
        (pt, pb), (pl, pr) = params.padding
        xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
        win = _windows(xp, (kh, kw), params.stride, params.dilation, (ho, wo))
        win = win.reshape(n, groups, c_group, ho, wo, kh, kw)
        wg = weight.reshape(groups, c_out // groups, c_group, kh, kw)
        out = np.einsum("ngchwij,gocij->ngohw", win, wg, optimize=True).reshape(n, c_out, ho, wo)
        if rest:
            out = out + rest[0].reshape(1, c_out, 1, 1)
        self.win, self.wg, self.xp_shape, self.x_shape = win, wg, xp.shape, x.shape
        return out

    def backward(self, grad):
        params = self.params
        n, c, h, w = self.x_shape
        groups = params.groups
        c_out = grad.shape[1]
        _, _, ho, wo = grad.shape
        kh, kw = params.kernel
        gg = grad.reshape(n, groups, c_out // groups, ho, wo)
        gw = np.einsum("ngohw,ngchwij->gocij", gg, self.win, optimize=True).reshape(self.inputs[1].shape)
        cols = np.einsum("ngohw,gocij->ngchwij", gg, self.wg, optimize=True).reshape(n, c, ho, wo, kh, kw)
        gxp = _scatter_windows(cols, self.xp_shape, params.stride, params.dilation)
        (pt, _), (pl, _) = params.padding
        gx = gxp[:, :, pt:pt + h, pl:pl + w]
        grads = [gx, gw]
        if self.has_bias:
            grads.append(grad.sum(axis=(0, 2, 3)))
        return tuple(grads)


def conv2d(x: Tensor, p: ConvParams) -> Tensor:
    """
    2 次元畳み込み（相互相関）。

    出力サイズは各軸 floor((i + p_l + p_r − d·(k−1) − 1)/s) + 1。
    x・weight・bias について微分可能です。

    Raises:
        ShapeError: チャネル数の不一致、または出力サイズが 1 未満の場合
    """
    _require_rank4(x, "conv2d")
    active = getattr(_counter, "active", None)
    if active is not None:
        active.total += p.multiplies(x.shape)
    inputs = (x, p.weight) if p.bias is None else (x, p.weight, p.bias)
    return _Conv2d.apply(*inputs, params=p)


# =============================================================================
# プーリング・パディング
# =============================================================================

class _AvgPool2d(Function):

    def forward(self, x, kernel: int, stride: int, padding: int):
        n, c, h, w = x.shape
        ho = (h + 2 * padding - kernel) // stride + 1
        wo = (w + 2 * padding - kernel) // stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"avg_pool2d: non-positive output size ({ho}, {wo}) for input ({h}, {w})")
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        win = _windows(xp, (kernel, kernel), (stride, stride), (1, 1), (ho, wo))
        self.kernel, self.stride, self.padding = kernel, stride, padding
        self.xp_shape, self.x_shape = xp.shape, x.shape
        # パディングの 0 も含めてカーネル面積で割る
        return win.sum(axis=(4, 5)) / float(kernel * kernel)

    def backward(self, grad):
        k, s, p = self.kernel, self.stride, self.padding
        share = grad / float(k * k)
        cols = np.broadcast_to(share[..., None, None], share.shape + (k, k))
        gxp = _scatter_windows(cols, self.xp_shape, (s, s), (1, 1))
        h, w = self.x_shape[2:]
        return (gxp[:, :, p:p + h, p:p + w],)


def avg_pool2d(x: Tensor, kernel: int, stride: int = 1, padding: int = 0) -> Tensor:
    """窓平均プーリング。除数は常にカーネル面積（ゼロパディングも数える）。"""
    _require_rank4(x, "avg_pool2d")
    if kernel < 1 or stride < 1 or padding < 0:
        raise ValueError(f"avg_pool2d: invalid kernel={kernel}, stride={stride}, padding={padding}")
    return _AvgPool2d.apply(x, kernel=int(kernel), stride=int(stride), padding=int(padding))


class _ReflectionPad2d(Function):

    def forward(self, x, pad: int):
        h, w = x.shape[2:]
        self.rows = np.pad(np.arange(h), pad, mode="reflect")
        self.cols = np.pad(np.arange(w), pad, mode="reflect")
        self.x_shape = x.shape
        return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="reflect")

    def backward(self, grad):
        n, c, h, w = self.x_shape
        folded = np.zeros((n, c, h, grad.shape[3]), dtype=grad.dtype)
        np.add.at(folded, (slice(None), slice(None), self.rows), grad)
        gx = np.zeros(self.x_shape, dtype=grad.dtype)
        np.add.at(gx, (slice(None), slice(None), slice(None), self.cols), folded)
        return (gx,)


def reflection_pad2d(x: Tensor, pad: int) -> Tensor:
    """
    反射パディング（端の画素自身は繰り返さない）。

    Raises:
        ShapeError: pad >= H または pad >= W の場合
    """
    _require_rank4(x, "reflection_pad2d")
    h, w = x.shape[2:]
    if pad < 0:
        raise ValueError(f"reflection_pad2d: pad must be non-negative, is {pad}")
    if pad >= h or pad >= w:
        raise ShapeError(f"reflection_pad2d: pad={pad} requires H and W > {pad}, input is ({h}, {w})")
    if pad == 0:
        return x
    return _ReflectionPad2d.apply(x, pad=int(pad))


class _GlobalAvgPool(Function):

    def forward(self, x):
        self.x_shape = x.shape
        return x.mean(axis=(2, 3), keepdims=True)

    def backward(self, grad):
        h, w = self.x_shape[2:]
        return (np.broadcast_to(grad / float(h * w), self.x_shape),)


def global_avg_pool(x: Tensor) -> Tensor:
    """空間平均で (N, C, 1, 1) に圧縮する"""
    _require_rank4(x, "global_avg_pool")
    return _GlobalAvgPool.apply(x)


class _UpsampleNearest2x(Function):

    def forward(self, x):
        return x.repeat(2, axis=2).repeat(2, axis=3)

    def backward(self, grad):
        n, c, h2, w2 = grad.shape
        return (grad.reshape(n, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5)),)


def upsample_nearest2x(x: Tensor) -> Tensor:
    _require_rank4(x, "upsample_nearest2x")
    return _UpsampleNearest2x.apply(x)


# =============================================================================
# 要素ごとの演算
# =============================================================================

def _broadcast_check(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} cannot be broadcast") from None


class _Add(Function):

    def forward(self, a, b):
        return a + b

    def backward(self, grad):
        a, b = self.inputs
        return self.unbroadcast(grad, a.shape), self.unbroadcast(grad, b.shape)


class _Sub(Function):

    def forward(self, a, b):
        return a - b

    def backward(self, grad):
        a, b = self.inputs
        return self.unbroadcast(grad, a.shape), self.unbroadcast(-grad, b.shape)


class _Mul(Function):

    def forward(self, a, b):
        return a * b

    def backward(self, grad):
        a, b = self.inputs
        ga = self.unbroadcast(grad * b.data, a.shape) if a.requires_grad else None
        gb = self.unbroadcast(grad * a.data, b.shape) if b.requires_grad else None
        return ga, gb


def add(a, b) -> Tensor:
    a, b = as_tensor(a, b if isinstance(b, Tensor) else None), as_tensor(b, a if isinstance(a, Tensor) else None)
    _broadcast_check(a, b, "add")
    return _Add.apply(a, b)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a, b if isinstance(b, Tensor) else None), as_tensor(b, a if isinstance(a, Tensor) else None)
    _broadcast_check(a, b, "sub")
    return _Sub.apply(a, b)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a, b if isinstance(b, Tensor) else None), as_tensor(b, a if isinstance(a, Tensor) else None)
    _broadcast_check(a, b, "mul")
    return _Mul.apply(a, b)


class _Scale(Function):

    def forward(self, x, k: float):
        self.k = k
        return x * k

    def backward(self, grad):
        return (grad * self.k,)


def scale(x: Tensor, k: float) -> Tensor:
    """スカラー倍"""
    return _Scale.apply(x, k=float(k))


class _Sigmoid(Function):

    def forward(self, x):
        self.out = expit(x)
        return self.out

    def backward(self, grad):
        s = self.out
        return (grad * s * (1.0 - s),)


def sigmoid(x: Tensor) -> Tensor:
    return _Sigmoid.apply(x)


class _Swish(Function):

    def forward(self, x):
        self.s = expit(x)
        return x * self.s

    def backward(self, grad):
        s = self.s
        x = self.inputs[0].data
        return (grad * (s + x * s * (1.0 - s)),)


def swish(x: Tensor) -> Tensor:
    """x · sigmoid(x)"""
    return _Swish.apply(x)


class _Relu(Function):

    def forward(self, x):
        return np.maximum(x, 0)

    def backward(self, grad):
        return (grad * (self.inputs[0].data > 0),)


def relu(x: Tensor) -> Tensor:
    return _Relu.apply(x)


class _Log(Function):

    def forward(self, x):
        return np.log(x)

    def backward(self, grad):
        return (grad / self.inputs[0].data,)


def log(x: Tensor) -> Tensor:
    return _Log.apply(x)


class _Exp(Function):

    def forward(self, x):
        self.out = np.exp(x)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)


def exp(x: Tensor) -> Tensor:
    return _Exp.apply(x)


class _Power(Function):

    def forward(self, x, exponent: float):
        self.exponent = exponent
        return np.power(x, exponent)

    def backward(self, grad):
        p = self.exponent
        if p == 0:
            return (np.zeros_like(grad),)
        return (grad * p * np.power(self.inputs[0].data, p - 1),)


def power(x: Tensor, exponent: float) -> Tensor:
    """非負入力の実数べき乗"""
    return _Power.apply(x, exponent=float(exponent))


class _Clip(Function):

    def forward(self, x, low: float, high: float):
        self.low, self.high = low, high
        return np.clip(x, low, high)

    def backward(self, grad):
        x = self.inputs[0].data
        return (grad * ((x >= self.low) & (x <= self.high)),)


def clip(x: Tensor, low: float, high: float) -> Tensor:
    """範囲外では勾配 0 のクリップ"""
    return _Clip.apply(x, low=float(low), high=float(high))


class _SmoothL1(Function):

    def forward(self, x, beta: float):
        self.beta = beta
        ax = np.abs(x)
        return np.where(ax < beta, 0.5 * x * x / beta, ax - 0.5 * beta)

    def backward(self, grad):
        x = self.inputs[0].data
        return (grad * np.where(np.abs(x) < self.beta, x / self.beta, np.sign(x)),)


def smooth_l1(x: Tensor, beta: float) -> Tensor:
    """|x| < β で 0.5x²/β、それ以外で |x| − 0.5β"""
    if beta <= 0:
        raise ValueError(f"smooth_l1: beta must be positive, is {beta}")
    return _SmoothL1.apply(x, beta=float(beta))


# =============================================================================
# 縮約・形状変換
# =============================================================================

class _Sum(Function):

    def forward(self, x, axis, keepdims: bool):
        self.axis, self.keepdims = axis, keepdims
        return np.asarray(x.sum(axis=axis, keepdims=keepdims))

    def backward(self, grad):
        shape = self.inputs[0].shape
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, shape),)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return _Sum.apply(x, axis=axis, keepdims=keepdims)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


class _Reshape(Function):

    def forward(self, x, shape):
        return x.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.inputs[0].shape),)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return _Reshape.apply(x, shape=tuple(shape))


class _Permute(Function):

    def forward(self, x, axes):
        self.axes = axes
        return np.ascontiguousarray(x.transpose(axes))

    def backward(self, grad):
        return (grad.transpose(np.argsort(self.axes)),)


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    return _Permute.apply(x, axes=tuple(axes))


class _Concat(Function):

    def forward(self, *arrays, axis: int):
        self.axis = axis
        self.bounds = np.cumsum([0] + [a.shape[axis] for a in arrays])
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        pieces = []
        for start, stop in zip(self.bounds[:-1], self.bounds[1:]):
            index = [slice(None)] * grad.ndim
            index[self.axis] = slice(int(start), int(stop))
            pieces.append(grad[tuple(index)])
        return tuple(pieces)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return _Concat.apply(*tensors, axis=axis)


# =============================================================================
# 活性化関数の選択
# =============================================================================

ACTIVATIONS = {
    "swish": swish,
    "relu": relu,
}


def activation(name: Optional[str]):
    """名前から活性化関数を返す。None は恒等写像。"""
    if name is None:
        return lambda x: x
    if name not in ACTIVATIONS:
        raise ValueError(f"activation must be one of {sorted(ACTIVATIONS)}, is {name!r}")
    return ACTIVATIONS[name]
