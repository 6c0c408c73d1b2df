"""
自動微分テンソルモジュール。

`Tensor` は numpy 配列と勾配バッファを保持する値型です。
微分可能な演算は `Function` のサブクラスとして実装し、
実行順序は `Tape` に記録されて逆順に辿られます。
"""

import itertools
import logging
import threading
from contextlib import contextmanager
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence[float]]

_DTYPES = {
    "f32": np.float32,
    "f64": np.float64,
}

# 演算の実行順序を表す単調増加カウンタ
_sequence = itertools.count()
_state = threading.local()


class ShapeError(ValueError):
    """テンソル形状が演算の前提を満たさない場合に発生する例外"""
    pass


def _resolve_dtype(dtype) -> np.dtype:
    if isinstance(dtype, str):
        if dtype not in _DTYPES:
            raise ValueError(f"precision must be one of {sorted(_DTYPES)}, is {dtype!r}")
        dtype = _DTYPES[dtype]
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise TypeError(f"Tensor は float32/float64 のみ対応しています: {dtype}")
    return dtype


def get_default_dtype() -> np.dtype:
    """現在のスレッドの既定精度（未設定なら float32）"""
    return getattr(_state, "dtype", np.dtype(np.float32))


def set_default_dtype(dtype) -> None:
    """既定精度を設定する。`"f32"` / `"f64"` または numpy の dtype を受け付ける。"""
    _state.dtype = _resolve_dtype(dtype)


@contextmanager
def default_dtype(dtype):
    """ブロック内だけ既定精度を切り替える（勾配チェックでは `"f64"` を使う）"""
    previous = get_default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = previous


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """ブロック内の演算を Tape に記録しない（推論・数値微分用）"""
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Function:
    """
    微分可能演算の基底クラス。

    サブクラスは `forward`（numpy 配列を受け取り配列を返す）と
    `backward`（出力勾配から各入力の勾配を返す）を実装します。
    勾配が不要な入力には `None` を返して構いません。
    """

    def __init__(self, *inputs: "Tensor"):
        self.inputs = inputs
        self.seq: Optional[int] = None
        self.output_id: Optional[int] = None

    def forward(self, *arrays: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError("Forward pass not implemented for this function")

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError("Backward pass not implemented for this function")

    @classmethod
    def apply(cls, *inputs: "Tensor", **kwargs) -> "Tensor":
        func = cls(*inputs)
        out = func.forward(*(t.data for t in inputs), **kwargs)
        requires_grad = is_grad_enabled() and any(t.requires_grad for t in inputs)
        tensor = Tensor(out, requires_grad=requires_grad, dtype=out.dtype)
        if requires_grad:
            func.seq = next(_sequence)
            func.output_id = id(tensor)
            tensor.creator = func
        return tensor

    @staticmethod
    def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
        """ブロードキャストで広がった軸を合計して `shape` に戻す"""
        if grad.shape == shape:
            return grad
        while grad.ndim > len(shape):
            grad = grad.sum(axis=0)
        for axis, extent in enumerate(shape):
            if extent == 1 and grad.shape[axis] != 1:
                grad = grad.sum(axis=axis, keepdims=True)
        return grad


class Tensor:
    """
    勾配バッファ付きの密テンソル。

    画像系の演算は (N, C, H, W) の 4 階テンソルを前提とします。
    損失計算の途中では任意の階数を扱えます。

    `grad` は葉テンソル（`creator` を持たない `requires_grad=True` のテンソル）
    にのみ書き込まれ、`backward` を繰り返すと加算されます。
    """

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype=None):
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = get_default_dtype()
        self.data: np.ndarray = np.asarray(data, dtype=_resolve_dtype(dtype))
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.creator: Optional[Function] = None

    # ------------------------------------------------------------------
    # 生成ヘルパ
    # ------------------------------------------------------------------

    @classmethod
    def zeros(cls, shape: Sequence[int], requires_grad: bool = False, dtype=None) -> "Tensor":
        return cls(np.zeros(shape, dtype=_resolve_dtype(dtype or get_default_dtype())), requires_grad)

    @classmethod
    def ones(cls, shape: Sequence[int], requires_grad: bool = False, dtype=None) -> "Tensor":
        return cls(np.ones(shape, dtype=_resolve_dtype(dtype or get_default_dtype())), requires_grad)

    # ------------------------------------------------------------------
    # プロパティ
    # ------------------------------------------------------------------

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self.creator is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() requires a single element, shape is {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def astype(self, dtype) -> "Tensor":
        """精度を変換した新しい葉テンソルを返す"""
        return Tensor(self.data.astype(_resolve_dtype(dtype)), requires_grad=self.requires_grad)

    def backward(self) -> None:
        backward(self)

    # ------------------------------------------------------------------
    # 演算子（実体は functional モジュール）
    # ------------------------------------------------------------------

    def __add__(self, other):
        from . import functional as F
        return F.add(self, other)

    def __radd__(self, other):
        from . import functional as F
        return F.add(other, self)

    def __sub__(self, other):
        from . import functional as F
        return F.sub(self, other)

    def __rsub__(self, other):
        from . import functional as F
        return F.sub(other, self)

    def __mul__(self, other):
        from . import functional as F
        return F.mul(self, other)

    def __rmul__(self, other):
        from . import functional as F
        return F.mul(other, self)

    def __neg__(self):
        from . import functional as F
        return F.scale(self, -1.0)

    def __truediv__(self, other):
        from . import functional as F
        if isinstance(other, Tensor):
            raise TypeError("テンソル同士の除算には対応していません")
        return F.scale(self, 1.0 / float(other))

    def __pow__(self, exponent: float):
        from . import functional as F
        return F.power(self, exponent)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        from . import functional as F
        return F.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        from . import functional as F
        return F.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape: int) -> "Tensor":
        from . import functional as F
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)

    def permute(self, *axes: int) -> "Tensor":
        from . import functional as F
        return F.permute(self, axes)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # 勾配の蓄積先を id で管理するため、同値比較ではなく同一性でハッシュする
    __hash__ = object.__hash__


def as_tensor(value, like: Optional[Tensor] = None) -> Tensor:
    """スカラーや配列を勾配不要の定数テンソルに変換する"""
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value), requires_grad=False, dtype=dtype)


class Tape:
    """
    実行済みの微分可能演算の順序付き記録。

    出力テンソルから到達可能な `Function` を集め、実行順（`seq`）に並べます。
    `backward` はこの列を厳密に逆順で辿ります。
    """

    def __init__(self, nodes: List[Function]):
        self.nodes = nodes

    @classmethod
    def record(cls, output: Tensor) -> "Tape":
        seen = set()
        nodes: List[Function] = []
        stack = [output.creator] if output.creator is not None else []
        while stack:
            func = stack.pop()
            if id(func) in seen:
                continue
            seen.add(id(func))
            nodes.append(func)
            for inp in func.inputs:
                if inp.creator is not None and id(inp.creator) not in seen:
                    stack.append(inp.creator)
        nodes.sort(key=lambda f: f.seq)
        return cls(nodes)

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self) -> Iterator[Function]:
        return iter(self.nodes)

    def backward(self, output: Tensor, grad: Optional[np.ndarray] = None) -> None:
        grads = {id(output): np.ones_like(output.data) if grad is None else grad}
        for func in reversed(self.nodes):
            g = grads.pop(func.output_id, None)
            if g is None:
                continue
            input_grads = func.backward(g)
            for inp, ig in zip(func.inputs, input_grads):
                if ig is None or not inp.requires_grad:
                    continue
                if inp.creator is None:
                    ig = ig.astype(inp.dtype, copy=False)
                    inp.grad = ig.copy() if inp.grad is None else inp.grad + ig
                else:
                    key = id(inp)
                    grads[key] = grads[key] + ig if key in grads else ig


def backward(loss: Tensor) -> None:
    """
    スカラー損失から逆伝播し、到達可能な葉テンソルの `grad` を埋める。

    損失から到達できない葉の `grad` は書き込まれず、`None`（勾配 0 の意味）のままです。
    勾配を使う側（`SGD.step` など）は `None` を 0 として扱います。

    Raises:
        ShapeError: 損失がスカラーでない場合
        ValueError: 損失が勾配追跡されていない場合
    """
    if loss.size != 1:
        raise ShapeError(f"backward() requires a scalar loss, shape is {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss は勾配追跡されていません（no_grad 内で計算された可能性があります）")
    tape = Tape.record(loss)
    logger.debug(f"逆伝播: {len(tape)} ノード")
    tape.backward(loss)
