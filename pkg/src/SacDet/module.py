"""
パラメータを持つ層の基底クラスと基本層。
"""

from collections import OrderedDict
from typing import Iterator, Mapping, Optional, Tuple, Union

import numpy as np

from . import functional as F
from .geometry import GeometryQuery, same_padding
from .tensor import ShapeError, Tensor, get_default_dtype
from .weights import ContainerError


def parameter(data: np.ndarray) -> Tensor:
    """学習対象の葉テンソルを作る（既定精度で保持）"""
    return Tensor(np.asarray(data, dtype=get_default_dtype()), requires_grad=True)


def kaiming_normal(rng: np.random.Generator, shape: Tuple[int, ...]) -> np.ndarray:
    """fan_in = shape[1]·kH·kW に基づく He 正規初期化"""
    fan_in = int(np.prod(shape[1:])) or 1
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Module:
    """
    パラメータ容器。

    属性に代入された `Module` は子モジュールとして、`requires_grad=True` の
    `Tensor` はパラメータとして、代入順に登録されます。
    パラメータ名はドット区切りの階層名（例: `stage1.block0.expand.weight`）です。
    """

    def __init__(self):
        object.__setattr__(self, "_parameters", OrderedDict())
        object.__setattr__(self, "_modules", OrderedDict())

    def __setattr__(self, name, value):
        params = self.__dict__.get("_parameters")
        if params is None:
            raise RuntimeError("Module.__init__() を先に呼び出してください")
        if isinstance(value, Module):
            self._modules[name] = value
            params.pop(name, None)
        elif isinstance(value, Tensor) and value.requires_grad:
            params[name] = value
            self._modules.pop(name, None)
        object.__setattr__(self, name, value)

    def add_module(self, name: str, module: "Module") -> None:
        setattr(self, name, module)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    # ------------------------------------------------------------------
    # パラメータの列挙
    # ------------------------------------------------------------------

    def named_modules(self, prefix: str = "") -> Iterator[Tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self._modules.items():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, param in self._parameters.items():
            yield (f"{prefix}.{name}" if prefix else name), param
        for name, child in self._modules.items():
            yield from child.named_parameters(f"{prefix}.{name}" if prefix else name)

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((name, p.data.copy()) for name, p in self.named_parameters())

    def load_state_dict(self, state: Mapping[str, np.ndarray], strict: bool = True) -> None:
        """
        名前でパラメータを上書きする。値は各パラメータの精度に変換されます。

        Raises:
            ContainerError: 形状不一致、strict 時の欠落・余剰テンソル
        """
        own = dict(self.named_parameters())
        if strict:
            missing = [name for name in own if name not in state]
            if missing:
                raise ContainerError(f"missing tensor: {missing[0]} ({len(missing)} missing)")
            unexpected = [name for name in state if name not in own]
            if unexpected:
                raise ContainerError(f"unexpected tensor: {unexpected[0]} ({len(unexpected)} unexpected)")
        for name, value in state.items():
            if name not in own:
                continue
            param = own[name]
            value = np.asarray(value)
            if value.shape != param.shape:
                raise ContainerError(f"{name}: shape {value.shape} does not match parameter {param.shape}")
            param.data[...] = value.astype(param.dtype)

    def astype(self, dtype) -> "Module":
        """全パラメータの精度をその場で変換する"""
        for _, module in self.named_modules():
            for name, param in list(module._parameters.items()):
                setattr(module, name, param.astype(dtype))
        return self

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))


class Conv2d(Module):
    """
    2 次元畳み込み層。

    `padding="same"` の場合は forward 時に入力サイズから
    `geometry.same_padding` でパディングを決めます（ストライド 2 では非対称になり得ます）。
    """

    def __init__(self,
                 in_channels: int,
                 out_channels: int,
                 kernel: int = 1,
                 *,
                 stride: int = 1,
                 dilation: int = 1,
                 groups: int = 1,
                 padding: Union[int, str] = 0,
                 bias: bool = True,
                 rng: Optional[np.random.Generator] = None):
        super().__init__()
        if in_channels % groups or out_channels % groups:
            raise ShapeError(
                f"groups={groups} must divide in_channels={in_channels} and out_channels={out_channels}")
        self.stride = stride
        self.dilation = dilation
        self.groups = groups
        self.padding = padding
        shape = (out_channels, in_channels // groups, kernel, kernel)
        init = kaiming_normal(rng, shape) if rng is not None else np.zeros(shape)
        self.weight = parameter(init)
        if bias:
            self.bias = parameter(np.zeros(out_channels))
        else:
            self.bias = None

    @property
    def kernel(self) -> int:
        return self.weight.shape[2]

    def resolve_padding(self, height: int, width: int):
        if self.padding != "same":
            return self.padding
        rows = same_padding(GeometryQuery(k_s=self.kernel, a_r=self.dilation, s_t=self.stride, i_s=height))
        cols = same_padding(GeometryQuery(k_s=self.kernel, a_r=self.dilation, s_t=self.stride, i_s=width))
        return rows, cols

    def params(self, height: int, width: int, dilation: Optional[int] = None) -> F.ConvParams:
        """入力サイズに対する ConvParams（`dilation` で膨張率だけ差し替え可能）"""
        if dilation is not None and dilation != self.dilation:
            rows = same_padding(GeometryQuery(k_s=self.kernel, a_r=dilation, s_t=self.stride, i_s=height))
            cols = same_padding(GeometryQuery(k_s=self.kernel, a_r=dilation, s_t=self.stride, i_s=width))
            padding = (rows, cols)
        else:
            dilation = self.dilation
            padding = self.resolve_padding(height, width)
        return F.ConvParams(weight=self.weight, bias=self.bias, stride=self.stride,
                            padding=padding, dilation=dilation, groups=self.groups)

    def forward(self, x: Tensor, dilation: Optional[int] = None) -> Tensor:
        return F.conv2d(x, self.params(x.shape[2], x.shape[3], dilation))