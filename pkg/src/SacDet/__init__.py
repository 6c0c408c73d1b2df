"""
SacDet をご利用いただきありがとうございます。

スイッチャブル・アトラス畳み込み（DSAC / DAPSC）と大域コンテキストを
numpy だけの自動微分で実装し、合成データ上の小さなアンカー型検出器に組み込んだライブラリです。

- ドキュメント総合トップ: docs/index.md
- クイックスタート/チュートリアル: docs/tutorial.md
- コマンドライン: `sacdet --help`
"""

from .tensor import Tensor, ShapeError, backward, default_dtype, no_grad
from .geometry import GeometryError, GeometryQuery, effective_kernel, same_padding, plan_conversion
from .blocks import DapscLayer, DsacLayer, GlobalContextBlock, MbconvSac, SeBlock, SwitchFunction
from .convert import ConversionError, convert_model, convert_to_sac
from .detector import DetectionModel, get_preset
from .weights import ContainerError, load_weights, save_weights
from .config import ConfigError, RunConfig, RuntimeSettings
from .trainer import DivergenceError, Trainer
from ._stats import EvalReport, evaluate_map

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "ShapeError",
    "backward",
    "default_dtype",
    "no_grad",
    "GeometryError",
    "GeometryQuery",
    "effective_kernel",
    "same_padding",
    "plan_conversion",
    "SwitchFunction",
    "GlobalContextBlock",
    "SeBlock",
    "DsacLayer",
    "DapscLayer",
    "MbconvSac",
    "ConversionError",
    "convert_model",
    "convert_to_sac",
    "DetectionModel",
    "get_preset",
    "ContainerError",
    "load_weights",
    "save_weights",
    "ConfigError",
    "RunConfig",
    "RuntimeSettings",
    "DivergenceError",
    "Trainer",
    "EvalReport",
    "evaluate_map",
]
