"""
中心差分による勾配チェック。

解析勾配（`backward`）と数値勾配 (f(θ+ε) − f(θ−ε)) / 2ε を、
各テンソルのランダムな要素で比較します。相対誤差は
|a − n| / max(|a|, |n|, 1e-3) です。常に 64 bit 精度で実行します。
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Mapping, Optional, Tuple

import numpy as np

from . import functional as F
from ._prng import make_rng
from .blocks import DapscLayer, DsacLayer, GlobalContextBlock, MbconvSac, SeBlock, SwitchFunction
from .config import RunConfig
from .dataset import render_image
from .detector import DetectionModel, detect_forward, get_preset
from .losses import box_loss, focal_loss_with_logits
from .module import Module
from .tensor import Tensor, backward, default_dtype, no_grad
from .trainer import build_targets

logger = logging.getLogger(__name__)

TOLERANCE = 1e-5
EPSILON = 1e-4
POINTS = 5
# 相対誤差の分母の下限（勾配がほぼ 0 の要素で誤差が発散しないように）
FLOOR = 1e-3

LossFn = Callable[[], Tensor]
Builder = Callable[[np.random.Generator], Tuple[LossFn, Dict[str, Tensor]]]


@dataclass
class GradcheckReport:
    """ブロック 1 つ分の勾配チェック結果"""

    block: str
    seed: int
    errors: Dict[str, float] = field(default_factory=dict)
    points: int = POINTS
    tolerance: float = TOLERANCE

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def worst_tensor(self) -> Optional[str]:
        return max(self.errors, key=self.errors.get) if self.errors else None

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def to_dict(self) -> dict:
        return {
            "block": self.block,
            "seed": self.seed,
            "max_rel_error": self.max_error,
            "worst_tensor": self.worst_tensor,
            "tensors": len(self.errors),
            "points": self.points,
            "passed": self.passed,
        }


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), FLOOR)


def gradcheck(loss_fn: LossFn,
              tensors: Mapping[str, Tensor],
              rng: np.random.Generator,
              points: int = POINTS,
              eps: float = EPSILON) -> Dict[str, float]:
    """
    `tensors` の各テンソルについて最大相対誤差を返す。

    Args:
        loss_fn: 引数なしでスカラー損失を返す関数（`tensors` を読む）
        tensors: 名前 → 勾配を比較するテンソル（requires_grad=True）
        rng: 比較する要素の選択用
        points: テンソルあたりの比較点数（要素数が少なければ全要素）
    """
    for t in tensors.values():
        t.zero_grad()
    backward(loss_fn())
    analytic = {name: (t.grad if t.grad is not None else np.zeros_like(t.data)) for name, t in tensors.items()}

    errors: Dict[str, float] = {}
    with no_grad():
        for name, t in tensors.items():
            flat = t.data.reshape(-1)
            chosen = rng.choice(flat.size, size=min(points, flat.size), replace=False)
            worst = 0.0
            for index in chosen:
                original = flat[index]
                flat[index] = original + eps
                plus = loss_fn().item()
                flat[index] = original - eps
                minus = loss_fn().item()
                flat[index] = original
                numeric = (plus - minus) / (2 * eps)
                worst = max(worst, relative_error(float(analytic[name].reshape(-1)[index]), numeric))
            errors[name] = worst
    return errors


# =============================================================================
# ブロックごとの検査対象
# =============================================================================

def _weighted_sum_loss(forward: Callable[[], Tensor], rng: np.random.Generator) -> LossFn:
    """出力にランダムな重みを掛けて合計するスカラー損失（重みは初回に固定）"""
    weights = {}

    def loss() -> Tensor:
        out = forward()
        if "w" not in weights:
            weights["w"] = Tensor(rng.standard_normal(out.shape))
        return (out * weights["w"]).sum()

    return loss


def _leaf(rng: np.random.Generator, shape: Tuple[int, ...], scale: float = 1.0) -> Tensor:
    return Tensor(scale * rng.standard_normal(shape), requires_grad=True)


def _randomize(module: Module, rng: np.random.Generator, scale: float = 0.3) -> Module:
    """ゼロ初期化されたパラメータ（スイッチ・コンテキスト）も含めて乱数で置き換える"""
    for _, p in module.named_parameters():
        p.data[...] = p.data + scale * rng.standard_normal(p.shape)
    return module


def _module_case(module: Module, x: Tensor, rng: np.random.Generator) -> Tuple[LossFn, Dict[str, Tensor]]:
    _randomize(module, rng)
    tensors = {"x": x}
    tensors.update(module.named_parameters())
    return _weighted_sum_loss(lambda: module(x), rng), tensors


def _conv_case(rng):
    x = _leaf(rng, (2, 4, 7, 7))
    weight = _leaf(rng, (6, 2, 3, 3))
    bias = _leaf(rng, (6,))
    params = F.ConvParams(weight=weight, bias=bias, stride=2, padding=((1, 2), (2, 1)), dilation=2, groups=2)
    return _weighted_sum_loss(lambda: F.conv2d(x, params), rng), {"x": x, "weight": weight, "bias": bias}


def _pool_case(rng):
    x = _leaf(rng, (2, 3, 7, 7))
    return _weighted_sum_loss(lambda: F.avg_pool2d(x, 3, stride=2, padding=1), rng), {"x": x}


def _pad_case(rng):
    x = _leaf(rng, (1, 2, 5, 6))
    return _weighted_sum_loss(lambda: F.reflection_pad2d(x, 2), rng), {"x": x}


def _gc_case(rng):
    x = _leaf(rng, (2, 4, 6, 6))
    blocks = Module()
    blocks.add_module("global_mode", GlobalContextBlock(4, "global"))
    blocks.add_module("local_mode", GlobalContextBlock(4, "local"))
    _randomize(blocks, rng)
    tensors = {"x": x}
    tensors.update(blocks.named_parameters())
    return _weighted_sum_loss(lambda: (x + blocks.global_mode(x)) + blocks.local_mode(x), rng), tensors


def _se_case(rng):
    return _module_case(SeBlock(8, 4, "swish", rng=rng), _leaf(rng, (2, 8, 5, 5)), rng)


def _switch_case(rng):
    return _module_case(SwitchFunction(4, stride=2), _leaf(rng, (2, 4, 7, 7)), rng)


def _dsac_case(rng):
    layer = DsacLayer(4, kernel=3, stride=1, rate=3, global_context=True, rng=rng)
    return _module_case(layer, _leaf(rng, (2, 4, 9, 9)), rng)


def _dapsc_case(rng):
    layer = DapscLayer(8, 6, kernel=3, stride=1, rate=3, global_context=True, activation="swish", rng=rng)
    return _module_case(layer, _leaf(rng, (2, 8, 8, 8)), rng)


def _mbconv_case(rng):
    block = MbconvSac(4, 4, expand_ratio=2, kernel=5, stride=1, core="dsac", global_context=True, rng=rng)
    return _module_case(block, _leaf(rng, (2, 4, 8, 8)), rng)


def _model_case(rng):
    """toy-grad 構成（DSAC + 大域コンテキスト）の学習損失全体"""
    config = get_preset("toy-grad").with_core("dsac", True)
    model = _randomize(DetectionModel(config, seed=int(rng.integers(0, 2 ** 31))), rng, scale=0.05)
    image, objects = render_image(int(rng.integers(0, 2 ** 31)), 0, config.resolution)
    boxes = np.array([o["bbox"] for o in objects[:1]], dtype=np.float64).reshape(-1, 4)
    labels = np.array([o["class"] % config.num_classes for o in objects[:1]], dtype=np.int64)
    cls_t, box_t, assigned, positives = build_targets(model, boxes, labels, RunConfig())
    x = Tensor(image[None].astype(np.float64))

    def loss() -> Tensor:
        logits, deltas = detect_forward(model, x)
        focal = focal_loss_with_logits(logits.reshape(-1, config.num_classes), cls_t, mask=assigned)
        return focal + box_loss(deltas.reshape(-1, 4), box_t, positives)

    return loss, dict(model.named_parameters())


BUILDERS: Dict[str, Builder] = {
    "conv": _conv_case,
    "pool": _pool_case,
    "pad": _pad_case,
    "gc": _gc_case,
    "se": _se_case,
    "switch": _switch_case,
    "dsac": _dsac_case,
    "dapsc": _dapsc_case,
    "mbconv": _mbconv_case,
    "model": _model_case,
}

GRADCHECK_BLOCKS = tuple(BUILDERS)


def run_gradcheck(block: str, seed: int = 0, points: int = POINTS, eps: float = EPSILON) -> GradcheckReport:
    """
    名前付きブロックを 64 bit で構築して勾配チェックする。

    Raises:
        ValueError: 未知のブロック名
    """
    if block not in BUILDERS:
        raise ValueError(f"unknown block {block!r}, available: {list(GRADCHECK_BLOCKS)}")
    rng = make_rng(seed, "gradcheck", block)
    with default_dtype("f64"):
        loss_fn, tensors = BUILDERS[block](rng)
        errors = gradcheck(loss_fn, tensors, rng, points, eps)
    report = GradcheckReport(block=block, seed=seed, errors=errors, points=points)
    logger.info(f"gradcheck {block}: 最大相対誤差 {report.max_error:.3e} ({len(errors)} テンソル, "
                f"最悪 {report.worst_tensor})")
    return report
