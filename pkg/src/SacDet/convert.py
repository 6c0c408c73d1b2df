"""
ベースライン（通常の深さ方向畳み込み）から DSAC / DAPSC への恒等変換。

変換後の初期状態:

- 深さ方向重み `w` はそのままコピー（両枝で共有）
- スイッチは重み 0・バイアス 1（S(x) ≡ 1）
- 大域コンテキストは重み・バイアスとも 0（ベースラインに既にあればコピー）
- DAPSC では SE と pointwise の重みをブロックから中核へ移す

このため変換直後のモデル出力はベースラインと一致します。
"""

import logging
from collections import OrderedDict
from typing import Iterable, List, Mapping, Optional, Sequence, Set

import numpy as np

from .blocks import MbconvSac
from .detector import BackboneConfig, DetectionModel, detect_forward
from .geometry import DEFAULT_RATE, GeometryError, plan_conversion
from .tensor import Tensor, no_grad

logger = logging.getLogger(__name__)

SAC_MODES = ("dsac", "dapsc")


class ConversionError(ValueError):
    """変換できない重み（未対応カーネル・変換済み・構造の欠落）の場合に発生する例外"""
    pass


def _core_prefixes(state: Mapping[str, np.ndarray]) -> List[str]:
    return [key[:-len("weight")] for key in state
            if key == "core.weight" or key.endswith(".core.weight")]


def _block_name(core_prefix: str) -> str:
    """`stage1.block0.core.` → `stage1.block0`"""
    return core_prefix[:-len("core.")].rstrip(".")


def _check_mode(mode: str) -> None:
    if mode not in SAC_MODES:
        raise ConversionError(f"conversion mode must be one of {SAC_MODES}, is {mode!r}")


def convert_state_dict(state: Mapping[str, np.ndarray],
                       mode: str,
                       global_context: bool = True,
                       rate: int = DEFAULT_RATE,
                       only: Optional[Iterable[str]] = None) -> "OrderedDict[str, np.ndarray]":
    """
    重み辞書（コンテナの中身）を変換する。出力のテンソル順は変換後モデルの順序と一致します。

    Args:
        state: ベースラインの重み
        mode: "dsac" または "dapsc"
        global_context: 前後コンテキストを（ゼロ初期化で）追加するか
        rate: アトラスレート（カーネルの検証に使用）
        only: 変換するブロック名（例 `stage2.block0`）。None なら全ブロック

    Raises:
        ConversionError: 変換済みブロック、3/5 以外のカーネル、DAPSC に必要な SE/project の欠落
    """
    _check_mode(mode)
    wanted: Optional[Set[str]] = set(only) if only is not None else None
    cores = [p for p in _core_prefixes(state) if wanted is None or _block_name(p) in wanted]

    for prefix in cores:
        name = _block_name(prefix) or "core"
        if f"{prefix}switch.weight" in state:
            raise ConversionError(f"{name}: already converted (switch parameters present), refusing to convert again")
        kernel = state[f"{prefix}weight"].shape[-1]
        try:
            plan_conversion([(kernel, 1)], rate)
        except GeometryError as e:
            raise ConversionError(f"{name}: {e}") from None
        if mode == "dapsc":
            block = prefix[:-len("core.")]
            if f"{block}project.weight" not in state or f"{block}se.reduce.weight" not in state:
                raise ConversionError(f"{name}: DAPSC conversion needs block-level se.* and project.* tensors")

    converting = {f"{p}weight": p for p in cores}
    moved: Set[str] = set()
    for prefix in cores:
        moved.update(k for k in state if k.startswith(f"{prefix}pre_gc.") or k.startswith(f"{prefix}post_gc."))
        if mode == "dapsc":
            block = prefix[:-len("core.")]
            moved.update(k for k in state if k.startswith(f"{block}se.") or k.startswith(f"{block}project."))

    out: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for key, value in state.items():
        if key in moved:
            continue
        prefix = converting.get(key)
        out[key] = np.array(value, copy=True)
        if prefix is None:
            continue

        channels = value.shape[0]
        block = prefix[:-len("core.")]
        out_channels = state[f"{block}project.weight"].shape[0] if mode == "dapsc" else channels
        dtype = np.asarray(value).dtype
        has_gc = f"{prefix}pre_gc.weight" in state
        if global_context or has_gc:
            for gc, c in (("pre_gc", channels), ("post_gc", out_channels)):
                for part, shape in (("weight", (c, c, 1, 1)), ("bias", (c,))):
                    source = f"{prefix}{gc}.{part}"
                    out[source] = np.array(state[source], copy=True) if has_gc else np.zeros(shape, dtype=dtype)
        out[f"{prefix}switch.weight"] = np.zeros((1, channels, 1, 1), dtype=dtype)
        out[f"{prefix}switch.bias"] = np.ones(1, dtype=dtype)
        if mode == "dapsc":
            for part in ("se.", "project."):
                for k in state:
                    if k.startswith(f"{block}{part}"):
                        out[f"{prefix}{k[len(block):]}"] = np.array(state[k], copy=True)

    logger.info(f"{mode.upper()} へ変換: {len(cores)} ブロック")
    return out


def convert_to_sac(blocks: Sequence[MbconvSac],
                   mode: str,
                   rate: int = DEFAULT_RATE,
                   global_context: bool = True) -> List[MbconvSac]:
    """
    ベースライン MBConv ブロック列を変換した新しいブロック列を返す（元のブロックは変更しない）。

    Raises:
        ConversionError: 3/5 以外のカーネル、または既に変換済みのブロック
    """
    _check_mode(mode)
    try:
        plan = plan_conversion([(b.kernel, b.stride) for b in blocks], rate)
    except GeometryError as e:
        raise ConversionError(str(e)) from None

    converted = []
    for index, (block, (block_rate, _)) in enumerate(zip(blocks, plan)):
        if block.core_mode != "plain":
            raise ConversionError(f"block {index}: core is already {block.core_mode!r}")
        gc = global_context or block.core.global_context
        new = MbconvSac(block.in_channels, block.out_channels,
                        expand_ratio=block.expand_ratio,
                        kernel=block.kernel,
                        stride=block.stride,
                        core=mode,
                        global_context=gc,
                        gc_mode=block.core.gc_mode,
                        rate=block_rate,
                        activation=block.activation,
                        se_ratio=block.se_ratio)
        new.astype(block.core.weight.dtype)
        new.load_state_dict(convert_state_dict(block.state_dict(), mode, gc, block_rate))
        converted.append(new)
    return converted


def convertible_blocks(config: BackboneConfig, mode: str, global_context: bool = True) -> Set[str]:
    """変換後の構成で実際に SAC 中核になるブロック名"""
    target = config.with_core(mode, global_context or config.global_context)
    names = set()
    for i, stage in enumerate(target.stages):
        for j in range(stage.repeats):
            core, _ = target.block_core(i, j)
            if core == mode:
                names.add(f"stage{i + 1}.block{j}")
    return names


def convert_model(model: DetectionModel, mode: str, global_context: bool = True) -> DetectionModel:
    """
    検出器全体を変換した新しいモデルを返す。

    Raises:
        ConversionError: モデルが既に SAC 中核を持つ場合など
    """
    _check_mode(mode)
    cores = {stage.core for stage in model.config.stages}
    if cores != {"plain"}:
        raise ConversionError(f"model is already converted (cores: {sorted(cores)})")
    gc = global_context or model.config.global_context
    target = model.config.with_core(mode, gc)
    only = convertible_blocks(model.config, mode, gc)
    converted = DetectionModel(target, seed=model.seed).astype(model.stem.weight.dtype)
    converted.load_state_dict(convert_state_dict(model.state_dict(), mode, gc, target.rate, only=only))
    return converted


def output_difference(baseline: DetectionModel, converted: DetectionModel, images: np.ndarray) -> float:
    """両モデルの logits / deltas の最大絶対差"""
    dtype = baseline.stem.weight.dtype
    with no_grad():
        a = detect_forward(baseline, Tensor(images, dtype=dtype))
        b = detect_forward(converted, Tensor(images, dtype=dtype))
    return float(max(np.max(np.abs(x.data - y.data)) for x, y in zip(a, b)))
