"""
小規模アンカー型検出器。

stem（3×3 stride 2 畳み込み）→ MBConv-SAC ステージ列 → 3 レベルの簡易 BiFPN
→ レベル間で重みを共有するクラス／ボックスヘッド、という構成です。

パラメータ名は `stem.*`, `stage{i}.block{j}.*`, `fpn.*`, `head.*` に固定されています。
"""

import logging
import math
from dataclasses import asdict, dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from . import functional as F
from ._prng import make_rng
from .blocks import CORE_MODES, GC_MODES, SWITCH_PAD, MbconvSac
from .boxes import AnchorSet, Detection, decode_boxes, generate_anchors, nms
from .geometry import DEFAULT_RATE, SUPPORTED_KERNELS
from .module import Conv2d, Module
from .tensor import ShapeError, Tensor, no_grad

logger = logging.getLogger(__name__)

PYRAMID_STRIDES = (8, 16, 32)

# 初期の前景確率（クラスヘッドのバイアス初期値 −log((1−π)/π)）
PRIOR_PROBABILITY = 0.01


@dataclass(frozen=True)
class StageSpec:
    channels: int
    repeats: int
    stride: int
    kernel: int
    expand_ratio: int
    core: str = "plain"

    def __post_init__(self):
        if self.kernel not in SUPPORTED_KERNELS:
            raise ValueError(f"stage kernel must be one of {list(SUPPORTED_KERNELS)}, is {self.kernel}")
        if self.core not in CORE_MODES:
            raise ValueError(f"stage core must be one of {CORE_MODES}, is {self.core!r}")
        if self.repeats < 1 or self.stride not in (1, 2):
            raise ValueError(f"invalid stage: repeats={self.repeats}, stride={self.stride}")


@dataclass(frozen=True)
class BackboneConfig:
    """
    検出器の構成。

    stem（stride 2）と各ステージのストライドの積が 8/16/32 になる
    ステージの出力を特徴ピラミッドに使います。
    """

    stem_channels: int
    stages: Tuple[StageSpec, ...]
    fpn_channels: int = 32
    fpn_passes: int = 1
    resolution: int = 64
    in_channels: int = 3
    num_classes: int = 3
    global_context: bool = False
    gc_mode: str = "global"
    rate: int = DEFAULT_RATE
    activation: str = "swish"
    se_ratio: int = 4
    anchor_ratios: Tuple[float, ...] = (0.5, 1.0, 2.0)
    anchor_base: float = 4.0

    def __post_init__(self):
        if self.gc_mode not in GC_MODES:
            raise ValueError(f"gc_mode must be one of {GC_MODES}, is {self.gc_mode!r}")
        if self.resolution % 32:
            raise ValueError(f"resolution must be divisible by 32, is {self.resolution}")
        if self.fpn_passes < 1:
            raise ValueError(f"fpn_passes must be >= 1, is {self.fpn_passes}")
        self.pyramid_stages()

    def pyramid_stages(self) -> Tuple[int, int, int]:
        """ストライド 8/16/32 を出力する最後のステージ番号（0 始まり）"""
        found: Dict[int, int] = {}
        stride = 2
        for index, stage in enumerate(self.stages):
            stride *= stage.stride
            if stride in PYRAMID_STRIDES:
                found[stride] = index
        missing = [s for s in PYRAMID_STRIDES if s not in found]
        if missing or stride != 32:
            raise ValueError(f"stage strides must reach {list(PYRAMID_STRIDES)} and end at 32, missing {missing}")
        return tuple(found[s] for s in PYRAMID_STRIDES)

    def with_core(self, core: str, global_context: Optional[bool] = None) -> "BackboneConfig":
        """全ステージの中核を `core` にした構成を返す"""
        gc = self.global_context if global_context is None else global_context
        return replace(self, stages=tuple(replace(s, core=core) for s in self.stages), global_context=gc)

    def with_overrides(self, overrides: Dict[str, str]) -> "BackboneConfig":
        """`{"stage2": "dsac"}` の形式でステージ単位の中核を上書きする"""
        stages = list(self.stages)
        for key, core in overrides.items():
            if not key.startswith("stage") or not key[5:].isdigit():
                raise ValueError(f"override key must look like 'stage<i>', is {key!r}")
            index = int(key[5:]) - 1
            if not 0 <= index < len(stages):
                raise ValueError(f"{key}: no such stage (1..{len(stages)})")
            stages[index] = replace(stages[index], core=core)
        return replace(self, stages=tuple(stages))

    def block_sizes(self, resolution: Optional[int] = None) -> List[List[Tuple[int, int]]]:
        """各ブロックの (入力, 出力) 空間サイズ"""
        size = math.ceil((resolution or self.resolution) / 2)
        sizes = []
        for stage in self.stages:
            row = []
            for j in range(stage.repeats):
                stride = stage.stride if j == 0 else 1
                out = math.ceil(size / stride)
                row.append((size, out))
                size = out
            sizes.append(row)
        return sizes

    def block_core(self, stage_index: int, block_index: int) -> Tuple[str, bool]:
        """
        ブロックに実際に使う (中核モード, 大域コンテキスト有無)。

        スイッチ・局所コンテキストの反射パディングができない小さな特徴マップの
        ブロックは、ベースラインの深さ方向畳み込み（コンテキストなし）のままにします。
        """
        stage = self.stages[stage_index]
        size_in, size_out = self.block_sizes()[stage_index][block_index]
        wants_switch = stage.core != "plain"
        if (wants_switch or self.global_context) and size_in <= SWITCH_PAD:
            return "plain", False
        if self.global_context and self.gc_mode == "local" and size_out <= SWITCH_PAD:
            return "plain", False
        return stage.core, self.global_context

    def to_dict(self) -> dict:
        data = asdict(self)
        data["stages"] = [asdict(s) for s in self.stages]
        data["anchor_ratios"] = list(self.anchor_ratios)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "BackboneConfig":
        data = dict(data)
        data["stages"] = tuple(StageSpec(**s) for s in data["stages"])
        data["anchor_ratios"] = tuple(data.get("anchor_ratios", (0.5, 1.0, 2.0)))
        return cls(**data)


def _scaled(channels: int, width: float) -> int:
    """幅倍率を掛けて 8 の倍数に丸める"""
    return max(8, int(round(channels * width / 8)) * 8)


def _preset(width: float, depth: Tuple[int, int, int, int], resolution: int = 64) -> BackboneConfig:
    base = [(16, 2, 3, 1), (24, 2, 5, 4), (40, 2, 3, 4), (64, 2, 5, 4)]
    stages = tuple(StageSpec(channels=_scaled(c, width), repeats=r, stride=s, kernel=k, expand_ratio=e)
                   for (c, s, k, e), r in zip(base, depth))
    return BackboneConfig(stem_channels=_scaled(16, width), stages=stages,
                          fpn_channels=_scaled(32, width), fpn_passes=1 if width < 1.5 else 2,
                          resolution=resolution)


PRESETS: Dict[str, BackboneConfig] = {
    "toy-d0": _preset(1.0, (1, 2, 2, 1)),
    "toy-d1": _preset(1.25, (1, 2, 3, 1)),
    "toy-d2": _preset(1.5, (2, 3, 3, 1)),
    # 勾配チェック用の最小構成（32×32 入力）
    "toy-grad": BackboneConfig(
        stem_channels=8,
        stages=(StageSpec(8, 1, 2, 3, 1), StageSpec(8, 1, 2, 5, 2),
                StageSpec(8, 1, 2, 3, 2), StageSpec(16, 1, 2, 3, 2)),
        fpn_channels=8, resolution=32, num_classes=2),
}


def get_preset(name: str) -> BackboneConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}, available: {sorted(PRESETS)}")
    return PRESETS[name]


# =============================================================================
# モデル
# =============================================================================

@dataclass
class FeaturePyramid:
    """ストライド 8/16/32 の特徴マップ（チャネル数は BiFPN 後に揃う）"""

    levels: List[Tensor]
    strides: Tuple[int, ...] = PYRAMID_STRIDES

    def __iter__(self):
        return iter(self.levels)

    def __len__(self) -> int:
        return len(self.levels)

    def __getitem__(self, index: int) -> Tensor:
        return self.levels[index]


class _Stage(Module):

    def __init__(self, blocks: Sequence[MbconvSac]):
        super().__init__()
        self.depth = len(blocks)
        for j, block in enumerate(blocks):
            self.add_module(f"block{j}", block)

    def blocks(self) -> List[MbconvSac]:
        return [getattr(self, f"block{j}") for j in range(self.depth)]

    def forward(self, x: Tensor) -> Tensor:
        for block in self.blocks():
            x = block(x)
        return x


def _avg_down(x: Tensor) -> Tensor:
    return F.avg_pool2d(x, 2, stride=2)


class BiFpn(Module):
    """
    加算融合の双方向特徴ピラミッド。

    各パス:
        トップダウン  p4' = td4(p4 + up(p5)),  p3'' = td3(p3 + up(p4'))
        ボトムアップ  p4'' = bu4(p4' + down(p3'')),  p5'' = bu5(p5 + down(p4''))
    融合畳み込みは 3×3・活性化なし。
    """

    def __init__(self, in_channels: Sequence[int], channels: int, passes: int,
                 rng: Optional[np.random.Generator] = None):
        super().__init__()
        self.passes = passes
        for level, c in zip((3, 4, 5), in_channels):
            self.add_module(f"lateral{level}", Conv2d(c, channels, 1, rng=rng))
        for p in range(passes):
            fusion = Module()
            for name in ("td4", "td3", "bu4", "bu5"):
                fusion.add_module(name, Conv2d(channels, channels, 3, padding=1, rng=rng))
            self.add_module(f"pass{p}", fusion)

    def fuse(self, levels: Sequence[Tensor], fusion: Module) -> List[Tensor]:
        p3, p4, p5 = levels
        p4_td = fusion.td4(p4 + F.upsample_nearest2x(p5))
        p3_out = fusion.td3(p3 + F.upsample_nearest2x(p4_td))
        p4_out = fusion.bu4(p4_td + _avg_down(p3_out))
        p5_out = fusion.bu5(p5 + _avg_down(p4_out))
        return [p3_out, p4_out, p5_out]

    def forward(self, pyramid: FeaturePyramid) -> FeaturePyramid:
        levels = [getattr(self, f"lateral{l}")(x) for l, x in zip((3, 4, 5), pyramid)]
        for p in range(self.passes):
            levels = self.fuse(levels, getattr(self, f"pass{p}"))
        return FeaturePyramid(levels, pyramid.strides)


class DetectionHead(Module):
    """
    全レベル共通のクラス／ボックスヘッド（タワー 1 層 + 予測 3×3 畳み込み）。

    出力はアンカー列挙順（レベル, 行, 列, 比）に並べた
    logits (N, A, K) と deltas (N, A, 4)。
    """

    def __init__(self, channels: int, num_classes: int, anchors_per_cell: int, activation: str,
                 rng: Optional[np.random.Generator] = None):
        super().__init__()
        self.num_classes = num_classes
        self.anchors_per_cell = anchors_per_cell
        self.activation = activation
        self.cls_tower = Conv2d(channels, channels, 3, padding=1, rng=rng)
        self.cls = Conv2d(channels, anchors_per_cell * num_classes, 3, padding=1, rng=rng)
        self.box_tower = Conv2d(channels, channels, 3, padding=1, rng=rng)
        self.box = Conv2d(channels, anchors_per_cell * 4, 3, padding=1, rng=rng)
        # 予測層は小さく、クラスバイアスは事前確率から
        self.cls.weight.data *= 0.01
        self.box.weight.data *= 0.01
        self.cls.bias.data[...] = -math.log((1 - PRIOR_PROBABILITY) / PRIOR_PROBABILITY)

    def _flatten(self, y: Tensor, width: int) -> Tensor:
        n, _, h, w = y.shape
        y = y.reshape(n, self.anchors_per_cell, width, h, w).permute(0, 3, 4, 1, 2)
        return y.reshape(n, h * w * self.anchors_per_cell, width)

    def forward(self, pyramid: FeaturePyramid) -> Tuple[Tensor, Tensor]:
        act = F.activation(self.activation)
        logits, deltas = [], []
        for x in pyramid:
            logits.append(self._flatten(self.cls(act(self.cls_tower(x))), self.num_classes))
            deltas.append(self._flatten(self.box(act(self.box_tower(x))), 4))
        return F.concat(logits, axis=1), F.concat(deltas, axis=1)


class DetectionModel(Module):
    """
    検出器本体。

    同じ `config` と `seed` からは常に同じ初期重みが得られます
    （乱数はコンポーネント名ごとの独立ストリームから生成）。
    """

    def __init__(self, config: BackboneConfig, seed: int = 0):
        super().__init__()
        self.config = config
        self.seed = seed
        cfg = config

        self.stem = Conv2d(cfg.in_channels, cfg.stem_channels, 3, stride=2, padding="same",
                           rng=make_rng(seed, "init", "stem"))
        channels = cfg.stem_channels
        for i, stage in enumerate(cfg.stages):
            blocks = []
            for j in range(stage.repeats):
                core, gc = cfg.block_core(i, j)
                name = f"stage{i + 1}.block{j}"
                blocks.append(MbconvSac(channels, stage.channels,
                                        expand_ratio=stage.expand_ratio,
                                        kernel=stage.kernel,
                                        stride=stage.stride if j == 0 else 1,
                                        core=core,
                                        global_context=gc,
                                        gc_mode=cfg.gc_mode,
                                        rate=cfg.rate,
                                        activation=cfg.activation,
                                        se_ratio=cfg.se_ratio,
                                        rng=make_rng(seed, "init", name)))
                channels = stage.channels
            self.add_module(f"stage{i + 1}", _Stage(blocks))

        pyramid_channels = [cfg.stages[i].channels for i in cfg.pyramid_stages()]
        self.fpn = BiFpn(pyramid_channels, cfg.fpn_channels, cfg.fpn_passes, rng=make_rng(seed, "init", "fpn"))
        self.head = DetectionHead(cfg.fpn_channels, cfg.num_classes, len(cfg.anchor_ratios), cfg.activation,
                                  rng=make_rng(seed, "init", "head"))

    def stages(self) -> List[_Stage]:
        return [getattr(self, f"stage{i + 1}") for i in range(len(self.config.stages))]

    def anchors(self, image_size: Optional[Tuple[int, int]] = None) -> AnchorSet:
        size = image_size or (self.config.resolution, self.config.resolution)
        return generate_anchors(size, PYRAMID_STRIDES, self.config.anchor_ratios, self.config.anchor_base)

    def forward(self, x: Tensor) -> Tuple[Tensor, Tensor]:
        return detect_forward(self, x)


def backbone_forward(model: DetectionModel, x: Tensor) -> FeaturePyramid:
    """
    stem とステージ列を通し、ストライド 8/16/32 の特徴マップを返す。

    Raises:
        ShapeError: 入力の空間サイズが 32 で割り切れない、またはチャネル数が不一致の場合
    """
    if x.ndim != 4 or x.shape[1] != model.config.in_channels:
        raise ShapeError(f"detector input must be (N, {model.config.in_channels}, H, W), got {x.shape}")
    h, w = x.shape[2:]
    if h % 32 or w % 32:
        raise ShapeError(f"input resolution ({h}, {w}) must be divisible by 32")
    act = F.activation(model.config.activation)
    y = act(model.stem(x))
    wanted = model.config.pyramid_stages()
    levels = []
    for index, stage in enumerate(model.stages()):
        y = stage(y)
        if index in wanted:
            levels.append(y)
    return FeaturePyramid(levels)


def bifpn_forward(model: DetectionModel, pyramid: FeaturePyramid) -> FeaturePyramid:
    return model.fpn(pyramid)


def detect_forward(model: DetectionModel, x: Tensor) -> Tuple[Tensor, Tensor]:
    """画像から (logits (N, A, K), deltas (N, A, 4)) を計算する"""
    return model.head(bifpn_forward(model, backbone_forward(model, x)))


def predict(model: DetectionModel,
            images: np.ndarray,
            score_threshold: float = 0.05,
            iou_threshold: float = 0.5,
            max_detections: int = 100,
            pre_nms_top: Optional[int] = None) -> List[List[Detection]]:
    """
    推論と後処理（スコア閾値 → クラス別 NMS → 上位 max_detections 件）。

    クリップ後に幅か高さが 0 になったボックスは捨てます。
    `pre_nms_top` を与えると NMS の前にスコア上位の候補だけに絞ります。
    その場合、全候補での NMS なら残るボックスが落ちることがあります。既定（None）は絞り込みなし。
    """
    images = np.asarray(images)
    image_size = images.shape[2:]
    anchors = model.anchors(image_size).anchors
    with no_grad():
        logits, deltas = detect_forward(model, Tensor(images, dtype=model.stem.weight.dtype))
    scores = expit(logits.data.astype(np.float64))
    boxes = decode_boxes(deltas.data, anchors, image_size)

    results = []
    for n in range(len(images)):
        anchor_idx, class_idx = np.nonzero(scores[n] >= score_threshold)
        candidates = []
        for a, k in zip(anchor_idx, class_idx):
            box = boxes[n, a]
            if box[2] <= box[0] or box[3] <= box[1]:
                continue
            candidates.append(Detection(tuple(float(v) for v in box), int(k), float(scores[n, a, k])))
        if pre_nms_top is not None:
            candidates.sort(key=lambda d: -d.score)
            candidates = candidates[:pre_nms_top]
        kept = nms(candidates, iou_threshold)
        results.append(kept[:max_detections])
    return results
