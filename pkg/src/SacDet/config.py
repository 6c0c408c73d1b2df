"""
実行設定。

- `RunConfig`: 学習・評価の設定（JSON）。未知のキーは拒否します。
- `RuntimeSettings`: プロセス単位の設定（環境変数 / .env）。
"""

import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Union

from dotenv import load_dotenv

from .blocks import CORE_MODES, GC_MODES
from .detector import BackboneConfig, PRESETS, get_preset
from .optim import LR_PRESETS

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    """設定に未知のキーや不正な値が含まれる場合に発生する例外"""
    pass


@dataclass
class ModelSection:
    preset: str = "toy-d0"
    core: str = "plain"
    global_context: bool = False
    gc_mode: str = "global"
    rate: int = 3
    activation: str = "swish"
    # ステージ単位の中核上書き（例: {"stage2": "dsac"}）
    overrides: Dict[str, str] = field(default_factory=dict)
    seed: int = 0

    def validate(self) -> None:
        if self.preset not in PRESETS:
            raise ConfigError(f"model.preset: unknown preset {self.preset!r}, available: {sorted(PRESETS)}")
        if self.core not in CORE_MODES:
            raise ConfigError(f"model.core must be one of {CORE_MODES}, is {self.core!r}")
        for key, core in self.overrides.items():
            if core not in CORE_MODES:
                raise ConfigError(f"model.overrides.{key} must be one of {CORE_MODES}, is {core!r}")
        if self.gc_mode not in GC_MODES:
            raise ConfigError(f"model.gc_mode must be one of {GC_MODES}, is {self.gc_mode!r}")
        if self.activation not in ("swish", "relu"):
            raise ConfigError(f"model.activation must be 'swish' or 'relu', is {self.activation!r}")
        if self.rate < 1:
            raise ConfigError(f"model.rate must be >= 1, is {self.rate}")


@dataclass
class TrainSection:
    lr: float = 0.01
    # "ablation-low" / "ablation-high" を指定すると lr より優先
    lr_preset: Optional[str] = None
    epochs: int = 5
    batch_size: int = 16
    seed: int = 42
    warmup_steps: int = 100
    momentum: float = 0.9
    weight_decay: float = 4e-5
    checkpoint_every: int = 0
    log_every: int = 10

    def validate(self) -> None:
        if self.lr_preset is not None and self.lr_preset not in LR_PRESETS:
            raise ConfigError(f"train.lr_preset must be one of {sorted(LR_PRESETS)}, is {self.lr_preset!r}")
        if self.lr < 0:
            raise ConfigError(f"train.lr must be >= 0, is {self.lr}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError(f"train.epochs and train.batch_size must be >= 1, are {self.epochs}, {self.batch_size}")
        if self.warmup_steps < 0 or self.checkpoint_every < 0 or self.log_every < 1:
            raise ConfigError("train.warmup_steps / checkpoint_every must be >= 0 and log_every >= 1")

    @property
    def effective_lr(self) -> float:
        return LR_PRESETS[self.lr_preset] if self.lr_preset else self.lr


@dataclass
class LossSection:
    alpha: float = 0.25
    gamma: float = 1.5
    box_beta: float = 0.1
    box_weight: float = 1.0

    def validate(self) -> None:
        if not 0 < self.alpha <= 1 or self.gamma < 0 or self.box_beta <= 0:
            raise ConfigError(f"loss: alpha in (0,1], gamma >= 0, box_beta > 0 required, got {asdict(self)}")


@dataclass
class AnchorSection:
    ratios: List[float] = field(default_factory=lambda: [0.5, 1.0, 2.0])
    base_multiplier: float = 4.0
    pos_iou: float = 0.5
    neg_iou: float = 0.4

    def validate(self) -> None:
        if not self.ratios or min(self.ratios) <= 0:
            raise ConfigError(f"anchors.ratios must be positive, are {self.ratios}")
        if not 0 < self.neg_iou <= self.pos_iou <= 1:
            raise ConfigError(f"anchors: 0 < neg_iou <= pos_iou <= 1 required, got {self.neg_iou}, {self.pos_iou}")


@dataclass
class DataSection:
    path: str = "data"
    count: int = 512
    seed: int = 42
    val_count: int = 128
    val_seed: int = 4242
    noise: float = 0.05

    def validate(self) -> None:
        if self.count < 1 or self.val_count < 0:
            raise ConfigError(f"data.count must be >= 1 and val_count >= 0, are {self.count}, {self.val_count}")


@dataclass
class EvalSection:
    iou_thresholds: List[float] = field(default_factory=lambda: [round(0.5 + 0.05 * i, 2) for i in range(10)])
    score_threshold: float = 0.05
    nms_iou: float = 0.5
    max_detections: int = 100

    def validate(self) -> None:
        if not self.iou_thresholds or not all(0 < t <= 1 for t in self.iou_thresholds):
            raise ConfigError(f"eval.iou_thresholds must lie in (0, 1], are {self.iou_thresholds}")


_SECTIONS = {
    "model": ModelSection,
    "train": TrainSection,
    "loss": LossSection,
    "anchors": AnchorSection,
    "data": DataSection,
    "eval": EvalSection,
}


def _build_section(name: str, cls, data) -> object:
    if not isinstance(data, dict):
        raise ConfigError(f"{name} must be an object, is {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"unknown config key: {name}.{key}")
    try:
        section = cls(**data)
    except TypeError as e:
        raise ConfigError(f"{name}: {e}") from None
    section.validate()
    return section


@dataclass
class RunConfig:
    """
    学習・評価の設定一式。

    全てのキーに既定値があり、`from_dict(cfg.to_dict()) == cfg` が成り立ちます。
    """

    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    loss: LossSection = field(default_factory=LossSection)
    anchors: AnchorSection = field(default_factory=AnchorSection)
    data: DataSection = field(default_factory=DataSection)
    eval: EvalSection = field(default_factory=EvalSection)
    precision: str = "f32"

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        """
        Raises:
            ConfigError: 未知のキー（ドット区切りで名前を示す）または不正な値
        """
        if not isinstance(data, dict):
            raise ConfigError("config root must be a JSON object")
        kwargs = {}
        for key, value in data.items():
            if key == "precision":
                if value not in ("f32", "f64"):
                    raise ConfigError(f"precision must be 'f32' or 'f64', is {value!r}")
                kwargs[key] = value
            elif key in _SECTIONS:
                kwargs[key] = _build_section(key, _SECTIONS[key], value)
            else:
                raise ConfigError(f"unknown config key: {key}")
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return {name: asdict(value) if is_dataclass(value) else value for name, value in self.__dict__.items()}

    @classmethod
    def load(cls, path: Union[str, Path]) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"設定ファイルが見つかりません: {path}")
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
        return cls.from_dict(data)

    def dump(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path

    def backbone(self) -> BackboneConfig:
        """model / anchors セクションから検出器の構成を作る"""
        m = self.model
        try:
            cfg = get_preset(m.preset).with_core(m.core, m.global_context).with_overrides(m.overrides)
            return replace(cfg, gc_mode=m.gc_mode, rate=m.rate, activation=m.activation,
                           anchor_ratios=tuple(self.anchors.ratios), anchor_base=self.anchors.base_multiplier)
        except ValueError as e:
            raise ConfigError(f"model: {e}") from None


@dataclass
class RuntimeSettings:
    """
    プロセス設定（環境変数 `SAC_THREADS`, `SAC_LOG_LEVEL`）。

    `threads` は合成データ生成と評価のワーカー数で、numpy / BLAS のスレッド数には影響しません。
    """

    threads: int
    log_level: Optional[str] = None

    @classmethod
    def from_environment(cls) -> "RuntimeSettings":
        """.env を読み込んだうえで環境変数から設定を作る"""
        load_dotenv()
        raw = os.environ.get("SAC_THREADS")
        threads = os.cpu_count() or 1
        if raw:
            try:
                threads = int(raw)
            except ValueError:
                raise ConfigError(f"SAC_THREADS must be an integer, is {raw!r}") from None
            if threads < 1:
                raise ConfigError(f"SAC_THREADS must be >= 1, is {threads}")
        level = os.environ.get("SAC_LOG_LEVEL") or None
        if level is not None and not isinstance(logging.getLevelName(level.upper()), int):
            raise ConfigError(f"SAC_LOG_LEVEL is not a logging level: {level!r}")
        return cls(threads=threads, log_level=level.upper() if level else None)
