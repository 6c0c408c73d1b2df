"""
モーメンタム付き SGD（L2 重み減衰は勾配に加算する結合型）。

    g' = g + wd·p
    v  ← μ·v + g'
    p  ← p − lr·v
"""

from dataclasses import dataclass, field
from typing import Dict, Mapping

import numpy as np

from .module import Module

# 学習率プリセット（アブレーション用の低・高 2 水準）
LR_PRESETS = {
    "ablation-low": 1e-5,
    "ablation-high": 1e-4,
}


@dataclass(frozen=True)
class LrSchedule:
    """一定学習率 + 任意の線形ウォームアップ"""

    base_lr: float
    warmup_steps: int = 0

    def __post_init__(self):
        if self.base_lr < 0:
            raise ValueError(f"learning rate must be >= 0, is {self.base_lr}")
        if self.warmup_steps < 0:
            raise ValueError(f"warmup_steps must be >= 0, is {self.warmup_steps}")

    def __call__(self, step: int) -> float:
        if step < self.warmup_steps:
            return self.base_lr * (step + 1) / self.warmup_steps
        return self.base_lr


@dataclass
class OptimizerState:
    schedule: LrSchedule
    momentum: float = 0.9
    weight_decay: float = 4e-5
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @property
    def lr(self) -> float:
        return self.schedule(self.step)


def sgd_step(state: OptimizerState,
             params: Mapping[str, np.ndarray],
             grads: Mapping[str, np.ndarray]) -> Dict[str, np.ndarray]:
    """
    1 ステップ分の更新後パラメータを返す（`state` の速度とステップ数は更新される）。

    Raises:
        ValueError: パラメータと勾配（または既存の速度）の形状が一致しない場合
    """
    lr = state.lr
    updated = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} does not match parameter {p.shape}")
        g = g + state.weight_decay * p
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p)
        elif v.shape != p.shape:
            raise ValueError(f"{name}: velocity shape {v.shape} does not match parameter {p.shape}")
        v = state.momentum * v + g
        state.velocity[name] = v
        updated[name] = p - lr * v
    state.step += 1
    return updated


class SGD:
    """`Module` のパラメータをその場で更新する薄いラッパ（勾配のない葉は勾配 0 とみなす）"""

    def __init__(self, model: Module, schedule: LrSchedule, momentum: float = 0.9, weight_decay: float = 4e-5):
        self.model = model
        self.state = OptimizerState(schedule, momentum, weight_decay)

    @property
    def lr(self) -> float:
        return self.state.lr

    def step(self) -> None:
        named = dict(self.model.named_parameters())
        params = {name: p.data for name, p in named.items()}
        grads = {name: p.grad if p.grad is not None else np.zeros_like(p.data) for name, p in named.items()}
        for name, value in sgd_step(self.state, params, grads).items():
            named[name].data[...] = value

    def zero_grad(self) -> None:
        self.model.zero_grad()
