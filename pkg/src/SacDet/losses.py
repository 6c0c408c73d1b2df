"""
検出損失：focal loss（クラスごとのシグモイド）と smooth-L1 ボックス損失。
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import functional as F
from .tensor import ShapeError, Tensor, as_tensor

# log の前に確率を [EPS, 1 − EPS] に収める
EPS = 1e-7


@dataclass(frozen=True)
class FocalParams:
    alpha: float = 0.25
    gamma: float = 1.5

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ValueError(f"alpha must be in (0, 1], is {self.alpha}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, is {self.gamma}")


def _anchor_mask(mask: Optional[np.ndarray], n: int) -> np.ndarray:
    if mask is None:
        return np.ones(n, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (n,):
        raise ShapeError(f"anchor mask shape {mask.shape} does not match {n} anchors")
    return mask


def focal_loss(probs: Tensor,
               targets: np.ndarray,
               params: FocalParams = FocalParams(),
               mask: Optional[np.ndarray] = None) -> Tensor:
    """
    focal loss。

    正例要素は −α·(1−p)^γ·log(p)、負例要素は −(1−α)·p^γ·log(1−p)。
    クラス方向に合計し、`mask` で選ばれた（無視以外の）アンカー数で平均します。

    Args:
        probs: (M, K) または (M,) の予測確率
        targets: probs と同形の 0/1 ラベル
        mask: (M,) 損失に含めるアンカー。None なら全アンカー
    """
    targets = np.asarray(targets)
    if targets.shape != probs.shape:
        raise ShapeError(f"targets shape {targets.shape} does not match probs {probs.shape}")
    n_anchors = probs.shape[0] if probs.ndim else 1
    keep = _anchor_mask(mask, n_anchors)
    count = int(keep.sum())
    if count == 0:
        return probs.sum() * 0.0

    p = F.clip(probs, EPS, 1.0 - EPS)
    q = 1.0 - p
    positive = -params.alpha * ((q ** params.gamma) * F.log(p))
    negative = -(1.0 - params.alpha) * ((p ** params.gamma) * F.log(q))

    weight = keep.reshape((-1,) + (1,) * (probs.ndim - 1)).astype(probs.dtype)
    t = as_tensor(targets.astype(probs.dtype) * weight, probs)
    not_t = as_tensor((1.0 - targets.astype(probs.dtype)) * weight, probs)
    return (t * positive + not_t * negative).sum() / count


def focal_loss_with_logits(logits: Tensor,
                           targets: np.ndarray,
                           params: FocalParams = FocalParams(),
                           mask: Optional[np.ndarray] = None) -> Tensor:
    return focal_loss(F.sigmoid(logits), targets, params, mask)


def box_loss(pred: Tensor, target: np.ndarray, positives: np.ndarray, beta: float = 0.1) -> Tensor:
    """
    正例アンカーについて smooth-L1(β) を 4 成分で合計し、正例数で平均する。
    正例がなければ 0。
    """
    target = np.asarray(target)
    if target.shape != pred.shape:
        raise ShapeError(f"target deltas shape {target.shape} does not match predictions {pred.shape}")
    positives = _anchor_mask(positives, pred.shape[0])
    count = int(positives.sum())
    if count == 0:
        return pred.sum() * 0.0
    weight = positives.reshape((-1,) + (1,) * (pred.ndim - 1)).astype(pred.dtype)
    diff = (pred - as_tensor(np.where(weight > 0, target, 0).astype(pred.dtype), pred)) * as_tensor(weight, pred)
    return F.smooth_l1(diff, beta).sum() / count
