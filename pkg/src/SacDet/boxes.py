"""
ボックス演算：IoU、アンカー生成、デルタ符号化、アンカー割り当て、NMS。

ボックスは特記がない限り (x_min, y_min, x_max, y_max) のピクセル座標、
アンカーは (cx, cy, w, h) で保持します。
"""

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

# exp(d) のオーバーフロー防止（幅・高さの最大拡大率 1000/16）
DELTA_CLIP = math.log(1000.0 / 16)

POSITIVE = 1
NEGATIVE = 0
IGNORE = -1


@dataclass(frozen=True)
class Detection:
    """検出結果 1 件。box は画像範囲にクリップ済み。"""

    box: Tuple[float, float, float, float]
    class_id: int
    score: float

    def to_dict(self) -> dict:
        return {"class": int(self.class_id), "score": float(self.score), "bbox": [float(v) for v in self.box]}


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    """2 つのボックスの IoU。重なりがなければ 0。"""
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union) if union > 0 else 0.0


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(M, 4) と (K, 4) の全組み合わせの IoU を (M, K) で返す"""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return out


def to_corners(cxcywh: np.ndarray) -> np.ndarray:
    cx, cy, w, h = np.moveaxis(np.asarray(cxcywh, dtype=np.float64), -1, 0)
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)


def to_center(corners: np.ndarray) -> np.ndarray:
    x0, y0, x1, y1 = np.moveaxis(np.asarray(corners, dtype=np.float64), -1, 0)
    return np.stack([(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0], axis=-1)


# =============================================================================
# アンカー
# =============================================================================

@dataclass
class AnchorSet:
    """
    全レベルのアンカー。

    列挙順は (レベル, 行, 列, アスペクト比)。`anchors` は (A, 4) の (cx, cy, w, h)。
    """

    anchors: np.ndarray
    strides: Tuple[int, ...]
    level_shapes: Tuple[Tuple[int, int], ...]
    ratios: Tuple[float, ...]
    image_size: Tuple[int, int]

    def __len__(self) -> int:
        return len(self.anchors)

    @property
    def per_cell(self) -> int:
        return len(self.ratios)

    def corners(self) -> np.ndarray:
        return to_corners(self.anchors)

    def level_of(self) -> np.ndarray:
        """各アンカーが属するレベル番号"""
        counts = [h * w * self.per_cell for h, w in self.level_shapes]
        return np.repeat(np.arange(len(counts)), counts)


def generate_anchors(image_size: Tuple[int, int],
                     strides: Sequence[int] = (8, 16, 32),
                     ratios: Sequence[float] = (0.5, 1.0, 2.0),
                     base_multiplier: float = 4.0) -> AnchorSet:
    """
    レベルごとに基本サイズ base = base_multiplier·stride、
    比 ρ = w/h について w = base·√ρ, h = base/√ρ（面積一定）のアンカーを
    各セル中心に並べる。
    """
    height, width = int(image_size[0]), int(image_size[1])
    if height < 1 or width < 1:
        raise ValueError(f"image size must be positive, is {image_size}")
    if not ratios or min(ratios) <= 0:
        raise ValueError(f"anchor ratios must be positive, are {list(ratios)}")
    per_level = []
    shapes = []
    for stride in strides:
        rows, cols = math.ceil(height / stride), math.ceil(width / stride)
        base = base_multiplier * stride
        cy, cx = np.meshgrid((np.arange(rows) + 0.5) * stride, (np.arange(cols) + 0.5) * stride, indexing="ij")
        sizes = np.array([[base * math.sqrt(r), base / math.sqrt(r)] for r in ratios])
        level = np.empty((rows, cols, len(ratios), 4))
        level[..., 0] = cx[..., None]
        level[..., 1] = cy[..., None]
        level[..., 2] = sizes[:, 0]
        level[..., 3] = sizes[:, 1]
        per_level.append(level.reshape(-1, 4))
        shapes.append((rows, cols))
    return AnchorSet(anchors=np.concatenate(per_level, axis=0),
                     strides=tuple(int(s) for s in strides),
                     level_shapes=tuple(shapes),
                     ratios=tuple(float(r) for r in ratios),
                     image_size=(height, width))


# =============================================================================
# デルタ符号化
# =============================================================================

def encode_boxes(boxes: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """コーナー形式の boxes を (cx, cy, w, h) の anchors に対するデルタへ変換する"""
    b = to_center(boxes)
    a = np.asarray(anchors, dtype=np.float64)
    return np.stack([(b[..., 0] - a[..., 0]) / a[..., 2],
                     (b[..., 1] - a[..., 1]) / a[..., 3],
                     np.log(b[..., 2] / a[..., 2]),
                     np.log(b[..., 3] / a[..., 3])], axis=-1)


def decode_boxes(deltas: np.ndarray, anchors: np.ndarray,
                 image_size: Optional[Tuple[int, int]] = None) -> np.ndarray:
    """
    cx = a_cx + d0·a_w, cy = a_cy + d1·a_h, w = a_w·exp(d2), h = a_h·exp(d3)。

    `image_size` (H, W) を与えると画像範囲にクリップします。
    """
    d = np.asarray(deltas, dtype=np.float64)
    a = np.asarray(anchors, dtype=np.float64)
    if d.shape[-1] != 4 or a.shape[-1] != 4 or d.shape[-2] != a.shape[-2]:
        raise ValueError(f"deltas {d.shape} and anchors {a.shape} do not match")
    cx = a[..., 0] + d[..., 0] * a[..., 2]
    cy = a[..., 1] + d[..., 1] * a[..., 3]
    w = a[..., 2] * np.exp(np.minimum(d[..., 2], DELTA_CLIP))
    h = a[..., 3] * np.exp(np.minimum(d[..., 3], DELTA_CLIP))
    boxes = np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)
    if image_size is not None:
        height, width = image_size
        boxes[..., 0::2] = np.clip(boxes[..., 0::2], 0, width)
        boxes[..., 1::2] = np.clip(boxes[..., 1::2], 0, height)
    return boxes


# =============================================================================
# 割り当て・抑制
# =============================================================================

def assign_anchors(anchors: np.ndarray, gt_boxes: np.ndarray,
                   pos_iou: float = 0.5, neg_iou: float = 0.4) -> Tuple[np.ndarray, np.ndarray]:
    """
    アンカーを正例・負例・無視に振り分ける。

    最大 IoU ≥ pos_iou で正例（argmax の gt に対応、同率は gt 番号の小さい方）、
    < neg_iou で負例、それ以外は無視。さらに各 gt は IoU 最大のアンカー 1 つを
    （IoU > 0 なら）正例として確保します。

    Args:
        anchors: (A, 4) コーナー形式
        gt_boxes: (G, 4) コーナー形式

    Returns:
        labels: (A,) POSITIVE / NEGATIVE / IGNORE
        matched: (A,) 対応する gt 番号（正例以外は -1）
    """
    n_anchors = len(anchors)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    labels = np.full(n_anchors, NEGATIVE, dtype=np.int64)
    matched = np.full(n_anchors, -1, dtype=np.int64)
    if len(gt_boxes) == 0 or n_anchors == 0:
        return labels, matched

    overlaps = iou_matrix(anchors, gt_boxes)
    best_gt = overlaps.argmax(axis=1)
    best_iou = overlaps[np.arange(n_anchors), best_gt]
    labels[best_iou >= neg_iou] = IGNORE
    positive = best_iou >= pos_iou
    labels[positive] = POSITIVE
    matched[positive] = best_gt[positive]

    # 逆順に処理し、同じアンカーを複数の gt が取り合う場合は番号の小さい gt を残す
    best_anchor = overlaps.argmax(axis=0)
    for g in range(len(gt_boxes) - 1, -1, -1):
        a = best_anchor[g]
        if overlaps[a, g] > 0:
            labels[a] = POSITIVE
            matched[a] = g
    return labels, matched


def nms(dets: List[Detection], iou_threshold: float) -> List[Detection]:
    """
    クラスごとの貪欲 NMS。スコア降順（同点は入力順）で残し、
    採用済みボックスとの IoU が閾値を超えるものを抑制します。
    """
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    kept: List[int] = []
    for i in order:
        if all(dets[j].class_id != dets[i].class_id or iou(dets[i].box, dets[j].box) <= iou_threshold
               for j in kept):
            kept.append(i)
    return [dets[i] for i in kept]
