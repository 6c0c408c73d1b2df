from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .boxes import Detection, iou_matrix
from .dataset import CLASSES

logger = logging.getLogger(__name__)

COCO_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


def average_precision(recall: np.ndarray, precision: np.ndarray) -> float:
    """全点補間 AP（適合率を右から累積最大にし、再現率の変化点で面積を足す）"""
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    changed = np.nonzero(mrec[1:] != mrec[:-1])[0] + 1
    return float(np.sum((mrec[changed] - mrec[changed - 1]) * mpre[changed]))


def _det_key(image: int, det: Detection) -> Tuple:
    # 入力順に依存しない全順序（スコア降順、画像、ボックス座標）
    return (-det.score, image) + tuple(det.box)


def _match_image(image: int,
                 dets: Sequence[Detection],
                 gts: Sequence[dict],
                 num_classes: int,
                 thresholds: Sequence[float]) -> List[Tuple[int, Tuple, np.ndarray]]:
    """
    1 画像内の貪欲マッチング。

    Returns:
        (クラス, 並べ替えキー, 閾値ごとの TP フラグ) のリスト
    """
    out = []
    for c in range(num_classes):
        cls_dets = sorted((d for d in dets if d.class_id == c), key=lambda d: _det_key(image, d))
        if not cls_dets:
            continue
        gt_boxes = np.array([g["bbox"] for g in gts if g["class"] == c], dtype=np.float64).reshape(-1, 4)
        overlaps = iou_matrix(np.array([d.box for d in cls_dets]), gt_boxes)
        flags = np.zeros((len(cls_dets), len(thresholds)), dtype=bool)
        for t_index, t in enumerate(thresholds):
            taken = np.zeros(len(gt_boxes), dtype=bool)
            for d_index in range(len(cls_dets)):
                if not len(gt_boxes):
                    break
                candidates = np.where(taken, -1.0, overlaps[d_index])
                best = int(np.argmax(candidates))
                if candidates[best] >= t:
                    taken[best] = True
                    flags[d_index, t_index] = True
        for d, f in zip(cls_dets, flags):
            out.append((c, _det_key(image, d), f))
    return out


@dataclass
class EvalReport:
    """
    評価結果。

    `ap` は (クラス × IoU 閾値) の AP 表。gt のないクラスは NaN で、平均から除外されます。
    """

    ap: pd.DataFrame
    num_detections: int
    num_ground_truths: Dict[str, int] = field(default_factory=dict)

    @property
    def per_class_ap50(self) -> Dict[str, float]:
        return {name: float(v) for name, v in self.ap[0.5].items()}

    @property
    def map50(self) -> float:
        return _class_mean(self.ap[0.5])

    @property
    def map_coco(self) -> float:
        """COCO 形式 mAP@[0.5:0.95:0.05]（閾値ごとの mAP の平均）"""
        cols = [t for t in COCO_THRESHOLDS if t in self.ap.columns]
        return float(np.mean([_class_mean(self.ap[t]) for t in cols])) if cols else float("nan")

    def to_dict(self) -> dict:
        return {
            "map50": self.map50,
            "map_coco": self.map_coco,
            "per_class_ap50": {k: (None if np.isnan(v) else v) for k, v in self.per_class_ap50.items()},
            "num_detections": self.num_detections,
            "num_ground_truths": dict(self.num_ground_truths),
        }

    def to_series(self) -> pd.Series:
        s = pd.Series(dtype=object)
        s.loc['mAP@0.5'] = self.map50
        s.loc['mAP@[.5:.95]'] = self.map_coco
        for name, value in self.per_class_ap50.items():
            s.loc[f'AP@0.5 [{name}]'] = value
        s.loc['# Detections'] = self.num_detections
        s.loc['# Ground Truths'] = sum(self.num_ground_truths.values())
        s.loc['_ap_table'] = self.ap
        return s

    def to_frame(self) -> pd.DataFrame:
        """クラス × 閾値の縦長表（class, iou, ap）。gt のないクラスは含めない"""
        frame = self.ap.rename_axis('class').reset_index()
        frame = frame.melt(id_vars='class', var_name='iou', value_name='ap')
        return frame.dropna(subset=['ap']).reset_index(drop=True)


def _class_mean(values: pd.Series) -> float:
    values = values.dropna()
    return float(values.mean()) if len(values) else 0.0


def evaluate_map(detections: Sequence[Sequence[Detection]],
                 ground_truths: Sequence[Sequence[dict]],
                 iou_thresholds: Sequence[float] = COCO_THRESHOLDS,
                 class_names: Sequence[str] = CLASSES,
                 threads: Optional[int] = None) -> EvalReport:
    """
    画像ごとの検出と正解から AP / mAP を計算する。

    クラスごとにスコア降順で、同じ画像内の未使用の正解のうち IoU 最大のものに
    IoU ≥ t なら一致させ、適合率-再現率曲線の全点補間面積を AP とします。
    IoU 0.5 は常に計算に含めます。
    """
    if len(detections) != len(ground_truths):
        raise ValueError(f"{len(detections)} detection lists for {len(ground_truths)} images")
    thresholds = sorted({round(float(t), 4) for t in iou_thresholds} | {0.5})
    num_classes = len(class_names)

    def _work(image: int):
        return _match_image(image, detections[image], ground_truths[image], num_classes, thresholds)

    with ThreadPoolExecutor(max_workers=threads) as pool:
        matched = [row for rows in pool.map(_work, range(len(detections))) for row in rows]

    npos = np.zeros(num_classes, dtype=np.int64)
    for gts in ground_truths:
        for g in gts:
            npos[int(g["class"])] += 1

    table = np.full((num_classes, len(thresholds)), np.nan)
    for c in range(num_classes):
        if npos[c] == 0:
            continue
        rows = sorted((r for r in matched if r[0] == c), key=lambda r: r[1])
        if not rows:
            table[c] = 0.0
            continue
        flags = np.stack([r[2] for r in rows])
        tp = np.cumsum(flags, axis=0)
        fp = np.cumsum(~flags, axis=0)
        for t_index in range(len(thresholds)):
            recall = tp[:, t_index] / npos[c]
            precision = tp[:, t_index] / (tp[:, t_index] + fp[:, t_index])
            table[c, t_index] = average_precision(recall, precision)

    ap = pd.DataFrame(table, index=list(class_names), columns=thresholds)
    report = EvalReport(ap=ap,
                        num_detections=int(sum(len(d) for d in detections)),
                        num_ground_truths={name: int(n) for name, n in zip(class_names, npos)})
    logger.debug(f"評価: mAP@0.5={report.map50:.4f}, 検出 {report.num_detections} 件")
    return report


def load_metrics(path: Union[str, Path]) -> pd.DataFrame:
    """学習のメトリクスストリーム（JSON Lines）を DataFrame として読む"""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"メトリクスファイルが見つかりません: {path}")
    return pd.read_json(path, lines=True)
