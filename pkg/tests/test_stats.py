"""
評価モジュール (_stats.py) のテスト
"""

import json

import numpy as np
import pandas as pd
import pytest

from SacDet._stats import (
    COCO_THRESHOLDS,
    EvalReport,
    average_precision,
    evaluate_map,
    load_metrics,
)
from SacDet.boxes import Detection, iou


def brute_force_ap(detections, ground_truths, class_id, threshold):
    """定義どおりに 1 件ずつ数える AP（オラクル）"""
    items = sorted(((-d.score, image) + tuple(d.box), d, image)
                   for image, dets in enumerate(detections) for d in dets if d.class_id == class_id)
    npos = sum(1 for gts in ground_truths for g in gts if g["class"] == class_id)
    used = set()
    recalls, precisions = [], []
    tp = 0
    for rank, (_, det, image) in enumerate(items, start=1):
        best, best_iou = None, -1.0
        for g_index, g in enumerate(ground_truths[image]):
            if g["class"] != class_id or (image, g_index) in used:
                continue
            overlap = iou(det.box, g["bbox"])
            if overlap > best_iou:
                best, best_iou = g_index, overlap
        if best is not None and best_iou >= threshold:
            used.add((image, best))
            tp += 1
        recalls.append(tp / npos)
        precisions.append(tp / rank)
    ap, previous = 0.0, 0.0
    for i, r in enumerate(recalls):
        if r > previous:
            ap += (r - previous) * max(precisions[i:])
            previous = r
    return ap


def create_random_instance(images=6, classes=2, seed=0):
    """正解の周りにずらした検出と誤検出を混ぜたランダムな問題"""
    rng = np.random.default_rng(seed)
    detections, ground_truths = [], []
    for _ in range(images):
        gts, dets = [], []
        for _ in range(rng.integers(0, 4)):
            x, y = rng.uniform(0, 40, 2)
            size = rng.uniform(6, 20)
            box = [float(x), float(y), float(x + size), float(y + size)]
            c = int(rng.integers(0, classes))
            gts.append({"class": c, "bbox": box})
            for _ in range(rng.integers(0, 3)):
                shift = rng.normal(0, size * 0.2, 4)
                noisy = tuple(float(v) for v in np.array(box) + shift)
                if noisy[2] > noisy[0] and noisy[3] > noisy[1]:
                    dets.append(Detection(noisy, c, float(rng.uniform())))
        for _ in range(rng.integers(0, 3)):
            x, y = rng.uniform(0, 50, 2)
            dets.append(Detection((float(x), float(y), float(x + 8), float(y + 8)),
                                  int(rng.integers(0, classes)), float(rng.uniform())))
        detections.append(dets)
        ground_truths.append(gts)
    return detections, ground_truths


class TestAveragePrecision:
    """average_precision() のテスト"""

    def test_perfect_curve(self):
        """全て正解なら 1"""
        assert average_precision(np.array([0.5, 1.0]), np.array([1.0, 1.0])) == pytest.approx(1.0)

    def test_interpolation(self):
        """適合率は右からの累積最大で補間"""
        recall = np.array([0.5, 0.5, 1.0])
        precision = np.array([1.0, 0.5, 2 / 3])
        assert average_precision(recall, precision) == pytest.approx(0.5 + 0.5 * 2 / 3)


class TestEvaluateMap:
    """evaluate_map() のテスト"""

    def test_hand_enumerable_instance(self):
        """TP, FP, TP の順に並ぶ 2 画像・1 クラスの例は 5/6"""
        gts = [[{"class": 0, "bbox": [0, 0, 10, 10]}], [{"class": 0, "bbox": [0, 0, 10, 10]}]]
        dets = [
            [Detection((0, 0, 10, 10), 0, 0.9), Detection((20, 20, 30, 30), 0, 0.8)],
            [Detection((0, 0, 10, 10), 0, 0.7)],
        ]
        report = evaluate_map(dets, gts, class_names=["shape"])
        assert report.map50 == pytest.approx(5 / 6, abs=1e-12)
        assert report.map50 == pytest.approx(brute_force_ap(dets, gts, 0, 0.5), abs=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_brute_force(self, seed):
        """ランダムな問題でオラクルと一致（全閾値・全クラス）"""
        dets, gts = create_random_instance(seed=seed)
        report = evaluate_map(dets, gts, class_names=["a", "b"])
        for c, name in enumerate(["a", "b"]):
            if not any(g["class"] == c for image in gts for g in image):
                assert np.isnan(report.ap.loc[name, 0.5])
                continue
            for t in COCO_THRESHOLDS:
                assert report.ap.loc[name, t] == pytest.approx(brute_force_ap(dets, gts, c, t), abs=1e-12)

    def test_order_invariance(self):
        """画像内の検出の並び順は結果に影響しない"""
        dets, gts = create_random_instance(seed=7)
        shuffled = [list(reversed(d)) for d in dets]
        a = evaluate_map(dets, gts, class_names=["a", "b"])
        b = evaluate_map(shuffled, gts, class_names=["a", "b"])
        pd.testing.assert_frame_equal(a.ap, b.ap)

    def test_perfect_detector(self):
        """正解をそのまま検出にすると mAP は 1"""
        _, gts = create_random_instance(seed=3)
        dets = [[Detection(tuple(g["bbox"]), g["class"], 1.0) for g in image] for image in gts]
        report = evaluate_map(dets, gts, class_names=["a", "b"])
        assert report.map50 == pytest.approx(1.0)
        assert report.map_coco == pytest.approx(1.0)

    def test_missing_class_excluded_from_mean(self):
        """正解のないクラスは NaN で平均から除外"""
        gts = [[{"class": 0, "bbox": [0, 0, 10, 10]}]]
        dets = [[Detection((0, 0, 10, 10), 0, 0.9), Detection((0, 0, 10, 10), 1, 0.9)]]
        report = evaluate_map(dets, gts, class_names=["a", "b"])
        assert np.isnan(report.per_class_ap50["b"])
        assert report.map50 == pytest.approx(1.0)

    def test_no_detections(self):
        """検出がなければ AP は 0"""
        gts = [[{"class": 0, "bbox": [0, 0, 10, 10]}]]
        report = evaluate_map([[]], gts, class_names=["a"])
        assert report.map50 == 0.0

    def test_duplicate_is_false_positive(self):
        """同じ正解への 2 件目は誤検出"""
        gts = [[{"class": 0, "bbox": [0, 0, 10, 10]}]]
        dets = [[Detection((0, 0, 10, 10), 0, 0.6), Detection((0, 0, 10, 10), 0, 0.9)]]
        report = evaluate_map(dets, gts, class_names=["a"])
        assert report.map50 == pytest.approx(1.0)
        assert report.num_detections == 2

    def test_threshold_half_always_included(self):
        """閾値 0.5 は常に含まれる"""
        report = evaluate_map([[]], [[]], iou_thresholds=[0.75], class_names=["a"])
        assert list(report.ap.columns) == [0.5, 0.75]

    def test_length_mismatch(self):
        """画像数が合わなければエラー"""
        with pytest.raises(ValueError):
            evaluate_map([[]], [[], []])

    def test_threads_do_not_change_result(self):
        """スレッド数によらず同じ結果"""
        dets, gts = create_random_instance(seed=9)
        a = evaluate_map(dets, gts, class_names=["a", "b"], threads=1)
        b = evaluate_map(dets, gts, class_names=["a", "b"], threads=4)
        pd.testing.assert_frame_equal(a.ap, b.ap)


class TestEvalReport:
    """EvalReport の表現のテスト"""

    def create_report(self) -> EvalReport:
        gts = [[{"class": 0, "bbox": [0, 0, 10, 10]}, {"class": 1, "bbox": [20, 20, 30, 30]}]]
        dets = [[Detection((0, 0, 10, 10), 0, 0.9)]]
        return evaluate_map(dets, gts, class_names=["a", "b", "c"])

    def test_to_dict(self):
        """JSON 出力用の辞書（NaN は None）"""
        data = self.create_report().to_dict()
        assert data["map50"] == pytest.approx(0.5)
        assert data["per_class_ap50"] == {"a": 1.0, "b": 0.0, "c": None}
        assert data["num_ground_truths"] == {"a": 1, "b": 1, "c": 0}
        json.dumps(data)

    def test_to_series(self):
        """Series 表現のラベル"""
        s = self.create_report().to_series()
        assert s.loc['mAP@0.5'] == pytest.approx(0.5)
        assert s.loc['AP@0.5 [a]'] == pytest.approx(1.0)
        assert s.loc['# Ground Truths'] == 2
        assert isinstance(s.loc['_ap_table'], pd.DataFrame)

    def test_to_frame(self):
        """縦長表の列"""
        frame = self.create_report().to_frame()
        assert list(frame.columns) == ['class', 'iou', 'ap']
        assert set(frame['class']) == {"a", "b"}


class TestLoadMetrics:
    """load_metrics() のテスト"""

    def test_reads_json_lines(self, tmp_path):
        """JSON Lines を DataFrame として読む"""
        path = tmp_path / "metrics.jsonl"
        rows = [{"step": 0, "loss": 2.0}, {"step": 1, "loss": 1.5}]
        path.write_text("\n".join(json.dumps(r) for r in rows) + "\n", encoding="utf-8")
        frame = load_metrics(path)
        assert list(frame["step"]) == [0, 1]
        assert frame["loss"].iloc[1] == pytest.approx(1.5)

    def test_missing_file(self, tmp_path):
        """ファイルが無ければパスを含むエラー"""
        with pytest.raises(FileNotFoundError, match="metrics.jsonl"):
            load_metrics(tmp_path / "metrics.jsonl")
