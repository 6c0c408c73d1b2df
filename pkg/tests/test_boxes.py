"""
ボックス演算 (boxes.py) のテスト
"""

import math

import numpy as np
import pytest

from SacDet.boxes import (
    IGNORE,
    NEGATIVE,
    POSITIVE,
    Detection,
    assign_anchors,
    decode_boxes,
    encode_boxes,
    generate_anchors,
    iou,
    iou_matrix,
    nms,
    to_center,
    to_corners,
)


def assign_by_loops(anchors, gt_boxes, pos_iou=0.5, neg_iou=0.4):
    """assign_anchors の規則をアンカー・gt ごとのループで書き下したもの"""
    overlaps = iou_matrix(anchors, gt_boxes)
    labels = [NEGATIVE] * len(anchors)
    matched = [-1] * len(anchors)
    for a in range(len(anchors)):
        row = list(overlaps[a])
        g = row.index(max(row))
        if row[g] >= pos_iou:
            labels[a], matched[a] = POSITIVE, g
        elif row[g] >= neg_iou:
            labels[a] = IGNORE
    forced = {}
    for g in range(len(gt_boxes)):
        column = list(overlaps[:, g])
        a = column.index(max(column))
        if column[a] > 0 and a not in forced:
            forced[a] = g
    for a, g in forced.items():
        labels[a], matched[a] = POSITIVE, g
    return labels, matched


def nms_by_suppression(dets, iou_threshold):
    """採用したボックスが後続の同クラスを抑制していく形の NMS"""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    suppressed = [False] * len(dets)
    kept = []
    for rank, i in enumerate(order):
        if suppressed[i]:
            continue
        kept.append(dets[i])
        for j in order[rank + 1:]:
            if dets[j].class_id == dets[i].class_id and iou(dets[i].box, dets[j].box) > iou_threshold:
                suppressed[j] = True
    return kept


class TestIou:
    """iou() / iou_matrix() のテスト"""

    def test_known_value(self):
        """(0,0,2,2) と (1,1,3,3) の IoU は 1/7"""
        assert iou((0, 0, 2, 2), (1, 1, 3, 3)) == pytest.approx(1 / 7, abs=1e-9)

    def test_symmetric(self):
        """IoU は対称"""
        a, b = (0.5, 1.0, 4.0, 3.5), (2.0, 0.0, 5.0, 2.5)
        assert iou(a, b) == iou(b, a)

    def test_identical_boxes(self):
        """同じボックスは 1"""
        assert iou((1, 2, 5, 7), (1, 2, 5, 7)) == pytest.approx(1.0)

    def test_disjoint_and_touching(self):
        """重ならない・辺で接するだけなら 0"""
        assert iou((0, 0, 1, 1), (2, 2, 3, 3)) == 0.0
        assert iou((0, 0, 1, 1), (1, 0, 2, 1)) == 0.0

    def test_degenerate_box(self):
        """面積 0 のボックス同士は 0"""
        assert iou((1, 1, 1, 1), (1, 1, 1, 1)) == 0.0

    def test_matrix_matches_scalar(self):
        """iou_matrix は iou() と一致"""
        rng = np.random.default_rng(0)
        xy = rng.uniform(0, 10, size=(6, 2))
        a = np.concatenate([xy, xy + rng.uniform(0.5, 4, size=(6, 2))], axis=1)
        b = a[::-1] + 0.5
        m = iou_matrix(a, b)
        assert m.shape == (6, 6)
        for i in range(6):
            for j in range(6):
                assert m[i, j] == pytest.approx(iou(a[i], b[j]), abs=1e-12)


class TestAnchors:
    """generate_anchors() のテスト"""

    def test_count_and_order(self):
        """64×64 で (8² + 4² + 2²)·3 個、レベル順に並ぶ"""
        anchors = generate_anchors((64, 64))
        assert len(anchors) == (64 + 16 + 4) * 3
        np.testing.assert_array_equal(anchors.level_of()[:3], 0)
        assert anchors.level_of()[-1] == 2

    def test_first_cell(self):
        """最初のセル中心は (stride/2, stride/2)、比の順に並ぶ"""
        anchors = generate_anchors((64, 64)).anchors
        np.testing.assert_allclose(anchors[:3, :2], 4.0)
        base = 4.0 * 8
        np.testing.assert_allclose(anchors[0, 2:], [base * math.sqrt(0.5), base / math.sqrt(0.5)])
        np.testing.assert_allclose(anchors[1, 2:], [base, base])

    def test_area_constant_per_level(self):
        """同じレベルの面積は比によらず base²"""
        anchors = generate_anchors((32, 32), strides=(8,)).anchors
        np.testing.assert_allclose(anchors[:, 2] * anchors[:, 3], 32.0 ** 2)

    def test_invalid_inputs(self):
        """不正なサイズ・比はエラー"""
        with pytest.raises(ValueError):
            generate_anchors((0, 32))
        with pytest.raises(ValueError):
            generate_anchors((32, 32), ratios=(1.0, -2.0))


class TestDeltaCoding:
    """encode_boxes() / decode_boxes() のテスト"""

    def test_decode_inverts_encode(self):
        """decode(encode(b)) = b"""
        rng = np.random.default_rng(1)
        anchors = np.column_stack([rng.uniform(8, 56, (1000, 2)), rng.uniform(8, 40, (1000, 2))])
        centers = np.column_stack([rng.uniform(8, 56, (1000, 2)), rng.uniform(4, 30, (1000, 2))])
        boxes = to_corners(centers)
        np.testing.assert_allclose(decode_boxes(encode_boxes(boxes, anchors), anchors), boxes, atol=1e-9)

    def test_zero_delta_is_anchor(self):
        """デルタ 0 はアンカーそのもの"""
        anchors = np.array([[10.0, 12.0, 8.0, 4.0]])
        np.testing.assert_allclose(decode_boxes(np.zeros((1, 4)), anchors), [[6, 10, 14, 14]])

    def test_clip_to_image(self):
        """image_size を与えると画像範囲にクリップ"""
        anchors = np.array([[2.0, 2.0, 10.0, 10.0]])
        out = decode_boxes(np.zeros((1, 4)), anchors, image_size=(16, 16))
        np.testing.assert_allclose(out, [[0, 0, 7, 7]])

    def test_large_delta_clipped(self):
        """巨大なデルタでもオーバーフローしない"""
        out = decode_boxes(np.array([[0.0, 0.0, 1e4, 1e4]]), np.array([[0.0, 0.0, 16.0, 16.0]]))
        assert np.all(np.isfinite(out))

    def test_shape_mismatch(self):
        """形状不一致はエラー"""
        with pytest.raises(ValueError):
            decode_boxes(np.zeros((2, 4)), np.zeros((3, 4)))

    def test_center_corner_conversion(self):
        """to_center と to_corners は互いに逆"""
        corners = np.array([[1.0, 2.0, 5.0, 9.0]])
        np.testing.assert_allclose(to_corners(to_center(corners)), corners)


class TestAssignAnchors:
    """assign_anchors() のテスト"""

    def test_thresholds(self):
        """IoU ≥ 0.5 は正例、< 0.4 は負例、その間は無視"""
        gt = np.array([[0.0, 0.0, 10.0, 10.0]])
        anchors = np.array([
            [0.0, 0.0, 10.0, 10.0],    # IoU 1
            [0.0, 0.0, 10.0, 4.5],     # IoU 0.45
            [20.0, 20.0, 30.0, 30.0],  # IoU 0
        ])
        labels, matched = assign_anchors(anchors, gt)
        assert labels.tolist() == [POSITIVE, IGNORE, NEGATIVE]
        assert matched.tolist() == [0, -1, -1]

    def test_best_anchor_forced_positive(self):
        """閾値未満でも gt ごとの最良アンカーは正例"""
        gt = np.array([[0.0, 0.0, 10.0, 10.0]])
        anchors = np.array([[0.0, 0.0, 10.0, 3.0], [50.0, 50.0, 60.0, 60.0]])
        labels, matched = assign_anchors(anchors, gt)
        assert labels[0] == POSITIVE and matched[0] == 0
        assert labels[1] == NEGATIVE

    def test_tie_goes_to_lower_index(self):
        """同じアンカーを取り合う場合は番号の小さい gt"""
        gt = np.array([[0.0, 0.0, 10.0, 10.0], [0.0, 0.0, 10.0, 10.0]])
        labels, matched = assign_anchors(np.array([[0.0, 0.0, 10.0, 10.0]]), gt)
        assert labels[0] == POSITIVE
        assert matched[0] == 0

    def test_no_ground_truth(self):
        """gt が無ければ全て負例"""
        labels, matched = assign_anchors(np.zeros((4, 4)), np.zeros((0, 4)))
        assert (labels == NEGATIVE).all()
        assert (matched == -1).all()

    @pytest.mark.parametrize("seed", range(100))
    def test_matches_loop_rules(self, seed):
        """12 アンカー × 3 gt の格子で、ループで書き下した規則と一致する"""
        x0, y0 = np.meshgrid([0.0, 8.0, 16.0, 24.0], [0.0, 8.0, 16.0])
        anchors = np.column_stack([x0.ravel(), y0.ravel(), x0.ravel() + 16, y0.ravel() + 16])
        rng = np.random.default_rng(seed)
        corner = rng.integers(0, 28, size=(3, 2))
        gt = np.column_stack([corner, corner + rng.integers(4, 24, size=(3, 2))]).astype(np.float64)
        if seed % 4 == 0:
            gt[2] = gt[0]
        labels, matched = assign_anchors(anchors, gt)
        expected_labels, expected_matched = assign_by_loops(anchors, gt)
        assert labels.tolist() == expected_labels
        assert matched.tolist() == expected_matched


class TestNms:
    """nms() のテスト"""

    def test_suppresses_overlap_same_class(self):
        """同じクラスで重なる低スコアは抑制"""
        dets = [Detection((0, 0, 10, 10), 0, 0.6), Detection((1, 1, 10, 10), 0, 0.9)]
        kept = nms(dets, 0.5)
        assert [d.score for d in kept] == [0.9]

    def test_keeps_other_class(self):
        """クラスが違えば抑制しない"""
        dets = [Detection((0, 0, 10, 10), 0, 0.9), Detection((0, 0, 10, 10), 1, 0.8)]
        assert len(nms(dets, 0.5)) == 2

    def test_keeps_below_threshold(self):
        """IoU が閾値以下なら残す"""
        dets = [Detection((0, 0, 2, 2), 0, 0.9), Detection((1, 1, 3, 3), 0, 0.8)]
        assert len(nms(dets, 0.5)) == 2

    def test_order_by_score(self):
        """出力はスコア降順、同点は入力順"""
        dets = [Detection((0, 0, 1, 1), 0, 0.5), Detection((5, 5, 6, 6), 0, 0.7),
                Detection((9, 9, 10, 10), 0, 0.5)]
        kept = nms(dets, 0.5)
        assert [d.box for d in kept] == [(5, 5, 6, 6), (0, 0, 1, 1), (9, 9, 10, 10)]

    def test_detection_to_dict(self):
        """to_dict() は JSON 出力の形式"""
        d = Detection((1.0, 2.0, 3.0, 4.0), 2, 0.5)
        assert d.to_dict() == {"class": 2, "score": 0.5, "bbox": [1.0, 2.0, 3.0, 4.0]}

    @pytest.mark.parametrize("seed", range(50))
    @pytest.mark.parametrize("threshold", [0.3, 0.5])
    def test_matches_suppression_order(self, seed, threshold):
        """20 個のランダムなボックスで、抑制を順に伝える書き方の NMS と一致する"""
        rng = np.random.default_rng(seed)
        corner = rng.uniform(0, 40, size=(20, 2))
        boxes = np.column_stack([corner, corner + rng.uniform(4, 24, size=(20, 2))])
        scores = np.round(rng.uniform(0, 1, size=20), 1)
        classes = rng.integers(0, 2, size=20)
        dets = [Detection(tuple(float(v) for v in b), int(c), float(s)) for b, c, s in zip(boxes, classes, scores)]

        kept = nms(dets, threshold)
        assert kept == nms_by_suppression(dets, threshold)
        assert [d.score for d in kept] == sorted((d.score for d in kept), reverse=True)
        for i, a in enumerate(kept):
            for b in kept[i + 1:]:
                if a.class_id == b.class_id:
                    assert iou(a.box, b.box) <= threshold
