"""
小規模アンカー型検出器 (detector.py) のテスト
"""

import numpy as np
import pytest
from scipy.special import expit

from SacDet.boxes import Detection, decode_boxes, nms
from SacDet.detector import (
    PRESETS,
    BackboneConfig,
    DetectionModel,
    StageSpec,
    backbone_forward,
    bifpn_forward,
    detect_forward,
    get_preset,
    predict,
)
from SacDet.tensor import ShapeError, Tensor, no_grad


def create_images(count=2, resolution=32, seed=0):
    """テスト用の画像バッチを作成"""
    rng = np.random.default_rng(seed)
    return rng.uniform(0, 1, size=(count, 3, resolution, resolution)).astype(np.float32)


class TestPresets:
    """プリセット構成のテスト"""

    @pytest.mark.parametrize("name", sorted(PRESETS))
    def test_pyramid_strides(self, name):
        """全プリセットがストライド 8/16/32 のステージを持つ"""
        assert len(get_preset(name).pyramid_stages()) == 3

    def test_unknown_preset(self):
        """未知のプリセット名はエラー"""
        with pytest.raises(ValueError, match="unknown preset"):
            get_preset("toy-d9")

    def test_width_grows(self):
        """d0 < d1 < d2 の順にパラメータが増える"""
        counts = [DetectionModel(get_preset(n)).num_parameters() for n in ("toy-d0", "toy-d1", "toy-d2")]
        assert counts == sorted(counts)
        assert len(set(counts)) == 3


class TestBackboneConfig:
    """BackboneConfig のテスト"""

    def test_resolution_must_divide_32(self):
        """解像度は 32 の倍数"""
        with pytest.raises(ValueError):
            BackboneConfig(stem_channels=8, stages=get_preset("toy-grad").stages, resolution=48)

    def test_unsupported_stage_kernel(self):
        """ステージのカーネルは 3 / 5 のみ"""
        with pytest.raises(ValueError):
            StageSpec(channels=8, repeats=1, stride=2, kernel=7, expand_ratio=1)

    def test_missing_pyramid_stride(self):
        """ストライド 32 に届かない構成はエラー"""
        stages = (StageSpec(8, 1, 2, 3, 1), StageSpec(8, 1, 2, 3, 1))
        with pytest.raises(ValueError, match="missing"):
            BackboneConfig(stem_channels=8, stages=stages)

    def test_dict_round_trip(self):
        """to_dict / from_dict で元に戻る"""
        config = get_preset("toy-d1").with_core("dsac", True)
        assert BackboneConfig.from_dict(config.to_dict()) == config

    def test_with_overrides(self):
        """ステージ単位の中核上書き（1 始まり）"""
        config = get_preset("toy-d0").with_overrides({"stage2": "dapsc"})
        assert [s.core for s in config.stages] == ["plain", "dapsc", "plain", "plain"]

    @pytest.mark.parametrize("key", ["stage0", "stage9", "block1"])
    def test_bad_override_key(self, key):
        """存在しないステージ・不正なキーはエラー"""
        with pytest.raises(ValueError):
            get_preset("toy-d0").with_overrides({key: "dsac"})

    def test_block_sizes(self):
        """toy-grad のブロック入出力サイズ"""
        sizes = get_preset("toy-grad").block_sizes()
        assert sizes == [[(16, 8)], [(8, 4)], [(4, 2)], [(2, 1)]]

    def test_tiny_map_falls_back_to_plain(self):
        """入力 2×2 のブロックは plain・コンテキストなし"""
        config = get_preset("toy-grad").with_core("dsac", True)
        assert config.block_core(0, 0) == ("dsac", True)
        assert config.block_core(3, 0) == ("plain", False)


class TestDetectionModel:
    """DetectionModel のテスト"""

    def test_output_shapes(self):
        """logits (N, A, K) と deltas (N, A, 4)"""
        model = DetectionModel(get_preset("toy-grad"))
        with no_grad():
            logits, deltas = detect_forward(model, Tensor(create_images()))
        anchors = (16 + 4 + 1) * 3
        assert logits.shape == (2, anchors, 2)
        assert deltas.shape == (2, anchors, 4)
        assert len(model.anchors()) == anchors

    def test_pyramid_levels(self):
        """バックボーンはストライド 8/16/32、BiFPN 後はチャネルが揃う"""
        model = DetectionModel(get_preset("toy-grad"))
        with no_grad():
            pyramid = backbone_forward(model, Tensor(create_images()))
            fused = bifpn_forward(model, pyramid)
        assert [level.shape[2] for level in pyramid] == [4, 2, 1]
        assert {level.shape[1] for level in fused} == {model.config.fpn_channels}

    def test_same_seed_same_weights(self):
        """同じ seed からは同じ初期重み"""
        a = DetectionModel(get_preset("toy-grad"), seed=5).state_dict()
        b = DetectionModel(get_preset("toy-grad"), seed=5).state_dict()
        for name in a:
            np.testing.assert_array_equal(a[name], b[name])

    def test_different_seed_different_weights(self):
        """seed が違えば重みも違う"""
        a = DetectionModel(get_preset("toy-grad"), seed=0).state_dict()
        b = DetectionModel(get_preset("toy-grad"), seed=1).state_dict()
        assert not np.array_equal(a["stem.weight"], b["stem.weight"])

    def test_parameter_names(self):
        """パラメータ名は stem / stage / fpn / head のいずれかで始まる"""
        names = [name for name, _ in DetectionModel(get_preset("toy-d0")).named_parameters()]
        assert names[0] == "stem.weight"
        assert "stage1.block0.core.weight" in names
        assert {name.split(".")[0].rstrip("0123456789") for name in names} == {"stem", "stage", "fpn", "head"}

    def test_initial_foreground_probability(self):
        """初期のクラス確率はおよそ 0.01"""
        model = DetectionModel(get_preset("toy-grad"))
        with no_grad():
            logits, _ = detect_forward(model, Tensor(create_images()))
        probs = expit(logits.data)
        assert probs.mean() == pytest.approx(0.01, abs=0.005)

    def test_bad_resolution(self):
        """32 で割り切れない入力はエラー"""
        model = DetectionModel(get_preset("toy-grad"))
        with pytest.raises(ShapeError):
            detect_forward(model, Tensor(create_images(resolution=40)))

    def test_bad_channels(self):
        """チャネル数の違う入力はエラー"""
        model = DetectionModel(get_preset("toy-grad"))
        with pytest.raises(ShapeError):
            detect_forward(model, Tensor(np.zeros((1, 1, 32, 32), dtype=np.float32)))

    def test_converted_core_in_model(self):
        """中核指定がブロックに反映される"""
        model = DetectionModel(get_preset("toy-grad").with_core("dapsc", True))
        assert model.stage1.block0.core_mode == "dapsc"
        assert model.stage4.block0.core_mode == "plain"


class TestPredict:
    """predict() の後処理のテスト"""

    def test_threshold_filters_everything(self):
        """初期モデルはスコア 0.5 を超えない"""
        model = DetectionModel(get_preset("toy-grad"))
        assert predict(model, create_images(), score_threshold=0.5) == [[], []]

    def test_max_detections(self):
        """1 画像あたり max_detections 件まで、スコア降順"""
        model = DetectionModel(get_preset("toy-grad"))
        results = predict(model, create_images(1), score_threshold=0.0, max_detections=5)
        assert 1 <= len(results[0]) <= 5
        scores = [d.score for d in results[0]]
        assert scores == sorted(scores, reverse=True)

    def test_boxes_inside_image(self):
        """ボックスは画像範囲内で幅・高さが正"""
        model = DetectionModel(get_preset("toy-grad"))
        for det in predict(model, create_images(1), score_threshold=0.0)[0]:
            x0, y0, x1, y1 = det.box
            assert 0 <= x0 < x1 <= 32
            assert 0 <= y0 < y1 <= 32

    def test_matches_nms_over_all_candidates(self):
        """結果は閾値を超えた全候補に対する NMS の上位と一致する"""
        model = DetectionModel(get_preset("toy-grad"), seed=3)
        images = create_images(1, seed=2)
        with no_grad():
            logits, deltas = detect_forward(model, Tensor(images))
        scores = expit(logits.data.astype(np.float64))[0]
        boxes = decode_boxes(deltas.data, model.anchors((32, 32)).anchors, (32, 32))[0]
        candidates = [
            Detection(tuple(float(v) for v in boxes[a]), k, float(scores[a, k]))
            for a in range(scores.shape[0]) for k in range(scores.shape[1])
            if boxes[a, 2] > boxes[a, 0] and boxes[a, 3] > boxes[a, 1]
        ]
        expected = nms(candidates, 0.5)[:4]

        results = predict(model, images, score_threshold=0.0, max_detections=4)
        assert results[0] == expected

    def test_pre_nms_top(self):
        """pre_nms_top を与えると NMS 前の候補数が絞られる"""
        model = DetectionModel(get_preset("toy-grad"), seed=3)
        results = predict(model, create_images(1, seed=2), score_threshold=0.0, pre_nms_top=1)
        assert len(results[0]) == 1
