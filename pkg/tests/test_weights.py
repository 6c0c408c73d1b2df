"""
重みコンテナ (weights.py) のテスト
"""

import struct
from collections import OrderedDict

import numpy as np
import pytest

from SacDet.detector import DetectionModel, get_preset
from SacDet.weights import (
    ContainerError,
    decode_weights,
    encode_weights,
    load_weights,
    save_weights,
)


def create_tensors():
    rng = np.random.default_rng(0)
    return OrderedDict([
        ("stem.weight", rng.normal(size=(4, 3, 3, 3)).astype(np.float32)),
        ("stem.bias", np.zeros(4, dtype=np.float32)),
        ("head.cls.bias", np.array([-4.59], dtype=np.float32)),
        ("scalar", np.array(1.5, dtype=np.float32)),
    ])


class TestRoundTrip:
    """保存と読み込みのテスト"""

    def test_save_load_save_identical(self, tmp_path):
        """save → load → save でバイト列が一致"""
        first = save_weights(tmp_path / "a.sacw", create_tensors())
        second = save_weights(tmp_path / "b.sacw", load_weights(first))
        assert first.read_bytes() == second.read_bytes()

    def test_order_and_values_preserved(self):
        """名前の順序と値が保たれる"""
        tensors = create_tensors()
        decoded = decode_weights(encode_weights(tensors))
        assert list(decoded) == list(tensors)
        for name, value in tensors.items():
            np.testing.assert_array_equal(decoded[name], value)
            assert decoded[name].shape == value.shape

    def test_float64_stored_as_float32(self):
        """float64 は float32 に丸めて保存"""
        decoded = decode_weights(encode_weights({"w": np.array([0.1], dtype=np.float64)}))
        assert decoded["w"].dtype == np.float32
        assert decoded["w"][0] == np.float32(0.1)

    def test_header_layout(self):
        """先頭は "SACW"、バージョン 1、テンソル数"""
        blob = encode_weights(create_tensors())
        assert struct.unpack_from("<4sII", blob, 0) == (b"SACW", 1, 4)

    def test_model_state_round_trip(self, tmp_path):
        """モデルの state_dict を保存して別モデルへ読み込める"""
        model = DetectionModel(get_preset("toy-grad"), seed=3)
        path = save_weights(tmp_path / "model.sacw", model.state_dict())
        other = DetectionModel(get_preset("toy-grad"), seed=4)
        other.load_state_dict(load_weights(path))
        for name, value in model.state_dict().items():
            np.testing.assert_array_equal(other.state_dict()[name], value)


class TestContainerErrors:
    """壊れたコンテナのテスト"""

    def test_bad_magic(self):
        """マジックが違えばエラー"""
        blob = b"NOPE" + encode_weights(create_tensors())[4:]
        with pytest.raises(ContainerError, match="magic"):
            decode_weights(blob)

    def test_bad_version(self):
        """未対応のバージョン"""
        blob = bytearray(encode_weights(create_tensors()))
        blob[4:8] = struct.pack("<I", 2)
        with pytest.raises(ContainerError, match="version"):
            decode_weights(bytes(blob))

    def test_truncated_data_names_tensor(self):
        """データが途切れていればテンソル名を含むエラー"""
        blob = encode_weights(OrderedDict([("a", np.zeros(2)), ("layer.weight", np.zeros(8))]))
        with pytest.raises(ContainerError, match="layer.weight"):
            decode_weights(blob[:-4])

    def test_trailing_bytes(self):
        """末尾の余分なバイト"""
        with pytest.raises(ContainerError, match="trailing"):
            decode_weights(encode_weights(create_tensors()) + b"\x00")

    def test_short_header(self):
        """ヘッダより短い"""
        with pytest.raises(ContainerError):
            decode_weights(b"SAC")

    def test_duplicate_name(self):
        """同じ名前のテンソルが 2 つ"""
        one = encode_weights({"w": np.zeros(1)})
        body = one[12:]
        blob = struct.pack("<4sII", b"SACW", 1, 2) + body + body
        with pytest.raises(ContainerError, match="duplicate"):
            decode_weights(blob)

    def test_missing_file(self, tmp_path):
        """ファイルが無ければパスを含むエラー"""
        with pytest.raises(FileNotFoundError, match="none.sacw"):
            load_weights(tmp_path / "none.sacw")


class TestLoadIntoModel:
    """load_state_dict() の不一致検出のテスト"""

    def test_missing_tensor_named(self):
        """欠落テンソルの名前を示す"""
        model = DetectionModel(get_preset("toy-grad"))
        state = model.state_dict()
        del state["head.box.bias"]
        with pytest.raises(ContainerError, match="head.box.bias"):
            model.load_state_dict(state)

    def test_unexpected_tensor_named(self):
        """余分なテンソルの名前を示す"""
        model = DetectionModel(get_preset("toy-grad"))
        state = model.state_dict()
        state["extra.weight"] = np.zeros(1)
        with pytest.raises(ContainerError, match="extra.weight"):
            model.load_state_dict(state)

    def test_shape_mismatch_named(self):
        """形状不一致のテンソル名を示す"""
        model = DetectionModel(get_preset("toy-grad"))
        state = model.state_dict()
        state["stem.weight"] = np.zeros((1, 1, 1, 1))
        with pytest.raises(ContainerError, match="stem.weight"):
            model.load_state_dict(state)
