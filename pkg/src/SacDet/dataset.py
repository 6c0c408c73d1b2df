"""
合成マルチスケール図形データセット。

各画像は (seed, index) だけから決定的に生成されます。
図形は円・正方形・三角形の 3 クラスで、一辺（直径）は [8, 48] px の対数一様分布、
1 画像あたり 1〜4 個、互いの IoU は 0.2 未満です。

ディスク上の形式:

    <root>/annotations.json
    <root>/images/000000.simg   （16 バイトヘッダ "SIMG" u32 C, H, W + float32 LE の C×H×W）
"""

import json
import logging
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np

from ._prng import make_rng
from .boxes import iou

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)

CLASSES = ("disc", "square", "triangle")

SIMG_MAGIC = b"SIMG"
_SIMG_HEADER = struct.Struct("<4sIII")

MIN_SCALE = 8.0
MAX_SCALE = 48.0
MAX_OBJECTS = 4
MAX_OVERLAP = 0.2
# 配置の再試行回数（使い切ったらその図形は置かない）
PLACEMENT_TRIES = 50

ANNOTATIONS = "annotations.json"


# =============================================================================
# 描画
# =============================================================================

def sample_scale(rng: np.random.Generator) -> float:
    """[MIN_SCALE, MAX_SCALE] の対数一様サンプル"""
    return float(math.exp(rng.uniform(math.log(MIN_SCALE), math.log(MAX_SCALE))))


def _shape_mask(class_id: int, box: Tuple[float, float, float, float], ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """画素中心 (ys, xs) が図形内部にあるかのマスク"""
    x0, y0, x1, y1 = box
    if class_id == 0:
        cx, cy, r = (x0 + x1) / 2, (y0 + y1) / 2, (x1 - x0) / 2
        return (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r
    inside = (xs >= x0) & (xs <= x1) & (ys >= y0) & (ys <= y1)
    if class_id == 1:
        return inside
    # 底辺が y1、頂点が (中央, y0) の二等辺三角形
    cx, half = (x0 + x1) / 2, (x1 - x0) / 2
    t = (ys - y0) / max(y1 - y0, 1e-9)
    return inside & (np.abs(xs - cx) <= half * t)


def render_image(seed: int, index: int, resolution: int = 64, noise: float = 0.05) -> Tuple[np.ndarray, List[dict]]:
    """
    1 枚の画像と注釈を生成する。

    Returns:
        image: (3, H, W) float32
        objects: [{"class": int, "bbox": [x_min, y_min, x_max, y_max]}, ...]
    """
    rng = make_rng(seed, "synth", index)
    size = resolution
    image = (noise * rng.standard_normal((3, size, size))).astype(np.float32)
    ys, xs = np.meshgrid(np.arange(size) + 0.5, np.arange(size) + 0.5, indexing="ij")

    objects: List[dict] = []
    for _ in range(int(rng.integers(1, MAX_OBJECTS + 1))):
        class_id = int(rng.integers(0, len(CLASSES)))
        scale = min(sample_scale(rng), float(size))
        color = rng.uniform(0.4, 1.0, size=3).astype(np.float32)
        box = None
        for _ in range(PLACEMENT_TRIES):
            x0 = float(rng.uniform(0.0, size - scale))
            y0 = float(rng.uniform(0.0, size - scale))
            candidate = (x0, y0, x0 + scale, y0 + scale)
            if all(iou(candidate, o["bbox"]) < MAX_OVERLAP for o in objects):
                box = candidate
                break
        if box is None:
            continue
        mask = _shape_mask(class_id, box, ys, xs)
        image[:, mask] = color[:, None]
        objects.append({"class": class_id, "bbox": [float(v) for v in box]})
    return image, objects


# =============================================================================
# 画像レコード
# =============================================================================

def encode_image(image: np.ndarray) -> bytes:
    c, h, w = image.shape
    return _SIMG_HEADER.pack(SIMG_MAGIC, c, h, w) + np.ascontiguousarray(image, dtype="<f4").tobytes()


def decode_image(blob: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(blob) < _SIMG_HEADER.size:
        raise ValueError(f"{source}: image record shorter than its header")
    magic, c, h, w = _SIMG_HEADER.unpack_from(blob, 0)
    if magic != SIMG_MAGIC:
        raise ValueError(f"{source}: bad image magic {magic!r}")
    expected = _SIMG_HEADER.size + 4 * c * h * w
    if len(blob) != expected:
        raise ValueError(f"{source}: expected {expected} bytes, found {len(blob)}")
    return np.frombuffer(blob, dtype="<f4", offset=_SIMG_HEADER.size).reshape(c, h, w).astype(np.float32)


def read_image(path: Union[str, Path]) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"画像ファイルが見つかりません: {path}")
    return decode_image(path.read_bytes(), str(path))


# =============================================================================
# データセット
# =============================================================================

@dataclass
class SyntheticDataset:
    """生成済みデータセット（画像は必要時にディスクから読む）"""

    root: Path
    records: List[dict]

    def __len__(self) -> int:
        return len(self.records)

    @classmethod
    def load(cls, root: Union[str, Path]) -> "SyntheticDataset":
        root = Path(root)
        path = root / ANNOTATIONS
        if not path.exists():
            raise FileNotFoundError(f"注釈ファイルが見つかりません: {path}")
        data = json.loads(path.read_text(encoding="utf-8"))
        return cls(root=root, records=list(data["images"]))

    def image(self, index: int) -> np.ndarray:
        return read_image(self.root / self.records[index]["file"])

    def boxes(self, index: int) -> np.ndarray:
        objects = self.records[index]["objects"]
        return np.array([o["bbox"] for o in objects], dtype=np.float64).reshape(-1, 4)

    def labels(self, index: int) -> np.ndarray:
        return np.array([o["class"] for o in self.records[index]["objects"]], dtype=np.int64)

    def batch(self, indices) -> Tuple[np.ndarray, List[np.ndarray], List[np.ndarray]]:
        """(画像 (N, 3, H, W), boxes のリスト, labels のリスト)"""
        images = np.stack([self.image(i) for i in indices])
        return images, [self.boxes(i) for i in indices], [self.labels(i) for i in indices]


def synth_generate(root: Union[str, Path],
                   seed: int,
                   n: int,
                   resolution: int = 64,
                   noise: float = 0.05,
                   threads: Optional[int] = None) -> SyntheticDataset:
    """
    データセットを生成して書き出す。同じ引数なら出力はバイト単位で一致します。

    Raises:
        ValueError: n < 1 の場合
        OSError: 書き込めない場合（パスを含むメッセージ）
    """
    if n < 1:
        raise ValueError(f"image count must be >= 1, is {n}")
    root = Path(root)
    images_dir = root / "images"
    try:
        images_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"出力先を作成できません: {images_dir} ({e})") from e

    def _write(index: int) -> dict:
        image, objects = render_image(seed, index, resolution, noise)
        name = f"images/{index:06d}.simg"
        path = root / name
        try:
            path.write_bytes(encode_image(image))
        except OSError as e:
            raise OSError(f"画像を書き込めません: {path} ({e})") from e
        return {"id": index, "width": resolution, "height": resolution, "file": name, "objects": objects}

    records: List[dict] = []
    with ThreadPoolExecutor(max_workers=threads) as pool:
        # map は入力順に結果を返すので、注釈の並びはスレッド数に依存しない
        for index, record in enumerate(pool.map(_write, range(n))):
            records.append(record)
            if (index + 1) % 100 == 0:
                logger.info(f"生成中: {index + 1}/{n} 枚")

    path = root / ANNOTATIONS
    try:
        path.write_text(json.dumps({"images": records}), encoding="utf-8")
    except OSError as e:
        raise OSError(f"注釈を書き込めません: {path} ({e})") from e
    logger.info(f"データセット生成完了: {root} ({n} 枚, seed={seed})")
    return SyntheticDataset(root=root, records=records)
