"""
学習管理モジュール。
"""

import json
import logging
import math
from dataclasses import replace
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from ._prng import make_rng
from ._stats import EvalReport, evaluate_map
from .boxes import IGNORE, POSITIVE, assign_anchors, encode_boxes
from .config import RunConfig, RuntimeSettings
from .dataset import ANNOTATIONS, SyntheticDataset, synth_generate
from .detector import DetectionModel, detect_forward, predict
from .losses import FocalParams, box_loss, focal_loss_with_logits
from .optim import SGD, LrSchedule
from .tensor import Tensor, backward
from .weights import save_weights

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)

METRICS_FILE = "metrics.jsonl"
WEIGHTS_FILE = "weights.sacw"
CONFIG_FILE = "config.json"


class DivergenceError(RuntimeError):
    """損失が有限値でなくなった場合に発生する例外"""

    def __init__(self, step: int, last_finite_step: Optional[int]):
        self.step = step
        self.last_finite_step = last_finite_step
        super().__init__(f"損失が発散しました (step {step}, 最後の有限ステップ: {last_finite_step})")


def prepare_data(config: RunConfig, settings: Optional[RuntimeSettings] = None) -> Tuple[SyntheticDataset, SyntheticDataset]:
    """`data.path` の train/val を読み込む。無ければ生成する。"""
    threads = settings.threads if settings else None
    root = Path(config.data.path)
    splits = []
    for name, count, seed in (("train", config.data.count, config.data.seed),
                              ("val", config.data.val_count, config.data.val_seed)):
        split = root / name
        if (split / ANNOTATIONS).exists():
            splits.append(SyntheticDataset.load(split))
        elif count > 0:
            resolution = config.backbone().resolution
            splits.append(synth_generate(split, seed, count, resolution, config.data.noise, threads))
        else:
            splits.append(SyntheticDataset(root=split, records=[]))
    return splits[0], splits[1]


def build_targets(model: DetectionModel, boxes: np.ndarray, labels: np.ndarray, config: RunConfig):
    """
    1 画像ぶんの学習ターゲット。

    Returns:
        cls_targets (A, K), box_targets (A, 4), assigned マスク (A,), positives マスク (A,)
    """
    anchor_set = model.anchors()
    anchors = anchor_set.anchors
    assigned, matched = assign_anchors(anchor_set.corners(), boxes,
                                       config.anchors.pos_iou, config.anchors.neg_iou)
    positives = assigned == POSITIVE
    cls_targets = np.zeros((len(anchors), model.config.num_classes))
    cls_targets[positives, labels[matched[positives]]] = 1.0
    box_targets = np.zeros((len(anchors), 4))
    if positives.any():
        box_targets[positives] = encode_boxes(boxes[matched[positives]], anchors[positives])
    return cls_targets, box_targets, assigned != IGNORE, positives


class Trainer:
    """
    検出器をステップ単位で学習します。

    `start()` でモデル・最適化器・出力先を準備し、`step()` で 1 バッチ進めます。
    `run()` は最後まで進めて `finalize()` の結果（pd.Series）を返します。

    出力先には `config.json`（実効設定）、`metrics.jsonl`（1 ステップ 1 行）、
    `weights.sacw`（最終重み）、`checkpoints/step_XXXXXX.sacw` を書き出します。
    同じ設定・seed からは同一バイト列の出力が得られます。
    """

    def __init__(self,
                 config: RunConfig,
                 out_dir: Union[str, Path],
                 train_data: Optional[SyntheticDataset] = None,
                 settings: Optional[RuntimeSettings] = None):
        self.config = config
        self.out_dir = Path(out_dir)
        self.settings = settings
        self._train_data = train_data

        self._model: Optional[DetectionModel] = None
        self._optimizer: Optional[SGD] = None
        self._targets: List[tuple] = []
        self._metrics_file = None
        self._history: List[dict] = []
        self._results: Optional[pd.Series] = None

        self._step_index = 0
        self._total_steps = 0
        self._steps_per_epoch = 0
        self._order: Optional[np.ndarray] = None
        self._is_started = False
        self._is_finished = False
        self._last_finite_step: Optional[int] = None

        self._step_callbacks: List[Callable[['Trainer', dict], None]] = []

    # =========================================================================
    # ステップ実行 API
    # =========================================================================

    def start(self) -> 'Trainer':
        """学習を開始準備する"""
        cfg = self.config
        if self._train_data is None:
            self._train_data, _ = prepare_data(cfg, self.settings)
        if len(self._train_data) == 0:
            raise ValueError("学習データが空です")

        self._model = DetectionModel(cfg.backbone(), seed=cfg.model.seed).astype(cfg.precision)
        schedule = LrSchedule(cfg.train.effective_lr, cfg.train.warmup_steps)
        self._optimizer = SGD(self._model, schedule, cfg.train.momentum, cfg.train.weight_decay)

        data = self._train_data
        self._targets = [build_targets(self._model, data.boxes(i), data.labels(i), cfg) for i in range(len(data))]
        self._steps_per_epoch = math.ceil(len(data) / cfg.train.batch_size)
        self._total_steps = self._steps_per_epoch * cfg.train.epochs
        self._step_index = 0
        self._history = []
        self._results = None
        self._last_finite_step = None

        self.out_dir.mkdir(parents=True, exist_ok=True)
        cfg.dump(self.out_dir / CONFIG_FILE)
        self._metrics_file = open(self.out_dir / METRICS_FILE, "w", encoding="utf-8")
        self._is_started = True
        self._is_finished = False
        logger.info(f"学習開始: {self._model.num_parameters()} パラメータ, "
                    f"{len(data)} 枚 × {cfg.train.epochs} エポック ({self._total_steps} ステップ)")
        return self

    def _batch_indices(self) -> np.ndarray:
        epoch, offset = divmod(self._step_index, self._steps_per_epoch)
        if offset == 0 or self._order is None:
            rng = make_rng(self.config.train.seed, "shuffle", epoch)
            self._order = rng.permutation(len(self._train_data))
        size = self.config.train.batch_size
        return self._order[offset * size:(offset + 1) * size]

    def step(self) -> bool:
        """
        1 バッチ進める。

        Returns:
            bool: まだ続行可能なら True、終了なら False

        Raises:
            DivergenceError: 損失が有限値でない場合（重みは更新しない）
        """
        if not self._is_started:
            raise RuntimeError("start() を呼び出してください")
        if self._is_finished:
            return False

        cfg = self.config
        model = self._model
        indices = self._batch_indices()
        images, _, _ = self._train_data.batch(indices)
        cls_t = np.concatenate([self._targets[i][0] for i in indices])
        box_t = np.concatenate([self._targets[i][1] for i in indices])
        assigned = np.concatenate([self._targets[i][2] for i in indices])
        positives = np.concatenate([self._targets[i][3] for i in indices])

        self._optimizer.zero_grad()
        logits, deltas = detect_forward(model, Tensor(images, dtype=cfg.precision))
        k = model.config.num_classes
        focal = focal_loss_with_logits(logits.reshape(-1, k), cls_t,
                                       FocalParams(cfg.loss.alpha, cfg.loss.gamma), assigned)
        box = box_loss(deltas.reshape(-1, 4), box_t, positives, cfg.loss.box_beta)
        loss = focal + cfg.loss.box_weight * box

        step = self._step_index + 1
        value = loss.item()
        if not math.isfinite(value):
            self._is_finished = True
            self._close()
            raise DivergenceError(step, self._last_finite_step)

        lr = self._optimizer.lr
        backward(loss)
        self._optimizer.step()
        self._last_finite_step = step

        record = {
            "step": step,
            "epoch": self._step_index // self._steps_per_epoch + 1,
            "loss": value,
            "focal": focal.item(),
            "box": box.item(),
            "lr": lr,
        }
        self._history.append(record)
        self._metrics_file.write(json.dumps(record) + "\n")
        self._metrics_file.flush()
        for cb in self._step_callbacks:
            cb(self, record)

        every = cfg.train.checkpoint_every
        if every and step % every == 0:
            save_weights(self.out_dir / "checkpoints" / f"step_{step:06d}.sacw", model.state_dict())
        if step % cfg.train.log_every == 0 or step == self._total_steps:
            logger.info(f"step {step}/{self._total_steps}: loss={value:.4f} "
                        f"(focal={record['focal']:.4f}, box={record['box']:.4f}, lr={lr:.2e})")

        self._step_index = step
        if self._step_index >= self._total_steps:
            self._is_finished = True
        return not self._is_finished

    def _close(self) -> None:
        if self._metrics_file is not None:
            self._metrics_file.close()
            self._metrics_file = None

    # =========================================================================
    # プロパティ
    # =========================================================================

    @property
    def model(self) -> Optional[DetectionModel]:
        return self._model

    @property
    def is_finished(self) -> bool:
        """完了したかどうか"""
        return self._is_finished

    @property
    def progress(self) -> float:
        """進捗率（0.0〜1.0）"""
        if not self._total_steps:
            return 0.0
        return self._step_index / self._total_steps

    @property
    def step_index(self) -> int:
        """完了したステップ数（read-only）"""
        return self._step_index

    @property
    def history(self) -> pd.DataFrame:
        return pd.DataFrame(self._history, columns=["step", "epoch", "loss", "focal", "box", "lr"])

    # =========================================================================
    # 状態スナップショット / コールバック API
    # =========================================================================

    def get_state_snapshot(self) -> dict:
        last = self._history[-1] if self._history else {}
        return {
            "step_index": self.step_index,
            "total_steps": self._total_steps,
            "progress": float(self.progress),
            "epoch": last.get("epoch", 0),
            "loss": last.get("loss"),
            "lr": last.get("lr"),
            "is_finished": self.is_finished,
        }

    def add_step_callback(self, callback: Callable[['Trainer', dict], None]) -> None:
        """ステップ完了時のコールバックを追加（複数登録可能）

        Args:
            callback: (trainer, record) を受け取る関数
        """
        self._step_callbacks.append(callback)

    # =========================================================================
    # finalize / run
    # =========================================================================

    def finalize(self) -> pd.Series:
        """最終重みを保存し、学習の要約を返す"""
        if self._results is not None:
            return self._results
        if not self._is_started:
            raise RuntimeError("学習が開始されていません")

        self._close()
        save_weights(self.out_dir / WEIGHTS_FILE, self._model.state_dict())

        history = self.history
        s = pd.Series(dtype=object)
        s.loc['Steps'] = self._step_index
        s.loc['Epochs'] = int(history['epoch'].max()) if len(history) else 0
        s.loc['Initial Loss'] = float(history['loss'].iloc[0]) if len(history) else np.nan
        last_epoch = history[history['epoch'] == history['epoch'].max()] if len(history) else history
        s.loc['Final Loss'] = float(last_epoch['loss'].mean()) if len(history) else np.nan
        s.loc['Loss Ratio'] = s.loc['Final Loss'] / (s.loc['Initial Loss'] or np.nan)
        s.loc['_history'] = history
        s.loc['_weights'] = str(self.out_dir / WEIGHTS_FILE)
        self._results = s
        logger.info(f"学習終了: 初期損失 {s.loc['Initial Loss']:.4f} → 最終損失 {s.loc['Final Loss']:.4f}")
        return s

    def run(self, step_callback=None) -> pd.Series:
        """学習を最後まで実行"""
        if not self._is_started:
            self.start()
        try:
            while not self._is_finished:
                self.step()
                if step_callback is not None:
                    step_callback(self)
        finally:
            self._close()
        return self.finalize()


def evaluate_model(model: DetectionModel, data: SyntheticDataset, config: RunConfig,
                   settings: Optional[RuntimeSettings] = None, batch_size: int = 32) -> EvalReport:
    """データセット全体で推論し、mAP を計算する"""
    detections = []
    for start in range(0, len(data), batch_size):
        indices = list(range(start, min(start + batch_size, len(data))))
        images, _, _ = data.batch(indices)
        detections.extend(predict(model, images, config.eval.score_threshold,
                                  config.eval.nms_iou, config.eval.max_detections))
    ground_truths = [record["objects"] for record in data.records]
    return evaluate_map(detections, ground_truths, config.eval.iou_thresholds,
                        threads=settings.threads if settings else None)


def run_ablation(config: RunConfig,
                 core: str,
                 seeds: Sequence[int],
                 out_dir: Union[str, Path],
                 settings: Optional[RuntimeSettings] = None) -> pd.DataFrame:
    """
    中核単体と「中核 + 大域コンテキスト」を seed ごとに学習・評価する。

    Returns:
        seed, variant（"core" / "core+gc"）, final_loss, map50 の表
    """
    train_data, val_data = prepare_data(config, settings)
    rows = []
    for seed in seeds:
        for gc in (False, True):
            variant = "core+gc" if gc else "core"
            cfg = replace(config,
                          model=replace(config.model, core=core, global_context=gc, seed=seed),
                          train=replace(config.train, seed=seed))
            trainer = Trainer(cfg, Path(out_dir) / f"{core}_{variant}_seed{seed}", train_data, settings)
            summary = trainer.run()
            report = evaluate_model(trainer.model, val_data, cfg, settings)
            logger.info(f"アブレーション {core} {variant} seed={seed}: mAP@0.5={report.map50:.4f}")
            rows.append({"seed": seed, "variant": variant, "final_loss": summary.loc['Final Loss'],
                         "map50": report.map50})

    frame = pd.DataFrame(rows, columns=["seed", "variant", "final_loss", "map50"])
    means = frame.groupby("variant")["map50"].mean()
    if len(means) == 2 and means["core+gc"] <= means["core"]:
        logger.warning(f"大域コンテキストで平均 mAP@0.5 が改善しませんでした "
                       f"({means['core']:.4f} → {means['core+gc']:.4f})")
    return frame
