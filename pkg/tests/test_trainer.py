"""
学習管理 (trainer.py) のテスト

1. start() 前の step() はエラー
2. step() は step_index を 1 ずつ進め、最後のステップで False を返す
3. 同じ設定からはバイト単位で同一のメトリクスと重みが得られる
4. 損失が発散したら重みを更新せずに DivergenceError
"""

import json

import numpy as np
import pandas as pd
import pytest

from SacDet._stats import EvalReport
from SacDet.config import RunConfig
from SacDet.dataset import SyntheticDataset
from SacDet.detector import DetectionModel
from SacDet.trainer import (
    CONFIG_FILE,
    METRICS_FILE,
    WEIGHTS_FILE,
    DivergenceError,
    Trainer,
    build_targets,
    evaluate_model,
    prepare_data,
    run_ablation,
)
from SacDet.weights import load_weights


def create_config(tmp_path, **train) -> RunConfig:
    """小さなデータセットで数ステップだけ学習する設定"""
    options = {"epochs": 2, "batch_size": 2, "warmup_steps": 0, "log_every": 1}
    options.update(train)
    return RunConfig.from_dict({
        "data": {"path": str(tmp_path / "data"), "count": 4, "val_count": 2},
        "train": options,
    })


class TestStepLoop:
    """step() / is_finished / progress のテスト"""

    def test_step_before_start(self, tmp_path):
        """start() 前の step() は RuntimeError"""
        trainer = Trainer(create_config(tmp_path), tmp_path / "run")
        with pytest.raises(RuntimeError, match="start"):
            trainer.step()

    def test_step_index_increments(self, tmp_path):
        """step() ごとに step_index が 1 増える"""
        trainer = Trainer(create_config(tmp_path), tmp_path / "run").start()
        assert trainer.step_index == 0
        trainer.step()
        assert trainer.step_index == 1
        assert trainer.progress == pytest.approx(0.25)

    def test_step_returns_false_at_end(self, tmp_path):
        """最後のステップまで True、最後で False、以降も False"""
        trainer = Trainer(create_config(tmp_path), tmp_path / "run").start()
        results = [trainer.step() for _ in range(4)]
        assert results == [True, True, True, False]
        assert trainer.is_finished
        assert trainer.step() is False
        assert trainer.step_index == 4

    def test_state_snapshot(self, tmp_path):
        """スナップショットに進捗と直近の損失が入る"""
        trainer = Trainer(create_config(tmp_path), tmp_path / "run").start()
        assert trainer.get_state_snapshot()["loss"] is None
        trainer.step()
        snapshot = trainer.get_state_snapshot()
        assert snapshot["step_index"] == 1
        assert snapshot["total_steps"] == 4
        assert snapshot["epoch"] == 1
        assert np.isfinite(snapshot["loss"])
        assert snapshot["is_finished"] is False

    def test_step_callback(self, tmp_path):
        """コールバックは (trainer, record) で毎ステップ呼ばれる"""
        trainer = Trainer(create_config(tmp_path), tmp_path / "run").start()
        seen = []
        trainer.add_step_callback(lambda t, record: seen.append((t.step_index, record["step"])))
        trainer.step()
        trainer.step()
        # コールバックは step_index を進める前に呼ばれる
        assert seen == [(0, 1), (1, 2)]


class TestOutputs:
    """出力ファイルのテスト"""

    def test_run_writes_outputs(self, tmp_path):
        """config.json / metrics.jsonl / weights.sacw を書き出す"""
        cfg = create_config(tmp_path)
        out = tmp_path / "run"
        summary = Trainer(cfg, out).run()

        assert RunConfig.load(out / CONFIG_FILE) == cfg
        lines = (out / METRICS_FILE).read_text(encoding="utf-8").splitlines()
        records = [json.loads(line) for line in lines]
        assert [r["step"] for r in records] == [1, 2, 3, 4]
        assert [r["epoch"] for r in records] == [1, 1, 2, 2]
        assert set(records[0]) == {"step", "epoch", "loss", "focal", "box", "lr"}
        assert set(load_weights(out / WEIGHTS_FILE)) == set(DetectionModel(cfg.backbone()).state_dict())

        assert summary.loc['Steps'] == 4
        assert summary.loc['Epochs'] == 2
        assert summary.loc['Initial Loss'] == pytest.approx(records[0]["loss"])
        assert summary.loc['Final Loss'] == pytest.approx((records[2]["loss"] + records[3]["loss"]) / 2)
        assert isinstance(summary.loc['_history'], pd.DataFrame)

    def test_checkpoints(self, tmp_path):
        """checkpoint_every ステップごとにチェックポイント"""
        out = tmp_path / "run"
        Trainer(create_config(tmp_path, checkpoint_every=2), out).run()
        names = sorted(p.name for p in (out / "checkpoints").iterdir())
        assert names == ["step_000002.sacw", "step_000004.sacw"]

    def test_deterministic(self, tmp_path):
        """同じ設定の 2 回の学習でメトリクスと重みがバイト単位で一致"""
        cfg = create_config(tmp_path)
        Trainer(cfg, tmp_path / "a").run()
        Trainer(cfg, tmp_path / "b").run()
        for name in (METRICS_FILE, WEIGHTS_FILE):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_zero_lr_keeps_initial_weights(self, tmp_path):
        """lr = 0 では最終重みは初期重みとビット単位で一致"""
        cfg = create_config(tmp_path, lr=0.0, epochs=1)
        Trainer(cfg, tmp_path / "run").run()
        initial = DetectionModel(cfg.backbone(), seed=cfg.model.seed).state_dict()
        final = load_weights(tmp_path / "run" / WEIGHTS_FILE)
        for name, value in initial.items():
            np.testing.assert_array_equal(final[name], value)

    def test_finalize_before_start(self, tmp_path):
        """start() 前の finalize() は RuntimeError"""
        with pytest.raises(RuntimeError):
            Trainer(create_config(tmp_path), tmp_path / "run").finalize()

    def test_finalize_is_cached(self, tmp_path):
        """finalize() は 2 回目以降同じ結果を返す"""
        trainer = Trainer(create_config(tmp_path, epochs=1), tmp_path / "run")
        summary = trainer.run()
        assert trainer.finalize() is summary


class TestDivergence:
    """損失の発散のテスト"""

    def test_non_finite_loss_raises(self, tmp_path):
        """損失が NaN になったら DivergenceError（最後の有限ステップを保持）"""
        trainer = Trainer(create_config(tmp_path), tmp_path / "run").start()
        trainer.step()
        before = trainer.model.state_dict()
        trainer.model.stem.bias.data[...] = np.nan
        with pytest.raises(DivergenceError) as info:
            trainer.step()
        assert info.value.step == 2
        assert info.value.last_finite_step == 1
        assert trainer.is_finished
        np.testing.assert_array_equal(trainer.model.state_dict()["head.cls.bias"], before["head.cls.bias"])

    def test_metrics_closed_after_divergence(self, tmp_path):
        """発散までのメトリクスは書き出されている"""
        trainer = Trainer(create_config(tmp_path), tmp_path / "run").start()
        trainer.model.stem.bias.data[...] = np.inf
        with pytest.raises(DivergenceError) as info:
            trainer.step()
        assert info.value.last_finite_step is None
        assert (tmp_path / "run" / METRICS_FILE).read_text(encoding="utf-8") == ""


class TestData:
    """データ準備とターゲットのテスト"""

    def test_prepare_data_generates_and_reuses(self, tmp_path):
        """無ければ生成し、次回は読み込む"""
        cfg = create_config(tmp_path)
        train, val = prepare_data(cfg)
        assert (len(train), len(val)) == (4, 2)
        again, _ = prepare_data(cfg)
        assert again.records == train.records

    def test_prepare_data_without_validation(self, tmp_path):
        """val_count = 0 なら検証データは空"""
        cfg = RunConfig.from_dict({"data": {"path": str(tmp_path / "data"), "count": 2, "val_count": 0}})
        _, val = prepare_data(cfg)
        assert len(val) == 0

    def test_build_targets(self, tmp_path):
        """正例は one-hot、無視アンカーは assigned から外れる"""
        cfg = create_config(tmp_path)
        train, _ = prepare_data(cfg)
        model = DetectionModel(cfg.backbone())
        cls_t, box_t, assigned, positives = build_targets(model, train.boxes(0), train.labels(0), cfg)
        n = len(model.anchors())
        assert cls_t.shape == (n, 3) and box_t.shape == (n, 4)
        assert positives.any()
        np.testing.assert_array_equal(cls_t[positives].sum(axis=1), 1.0)
        assert not cls_t[~positives].any()
        assert not box_t[~positives].any()
        assert assigned[positives].all()

    def test_empty_training_data(self, tmp_path):
        """学習データが空ならエラー"""
        empty = SyntheticDataset(root=tmp_path, records=[])
        with pytest.raises(ValueError):
            Trainer(create_config(tmp_path), tmp_path / "run", train_data=empty).start()

    def test_evaluate_model(self, tmp_path):
        """検証データで EvalReport を返す"""
        cfg = create_config(tmp_path)
        _, val = prepare_data(cfg)
        report = evaluate_model(DetectionModel(cfg.backbone()), val, cfg)
        assert isinstance(report, EvalReport)
        assert 0.0 <= report.map50 <= 1.0


@pytest.mark.slow
class TestToyTraining:
    """合成データでの小規模学習のテスト（時間がかかる）"""

    def test_dsac_learns(self, tmp_path):
        """toy-d0 + DSAC を 5 エポック学習すると損失が半減し、mAP@0.5 ≥ 0.60"""
        cfg = RunConfig.from_dict({
            "model": {"preset": "toy-d0", "core": "dsac"},
            "data": {"path": str(tmp_path / "data"), "count": 512, "val_count": 128, "seed": 42},
            "train": {"epochs": 5, "seed": 42},
        })
        trainer = Trainer(cfg, tmp_path / "run")
        summary = trainer.run()
        assert summary.loc['Final Loss'] < 0.5 * summary.loc['Initial Loss']
        _, val = prepare_data(cfg)
        assert evaluate_model(trainer.model, val, cfg).map50 >= 0.60

    def test_ablation_table(self, tmp_path):
        """アブレーションは seed × (core, core+gc) の表を返す"""
        cfg = create_config(tmp_path, epochs=1)
        frame = run_ablation(cfg, "dsac", [0, 1], tmp_path / "ablate")
        assert len(frame) == 4
        assert list(frame["variant"]) == ["core", "core+gc", "core", "core+gc"]
        assert frame["map50"].between(0, 1).all()
