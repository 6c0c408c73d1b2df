"""
sacdet コマンド

使用方法:
    sacdet geometry --kernel 3 --rate 3              # 膨張後のカーネルサイズと same パディング
    sacdet gradcheck --block dsac --seed 7           # 64 bit 勾配チェック
    sacdet init --preset toy-d0 --out base.sacw      # ベースラインの初期重み
    sacdet convert --in base.sacw --out dsac.sacw --mode dsac --verify
    sacdet synth --out data/train --seed 42 --count 512
    sacdet train --config c.json --out runs/dsac
    sacdet eval --config runs/dsac/config.json --weights runs/dsac/weights.sacw
    sacdet bench --block dsac
    sacdet ablate --config c.json --core dsac --seeds 0,1,2 --out runs/ablation

結果（JSON）は標準出力へ、ログは標準エラーへ出力します。
終了コード: 0 成功 / 1 失敗 / 2 引数エラー
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from ._prng import make_rng
from ._stats import evaluate_map
from .bench import compare_cores
from .blocks import CORE_MODES
from .boxes import Detection
from .config import ConfigError, RunConfig, RuntimeSettings
from .convert import SAC_MODES, ConversionError, convert_state_dict, convertible_blocks, output_difference
from .dataset import SyntheticDataset, synth_generate
from .detector import PRESETS, DetectionModel, get_preset
from .geometry import GeometryError, GeometryQuery, resolve
from .gradcheck import GRADCHECK_BLOCKS, run_gradcheck
from .trainer import DivergenceError, Trainer, evaluate_model, run_ablation
from .weights import ContainerError, load_weights, save_weights

logger = logging.getLogger(__name__)

# 変換の検証で許す最大絶対差
VERIFY_TOLERANCE = 1e-6
VERIFY_SAMPLES = 16
# アブレーションで「大域コンテキストあり」が下回ってよい幅
ABLATION_MARGIN = 0.02


def _emit(data) -> None:
    print(json.dumps(data, ensure_ascii=False, indent=2))


# =============================================================================
# サブコマンド
# =============================================================================

def cmd_geometry(args, settings) -> int:
    try:
        result = resolve(GeometryQuery(k_s=args.kernel, a_r=args.rate, s_t=args.stride, i_s=args.input))
    except GeometryError as e:
        # argparse の引数エラーと同じ形式（usage + error）で標準エラーへ
        args.parser.print_usage(sys.stderr)
        print(f"{args.parser.prog}: error: {e}", file=sys.stderr)
        return 2
    print(json.dumps(result.to_dict(), separators=(",", ":")))
    return 0


def cmd_gradcheck(args, settings) -> int:
    report = run_gradcheck(args.block, args.seed, args.points)
    _emit(report.to_dict())
    if not report.passed:
        logger.error(f"勾配チェック失敗: {args.block} 最大相対誤差 {report.max_error:.3e} ≥ {report.tolerance:g}")
        return 1
    return 0


def cmd_init(args, settings) -> int:
    config = get_preset(args.preset).with_core(args.core, args.global_context)
    model = DetectionModel(config, seed=args.seed)
    save_weights(args.out, model.state_dict())
    logger.info(f"初期重みを保存: {args.out} ({model.num_parameters()} パラメータ)")
    return 0


def _verify_images(source: str, resolution: int, seed: int) -> np.ndarray:
    if source == "random":
        rng = make_rng(seed, "verify")
        return rng.standard_normal((VERIFY_SAMPLES, 3, resolution, resolution)).astype(np.float32)
    data = SyntheticDataset.load(source)
    count = min(VERIFY_SAMPLES, len(data))
    images, _, _ = data.batch(range(count))
    return images


def cmd_convert(args, settings) -> int:
    state = load_weights(args.input)
    has_gc = any(".core.pre_gc." in name for name in state)
    baseline_config = get_preset(args.preset).with_core("plain", has_gc)
    gc = args.global_context or has_gc
    only = convertible_blocks(baseline_config, args.mode, gc)
    converted = convert_state_dict(state, args.mode, gc, baseline_config.rate, only=only)
    save_weights(args.out, converted)
    logger.info(f"変換済み重みを保存: {args.out} ({len(only)} ブロックを {args.mode.upper()} に変換)")

    if args.verify is None:
        return 0
    baseline = DetectionModel(baseline_config, seed=0)
    baseline.load_state_dict(state)
    target = DetectionModel(baseline_config.with_core(args.mode, gc), seed=0)
    target.load_state_dict(converted)
    images = _verify_images(args.verify, baseline_config.resolution, args.seed)
    diff = output_difference(baseline, target, images)
    passed = diff <= VERIFY_TOLERANCE
    _emit({"mode": args.mode, "blocks": sorted(only), "samples": len(images),
           "max_abs_diff": diff, "passed": passed})
    if not passed:
        logger.error(f"変換前後で出力が一致しません: 最大絶対差 {diff:.3e}")
        return 1
    return 0


def cmd_synth(args, settings) -> int:
    synth_generate(args.out, args.seed, args.count, args.resolution, args.noise, settings.threads)
    return 0


def _load_config(path: Optional[str]) -> RunConfig:
    return RunConfig.load(path) if path else RunConfig()


def cmd_train(args, settings) -> int:
    config = _load_config(args.config)
    if args.data:
        config.data.path = args.data
    trainer = Trainer(config, args.out, settings=settings)
    try:
        summary = trainer.run()
    except DivergenceError as e:
        logger.error(str(e))
        return 1
    _emit({
        "steps": int(summary.loc['Steps']),
        "initial_loss": summary.loc['Initial Loss'],
        "final_loss": summary.loc['Final Loss'],
        "weights": summary.loc['_weights'],
    })
    return 0


def _read_detections(path: str) -> List[List[Detection]]:
    """`{"images": [{"detections": [{"bbox", "class", "score"}]}]}` 形式の検出結果"""
    file = Path(path)
    if not file.exists():
        raise FileNotFoundError(f"検出結果ファイルが見つかりません: {file}")
    data = json.loads(file.read_text(encoding="utf-8"))
    return [[Detection(tuple(d["bbox"]), int(d["class"]), float(d.get("score", 1.0))) for d in image["detections"]]
            for image in data["images"]]


def cmd_eval(args, settings) -> int:
    config = _load_config(args.config)
    root = Path(args.data) if args.data else Path(config.data.path) / "val"
    data = SyntheticDataset.load(root)
    if args.detections:
        detections = _read_detections(args.detections)
        ground_truths = [record["objects"] for record in data.records]
        report = evaluate_map(detections, ground_truths, config.eval.iou_thresholds, threads=settings.threads)
    else:
        if not args.weights:
            logger.error("--weights または --detections を指定してください")
            return 2
        model = DetectionModel(config.backbone(), seed=config.model.seed).astype(config.precision)
        model.load_state_dict(load_weights(args.weights))
        report = evaluate_model(model, data, config, settings)
    _emit(report.to_dict())
    return 0


def cmd_bench(args, settings) -> int:
    if args.block == "all":
        cores = list(CORE_MODES)
    else:
        cores = sorted({"plain", args.block}, key=CORE_MODES.index)
    frame = compare_cores(cores, channels=args.channels, size=args.size, batch=args.batch, repeats=args.repeats)
    if args.block != "all":
        frame = frame.loc[[args.block]]
    _emit(json.loads(frame.reset_index().to_json(orient="records")))
    return 0


def cmd_ablate(args, settings) -> int:
    config = _load_config(args.config)
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    frame = run_ablation(config, args.core, seeds, args.out, settings)
    means = frame.groupby("variant")["map50"].mean()
    passed = bool(means["core+gc"] >= means["core"] - ABLATION_MARGIN)
    _emit({
        "core": args.core,
        "seeds": seeds,
        "mean_map50": {k: float(v) for k, v in means.items()},
        "runs": json.loads(frame.to_json(orient="records")),
        "passed": passed,
    })
    return 0 if passed else 1


# =============================================================================
# 引数
# =============================================================================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sacdet", description="スイッチャブル・アトラス畳み込みの玩具検出器")
    parser.add_argument("--verbose", "-v", action="store_true", help="DEBUG ログを出力する")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("geometry", help="膨張後のカーネルサイズと same パディングを表示")
    p.add_argument("--kernel", type=int, required=True, help="元のカーネルサイズ（奇数）")
    p.add_argument("--rate", type=int, required=True, help="アトラスレート")
    p.add_argument("--stride", type=int, default=1, help="ストライド（デフォルト: 1）")
    p.add_argument("--input", type=int, default=64, help="入力の空間サイズ（デフォルト: 64）")
    p.set_defaults(handler=cmd_geometry, parser=p)

    p = sub.add_parser("gradcheck", help="64 bit の中心差分で勾配を検査")
    p.add_argument("--block", choices=GRADCHECK_BLOCKS, required=True, help="検査するブロック")
    p.add_argument("--seed", type=int, default=0, help="乱数 seed（デフォルト: 0）")
    p.add_argument("--points", type=int, default=5, help="テンソルあたりの比較点数（デフォルト: 5）")
    p.set_defaults(handler=cmd_gradcheck)

    p = sub.add_parser("init", help="ベースライン（または指定中核）の初期重みを書き出す")
    p.add_argument("--preset", choices=sorted(PRESETS), default="toy-d0", help="モデル構成（デフォルト: toy-d0）")
    p.add_argument("--core", choices=CORE_MODES, default="plain", help="中核（デフォルト: plain）")
    p.add_argument("--global-context", action="store_true", help="大域コンテキストを付ける")
    p.add_argument("--seed", type=int, default=0, help="初期化 seed（デフォルト: 0）")
    p.add_argument("--out", required=True, help="出力する重みファイル")
    p.set_defaults(handler=cmd_init)

    p = sub.add_parser("convert", help="ベースライン重みを DSAC / DAPSC へ恒等変換")
    p.add_argument("--in", dest="input", required=True, help="入力の重みファイル")
    p.add_argument("--out", required=True, help="出力の重みファイル")
    p.add_argument("--mode", choices=SAC_MODES, required=True, help="変換先の中核")
    p.add_argument("--preset", choices=sorted(PRESETS), default="toy-d0",
                   help="入力重みのモデル構成（デフォルト: toy-d0）")
    p.add_argument("--no-global-context", dest="global_context", action="store_false",
                   help="前後コンテキストを追加しない")
    p.add_argument("--verify", nargs="?", const="random", default=None, metavar="DATA",
                   help="変換前後の出力を比較する（DATA 省略時はランダム入力 16 枚）")
    p.add_argument("--seed", type=int, default=0, help="検証入力の seed（デフォルト: 0）")
    p.set_defaults(handler=cmd_convert)

    p = sub.add_parser("synth", help="合成データセットを生成")
    p.add_argument("--out", required=True, help="出力ディレクトリ")
    p.add_argument("--seed", type=int, default=42, help="乱数 seed（デフォルト: 42）")
    p.add_argument("--count", type=int, default=512, help="画像枚数（デフォルト: 512）")
    p.add_argument("--resolution", type=int, default=64, help="画像サイズ（デフォルト: 64）")
    p.add_argument("--noise", type=float, default=0.05, help="背景ノイズの標準偏差（デフォルト: 0.05）")
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("train", help="検出器を学習")
    p.add_argument("--config", help="設定 JSON（省略時は既定値）")
    p.add_argument("--out", required=True, help="出力ディレクトリ")
    p.add_argument("--data", help="データセットのルート（設定の data.path を上書き）")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", help="mAP を評価")
    p.add_argument("--config", help="設定 JSON（省略時は既定値）")
    p.add_argument("--weights", help="重みファイル")
    p.add_argument("--data", help="評価するデータセット（デフォルト: <data.path>/val）")
    p.add_argument("--detections", help="モデルの代わりに評価する検出結果 JSON")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("bench", help="中核のスループットと乗算回数を計測")
    p.add_argument("--block", choices=list(CORE_MODES) + ["all"], default="all", help="計測する中核")
    p.add_argument("--channels", type=int, default=32, help="チャネル数（デフォルト: 32）")
    p.add_argument("--size", type=int, default=32, help="空間サイズ（デフォルト: 32）")
    p.add_argument("--batch", type=int, default=4, help="バッチサイズ（デフォルト: 4）")
    p.add_argument("--repeats", type=int, default=3, help="計測回数（デフォルト: 3）")
    p.set_defaults(handler=cmd_bench)

    p = sub.add_parser("ablate", help="中核単体と中核 + 大域コンテキストを比較")
    p.add_argument("--config", help="設定 JSON（省略時は既定値）")
    p.add_argument("--core", choices=CORE_MODES, default="dsac", help="比較する中核（デフォルト: dsac）")
    p.add_argument("--seeds", default="0,1,2", help="seed（カンマ区切り）例: 0,1,2")
    p.add_argument("--out", required=True, help="出力ディレクトリ")
    p.set_defaults(handler=cmd_ablate)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)

    try:
        settings = RuntimeSettings.from_environment()
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    level = logging.DEBUG if args.verbose else getattr(logging, settings.log_level or "INFO")
    logging.basicConfig(
        level=level,
        format="%(asctime)s - %(levelname)s - %(message)s",
        datefmt="%H:%M:%S",
    )

    try:
        return args.handler(args, settings)
    except (FileNotFoundError, ContainerError, ConversionError, ConfigError) as e:
        logger.error(str(e))
        return 1
    except (OSError, ValueError) as e:
        logger.error(f"{args.command} に失敗しました: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
