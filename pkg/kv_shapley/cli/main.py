"""
kv-shapley コマンドラインインターフェース

サブコマンド:
  estimate           : 2本の独立な SSV 推定 (MAE < 1/n で停止)
  verify             : 乱数ゲームでの総当たり自己検査
  allocate           : スコアから KV キャッシュ配分プランを作成
  evict              : テンソルファイルに配分プランを適用
  mask-experiment    : 上位 / 下位 k 人をマスクした効用
  convergence-report : 収束ログを CSV に変換
  exact              : 厳密 Shapley 値 / SSV

終了コード: 0 成功, 2 設定・形式エラー, 3 未収束, 4 オラクル障害, 5 検証失敗
"""

import argparse
import json
import sys
from pathlib import Path
from typing import Any, Dict, Optional, Sequence

from pydantic import ValidationError

from ..allocation.budget import AllocationPlan, load_scores
from ..config.settings import settings
from ..core.debug_logger import DebugLogLevel, get_debug_logger, setup_debug_logging
from ..core.errors import (
    ConfigurationError,
    EstimateError,
    EvaluationError,
    KvShapleyError,
    NotConvergedError,
    TableFormatError,
    TensorFormatError,
    VerificationError,
)
from ..core.games import build_oracle, load_game_spec
from ..core.trace_logger import ProvenanceType, configure_trace_logging
from ..eviction.evictor import PoolingConfig
from .commands import (
    close_oracle,
    cmd_allocate,
    cmd_convergence_report,
    cmd_estimate,
    cmd_evict,
    cmd_exact,
    cmd_mask_experiment,
    cmd_verify,
    game_from_config,
)
from .reports import RunConfig, RunManifest, load_run_config

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_NOT_CONVERGED = 3
EXIT_ORACLE = 4
EXIT_VERIFICATION = 5


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kv-shapley",
        description="Sliced Shapley 値によるアテンションヘッド重要度推定と KV キャッシュ配分",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
使用例:
  kv-shapley --out runs/add estimate --game game.json --slices 1 2 3 4
  kv-shapley verify --n 6
  kv-shapley --out runs/plan allocate --scores runs/add/ssv.csv --budget 100 --alpha 1
  kv-shapley --out runs/ev evict --tensor-file heads.bin --plan runs/plan/plan.json
  kv-shapley mask-experiment --game game.json --scores runs/add/ssv.csv --ks 1 2
        """,
    )
    parser.add_argument("--config", help="実行設定 JSON (フラグが上書きする)")
    parser.add_argument("--seed", type=int, help="乱数シード")
    parser.add_argument("--workers", type=int, help="ワーカースレッド数")
    parser.add_argument("--out", help="出力ディレクトリ (default: runs/latest)")
    parser.add_argument("--log-level", choices=[lv.name for lv in DebugLogLevel], help="ログレベル")
    parser.add_argument("--trace-file", help="JSON-L トレースログの出力先")

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("estimate", help="SSV 推定")
    p.add_argument("--game", help="GameSpec JSON ファイル")
    p.add_argument("--slices", type=int, nargs="+", help="スライス集合 H")
    p.add_argument("--samples", type=int, help="1本あたりのサンプル上限")
    p.add_argument("--checkpoint-every", type=int, help="チェックポイント間隔")
    p.add_argument("--mode", choices=["round_robin", "iid"])
    p.add_argument("--mirror-credit", action="store_true", default=None, help="補集合側にも符号反転で加算")
    p.add_argument("--resume", action="store_true", default=None, help="table_a/b.bin から再開")
    p.add_argument("--cache", action="store_true", default=None, help="評価キャッシュを使う")
    p.add_argument("--cache-path", help="キャッシュジャーナルの場所")

    p = sub.add_parser("verify", help="総当たり自己検査")
    p.add_argument("--n", type=int, required=True, help="プレイヤー数 (<= 10)")
    p.add_argument("--games", type=int, help="乱数ゲーム数 (default: 50)")

    p = sub.add_parser("allocate", help="KV キャッシュ配分")
    p.add_argument("--scores", required=True, help="推定結果 (ssv.csv / ssv.json)")
    p.add_argument("--budget", type=int, help="共有予算 B")
    p.add_argument("--window", type=int, help="ローカルウィンドウ s")
    p.add_argument("--alpha", type=int, help="α (下位何ヘッドをウィンドウのみにするか)")
    p.add_argument("--alphas", type=int, nargs="+", help="α スイープ")
    p.add_argument("--alpha-grid", action="store_true", help=f"既定の α 集合 {settings.allocation.alpha_grid} でスイープ")
    p.add_argument("--capacity", type=int, nargs="+", help="ヘッドごとの上限 (プレフィックス長)")
    p.add_argument("--game", help="α スイープを評価する GameSpec JSON")

    p = sub.add_parser("evict", help="トークン退避")
    p.add_argument("--tensor-file", required=True)
    p.add_argument("--plan", required=True, help="plan.json")
    p.add_argument("--kernel", type=int, help="max-pooling カーネル幅 (奇数)")
    p.add_argument("--order", choices=["pool_then_mean", "mean_then_pool"])

    p = sub.add_parser("mask-experiment", help="上位 / 下位マスク実験")
    p.add_argument("--game", help="GameSpec JSON ファイル")
    p.add_argument("--scores", required=True)
    p.add_argument("--ks", type=int, nargs="+")

    p = sub.add_parser("convergence-report", help="収束ログの変換")
    p.add_argument("--log", required=True, help="convergence.jsonl")

    p = sub.add_parser("exact", help="厳密 Shapley 値 / SSV")
    p.add_argument("--game", required=True, help="GameSpec JSON ファイル")
    p.add_argument("--slices", type=int, nargs="+", help="指定すると SSV も出力")
    p.add_argument("--rational", action="store_true", help="有理数演算で計算")

    return parser


def _read_json(path: Optional[str]) -> Optional[Dict[str, Any]]:
    if path is None:
        return None
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError:
        raise ConfigurationError(f"ファイルが見つかりません: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"JSON の解析エラー ({path}): {e}") from e


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    """フラグ → RunConfig のフィールド"""
    alphas = getattr(args, "alphas", None)
    if getattr(args, "alpha_grid", False):
        alphas = list(settings.allocation.alpha_grid)
    return {
        "seed": args.seed,
        "workers": args.workers,
        "output_dir": args.out,
        "game": _read_json(getattr(args, "game", None)),
        "slice_set": getattr(args, "slices", None),
        "samples": getattr(args, "samples", None),
        "checkpoint_every": getattr(args, "checkpoint_every", None),
        "mode": getattr(args, "mode", None),
        "mirror_credit": getattr(args, "mirror_credit", None),
        "resume": getattr(args, "resume", None),
        "cache": getattr(args, "cache", None),
        "cache_path": getattr(args, "cache_path", None),
        "budget": getattr(args, "budget", None),
        "window": getattr(args, "window", None),
        "alpha": getattr(args, "alpha", None),
        "alphas": alphas,
        "pooling_kernel": getattr(args, "kernel", None),
        "pooling_order": getattr(args, "order", None),
        "ks": getattr(args, "ks", None),
        "games": getattr(args, "games", None),
    }


def dispatch(args: argparse.Namespace, config: RunConfig, manifest: RunManifest) -> int:
    """サブコマンドを実行し、成果物と要約を manifest に記録する"""
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if args.command == "estimate":
        outcome, estimate = cmd_estimate(config, out_dir)
        manifest.artifacts = outcome.artifacts
        manifest.summary = outcome.model_dump(exclude={"artifacts"})
        if not outcome.converged:
            raise NotConvergedError(outcome.mae, outcome.threshold, outcome.samples_per_run)
        print(f"✅ 収束: MAE={outcome.mae:.3e} < 1/n={outcome.threshold:.3e} "
              f"({outcome.samples_per_run} samples/run, {outcome.checkpoints} checkpoints)")
        for label, value in zip(estimate.labels, estimate.values):
            print(f"   {label}: {value:.6f}")
        return EXIT_OK

    if args.command == "verify":
        report = cmd_verify(args.n, config.seed, config.games)
        path = out_dir / "verify.json"
        path.write_text(report.model_dump_json(indent=2), encoding="utf-8")
        manifest.artifacts = [str(path)]
        manifest.summary = {"passed": report.passed}
        for name, check in report.checks.items():
            mark = "✅" if check.passed else "❌"
            print(f"{mark} {name}: max deviation {check.max_deviation:.3e} {check.detail}".rstrip())
        if not report.passed:
            failed = [name for name, c in report.checks.items() if not c.passed]
            raise VerificationError(f"検証に失敗しました: {', '.join(failed)}")
        return EXIT_OK

    if args.command == "allocate":
        scores, labels = load_scores(args.scores)
        oracle = build_oracle(game_from_config(config)) if config.game is not None else None
        try:
            artifacts = cmd_allocate(scores, config, out_dir, labels, args.capacity, oracle)
        finally:
            if oracle is not None:
                close_oracle(oracle)
        manifest.artifacts = [str(p) for p in artifacts]
        print(f"✅ 配分プランを書き出しました: {len(artifacts)} files → {out_dir}")
        return EXIT_OK

    if args.command == "evict":
        plan = AllocationPlan.from_json(args.plan)
        pooling = PoolingConfig(kernel=config.pooling_kernel, order=config.pooling_order)
        diagnostics = cmd_evict(Path(args.tensor_file), plan, pooling, out_dir, config.workers)
        manifest.artifacts = [str(out_dir / name) for name in ("eviction.json", "eviction.csv", "retained.bin")]
        manifest.summary = {"heads": len(diagnostics),
                            "retained_rows": sum(d.retained_rows for d in diagnostics)}
        print(f"✅ {len(diagnostics)} ヘッドを退避しました → {out_dir}")
        return EXIT_OK

    if args.command == "mask-experiment":
        scores, labels = load_scores(args.scores)
        oracle = build_oracle(game_from_config(config))
        try:
            report = cmd_mask_experiment(oracle, scores, config.ks or [0], labels)
        finally:
            close_oracle(oracle)
        manifest.artifacts = [str(report.to_json(out_dir / "mask_experiment.json")),
                              str(report.to_csv(out_dir / "mask_experiment.csv"))]
        print(report.render())
        return EXIT_OK

    if args.command == "convergence-report":
        summary = cmd_convergence_report(Path(args.log), out_dir)
        manifest.artifacts = [str(out_dir / "convergence.csv")]
        manifest.summary = summary.model_dump()
        print(f"📈 checkpoints={summary.checkpoints} first_crossing={summary.first_crossing} "
              f"final_mae={summary.final_mae}")
        return EXIT_OK

    if args.command == "exact":
        artifacts = cmd_exact(load_game_spec(config.game or {}), out_dir, config.slice_set, args.rational)
        manifest.artifacts = [str(p) for p in artifacts]
        print(f"✅ 厳密値を書き出しました → {out_dir}")
        return EXIT_OK

    raise ConfigurationError(f"不明なコマンド: {args.command}")


def exit_code_for(error: BaseException) -> int:
    """例外階層 → 終了コード"""
    if isinstance(error, NotConvergedError):
        return EXIT_NOT_CONVERGED
    if isinstance(error, (ConfigurationError, EstimateError, TableFormatError, TensorFormatError, ValidationError)):
        return EXIT_CONFIG
    if isinstance(error, EvaluationError):
        return EXIT_ORACLE
    if isinstance(error, VerificationError):
        return EXIT_VERIFICATION
    return EXIT_FAILURE


def run(argv: Optional[Sequence[str]] = None) -> int:
    """CLI 本体。終了コードを返す (manifest.json は常に書き出す)"""
    args = build_parser().parse_args(argv)
    logger = get_debug_logger()
    if args.log_level:
        log_file = Path(settings.system.log_file) if settings.system.log_file else None
        logger = setup_debug_logging(log_file, DebugLogLevel[args.log_level])
    tracer = configure_trace_logging(args.trace_file or settings.system.trace_file)

    out_dir = Path(args.out or "runs/latest")
    manifest = RunManifest.begin(args.command, {})
    entry_id = tracer.start_operation(args.command, vars(args), ProvenanceType.CLI)
    code = EXIT_FAILURE
    try:
        config = load_run_config(args.config, _overrides(args))
        out_dir = Path(config.output_dir)
        manifest.config = config.model_dump()
        code = dispatch(args, config, manifest)
    except (KvShapleyError, ValidationError) as e:
        code = exit_code_for(e)
        logger.error("CLI", args.command, str(e), {"exit_code": code, "type": type(e).__name__})
        print(f"❌ {type(e).__name__}: {e}", file=sys.stderr)
    except Exception as e:
        logger.exception("CLI", args.command, e)
        print(f"❌ 予期しないエラー: {e}", file=sys.stderr)
    finally:
        status = {EXIT_OK: "ok", EXIT_NOT_CONVERGED: "not_converged"}.get(code, "failed")
        manifest.finish(code, status)
        try:
            manifest.write(out_dir)
        except OSError as e:
            logger.warn("CLI", "manifest", f"manifest.json を書けませんでした: {e}")
        tracer.end_operation(entry_id, {"exit_code": code, "status": status})
    return code


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
