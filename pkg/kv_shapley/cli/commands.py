"""
サブコマンドの本体

各関数は成果物を出力ディレクトリに書き、結果オブジェクトを返す。
終了コードへの対応付けは cli/main.py が行う。
"""

import csv
import json
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import sympy as sp
from langsmith import traceable
from pydantic import BaseModel, Field, ValidationError

from ..allocation.budget import (
    AllocationConfig,
    AllocationPlan,
    alpha_sweep,
    allocation_plan,
    cap_and_redistribute,
)
from ..bridge.cache import CachedOracle, load_cache
from ..config.settings import settings
from ..core.coalition import CoalitionMask, SliceSet
from ..core.debug_logger import get_debug_logger
from ..core.errors import CapabilityError, ConfigurationError
from ..core.exact import (
    ENUMERATION_LIMIT,
    exact_shapley,
    exact_shapley_cc,
    exact_shapley_rational,
    exact_slice_values,
    exact_ssv,
)
from ..core.export import write_value_csv
from ..core.games import GameSpec, TabularGame, UtilityOracle, build_oracle, load_game_spec, random_tabular_game
from ..estimator.sampler import SsvEstimate, SsvSampler
from ..estimator.schedule import coverage_floor
from ..estimator.stats import average_estimates, converged, mae
from ..estimator.table import load_table, save_table
from ..eviction.evictor import PoolingConfig, evict_heads, retained_attention_mass
from ..eviction.tensor_io import read_tensor_file, write_retained_file
from .reports import MaskExperimentReport, MaskRow, RunConfig

VERIFY_LIMIT = 10
EQUIVALENCE_TOL = 1e-9


def game_from_config(config: RunConfig) -> GameSpec:
    if config.game is None:
        raise ConfigurationError("ゲーム定義がありません (--game または設定ファイルの game)")
    return load_game_spec(config.game)


def slice_set_for(config: RunConfig, n: int) -> SliceSet:
    """明示されたスライス集合は厳密に検証し、既定値は n の比率から作る"""
    if config.slice_set is not None:
        return SliceSet(config.slice_set, n)
    return SliceSet.scaled(settings.estimator.slice_fractions, n)


def derive_seeds(seed: int) -> Tuple[int, int]:
    """独立な2本の推定に使うシード"""
    children = np.random.SeedSequence(seed).spawn(2)
    return int(children[0].generate_state(1)[0]), int(children[1].generate_state(1)[0])


def open_oracle(config: RunConfig, spec: GameSpec, out_dir: Path) -> UtilityOracle:
    oracle = build_oracle(spec)
    if config.cache and spec.family != "external":
        cache = load_cache(config.cache_path or out_dir / "cache.jsonl", journal=True)
        oracle = CachedOracle(oracle, cache)
    return oracle


def close_oracle(oracle: UtilityOracle) -> None:
    """外部オラクルならサブプロセスやイベントループを閉じる"""
    close = getattr(oracle, "close", None)
    if callable(close):
        close()


# --- estimate ---------------------------------------------------------------

class CheckpointRow(BaseModel):
    """収束ログ (convergence.jsonl) の1行"""
    samples_per_run: int
    mae: float
    threshold: float
    converged: bool


class EstimateOutcome(BaseModel):
    converged: bool
    mae: float
    threshold: float
    samples_per_run: int
    checkpoints: int
    oracle_evaluations: int
    artifacts: List[str] = Field(default_factory=list)


@traceable(name="cmd_estimate")
def cmd_estimate(config: RunConfig, out_dir: Path) -> Tuple[EstimateOutcome, SsvEstimate]:
    """独立な2本の推定を回し、MAE < 1/n で停止する

    収束しなくても成果物は書き出し、converged=False を返す。
    """
    oracle = open_oracle(config, game_from_config(config), out_dir)
    try:
        return _run_estimation(config, oracle, out_dir)
    finally:
        close_oracle(oracle)


def _run_estimation(config: RunConfig, oracle: UtilityOracle,
                    out_dir: Path) -> Tuple[EstimateOutcome, SsvEstimate]:
    logger = get_debug_logger()
    n = oracle.n
    H = slice_set_for(config, n)
    seed_a, seed_b = derive_seeds(config.seed)
    table_paths = (out_dir / "table_a.bin", out_dir / "table_b.bin")

    samplers = []
    for seed, path in zip((seed_a, seed_b), table_paths):
        table = None
        if config.resume and path.exists():
            table = load_table(path, expected_n=n, expected_slices=H)
            logger.info("CLI", "estimate", "テーブルから再開します", {"path": str(path), "samples": table.samples_drawn})
        samplers.append(SsvSampler(oracle, H, seed, config.mode, config.mirror_credit, table))
    evaluations_start = oracle.evaluations

    floor = coverage_floor(n, H, config.mode)
    if config.samples < floor:
        raise ConfigurationError(f"サンプル上限 {config.samples} がカバレッジ下限 {floor} を下回っています")
    interval = config.checkpoint_interval()
    threshold = 1.0 / n
    log_path = out_dir / "convergence.jsonl"
    log_path.parent.mkdir(parents=True, exist_ok=True)
    if not config.resume:
        log_path.write_text("", encoding="utf-8")

    done = min(s.table.samples_drawn for s in samplers)
    target = max(done + interval, floor)
    checkpoints = 0
    while True:
        target = min(target, config.samples)
        for sampler in samplers:
            if sampler.table.samples_drawn < target:
                sampler.run(target - sampler.table.samples_drawn, config.workers)
        estimates = [s.finalize() for s in samplers]
        gap = mae(*estimates)
        is_converged = converged(estimates[0], estimates[1], n)
        checkpoints += 1
        row = CheckpointRow(samples_per_run=target, mae=gap, threshold=threshold, converged=is_converged)
        with open(log_path, "a", encoding="utf-8") as f:
            f.write(row.model_dump_json() + "\n")
        for sampler, path in zip(samplers, table_paths):
            save_table(sampler.table, path)
        logger.info("CLI", "checkpoint", f"samples={target} MAE={gap:.3e}", {"converged": is_converged})
        if is_converged or target >= config.samples:
            break
        target += interval

    averaged = average_estimates(estimates[0], estimates[1])
    averaged = averaged.model_copy(update={"oracle_evaluations": oracle.evaluations - evaluations_start})
    artifacts = [
        estimates[0].to_json(out_dir / "estimate_a.json"),
        estimates[1].to_json(out_dir / "estimate_b.json"),
        averaged.to_json(out_dir / "ssv.json"),
        averaged.to_csv(out_dir / "ssv.csv"),
        *table_paths,
        log_path,
    ]
    outcome = EstimateOutcome(
        converged=is_converged, mae=gap, threshold=threshold, samples_per_run=target,
        checkpoints=checkpoints, oracle_evaluations=averaged.oracle_evaluations,
        artifacts=[str(p) for p in artifacts],
    )
    return outcome, averaged


# --- verify -----------------------------------------------------------------

class CheckResult(BaseModel):
    passed: bool
    max_deviation: float = 0.0
    detail: str = ""


class VerificationReport(BaseModel):
    n: int
    seed: int
    games: int
    checks: Dict[str, CheckResult]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks.values())


def symmetrize(game: TabularGame) -> TabularGame:
    """プレイヤー 0 と 1 を対称にしたゲーム (1 だけを含む提携に 0 だけの値を写す)"""
    values = game.values.copy()
    masks = np.arange(values.size)
    only_one = masks[((masks & 1) == 0) & ((masks & 2) != 0)]
    values[only_one] = values[only_one ^ 3]
    return TabularGame(values, game.players)


@traceable(name="cmd_verify")
def cmd_verify(n: int, seed: int, games: int = 50) -> VerificationReport:
    """乱数ゲームでの総当たり自己検査

    - equivalence : 限界貢献の式と補完的貢献の式の一致 (1e-9)
    - efficiency  : Σ SV = U(N) − U(∅) (有理数演算で厳密)
    - symmetry    : 対称なプレイヤーの値が厳密に等しい
    - slices      : スライス値の平均が Shapley 値と一致し、単一スライスの SSV が列と一致
    - single      : n=1 で SV = U({p}) − U(∅)
    """
    if n > VERIFY_LIMIT:
        raise CapabilityError(f"verify は n <= {VERIFY_LIMIT} に限られます (n={n})")
    if n < 1:
        raise ConfigurationError(f"n は1以上が必要です: {n}")

    rng = np.random.default_rng(seed)
    game_seeds = rng.integers(0, 2**31 - 1, size=games)
    eq_dev = slice_dev = 0.0
    eff_ok = sym_ok = True
    for game_seed in game_seeds:
        game = random_tabular_game(n, int(game_seed))
        table = game.utility_table()

        marginal = np.asarray(exact_shapley(game, table=table))
        complementary = np.asarray(exact_shapley_cc(game, table=table))
        eq_dev = max(eq_dev, float(np.max(np.abs(marginal - complementary))))

        matrix = exact_slice_values(game, table=table)
        slice_dev = max(slice_dev, float(np.max(np.abs(matrix.mean(axis=1) - marginal))))
        for j in (1, n):
            column = np.asarray(exact_ssv(game, [j], table=table))
            slice_dev = max(slice_dev, float(np.max(np.abs(column - matrix[:, j - 1]))))

        subject = symmetrize(game) if n >= 2 else game
        exact_values = exact_shapley_rational(subject)
        U = subject.utility_table()
        if sum(exact_values, sp.Integer(0)) != sp.Rational(float(U[-1])) - sp.Rational(float(U[0])):
            eff_ok = False
        if n >= 2 and exact_values[0] != exact_values[1]:
            sym_ok = False

    single = random_tabular_game(1, seed)
    single_table = single.utility_table()
    single_value = exact_shapley(single, table=single_table)[0]
    single_dev = abs(single_value - (single_table[1] - single_table[0]))

    checks = {
        "equivalence": CheckResult(passed=eq_dev <= EQUIVALENCE_TOL, max_deviation=eq_dev),
        "efficiency": CheckResult(passed=eff_ok, detail="rational arithmetic"),
        "symmetry": CheckResult(passed=sym_ok, detail="players 0 and 1" if n >= 2 else "n < 2"),
        "slices": CheckResult(passed=slice_dev <= EQUIVALENCE_TOL, max_deviation=slice_dev),
        "single": CheckResult(passed=single_dev <= EQUIVALENCE_TOL, max_deviation=float(single_dev)),
    }
    return VerificationReport(n=n, seed=seed, games=games, checks=checks)


# --- allocate ---------------------------------------------------------------

@traceable(name="cmd_allocate")
def cmd_allocate(scores: Sequence[float], config: RunConfig, out_dir: Path,
                 labels: Optional[List[str]] = None,
                 capacity: Optional[Sequence[int]] = None,
                 oracle: Optional[UtilityOracle] = None) -> List[Path]:
    """配分プラン (CSV + JSON) を書く。alphas があれば α ごとに1プラン"""
    artifacts: List[Path] = []
    if config.alphas:
        sweep = alpha_sweep(scores, config.alphas, config.budget, config.window, oracle, labels)
        for alpha, plan in sweep.plans.items():
            if capacity is not None:
                plan = cap_and_redistribute(plan, capacity)
            artifacts.append(plan.to_csv(out_dir / f"plan-alpha-{alpha}.csv"))
            artifacts.append(plan.to_json(out_dir / f"plan-alpha-{alpha}.json"))
        sweep_path = out_dir / "sweep.json"
        sweep_path.write_text(sweep.model_dump_json(indent=2), encoding="utf-8")
        artifacts.append(sweep_path)
        return artifacts

    plan = allocation_plan(scores, AllocationConfig(budget=config.budget, window=config.window,
                                                    alpha=config.alpha), labels)
    if capacity is not None:
        plan = cap_and_redistribute(plan, capacity)
    artifacts.append(plan.to_csv(out_dir / "plan.csv"))
    artifacts.append(plan.to_json(out_dir / "plan.json"))
    return artifacts


# --- evict ------------------------------------------------------------------

class HeadDiagnostics(BaseModel):
    head: int
    c: int
    retained_prefix_indices: List[int]
    retained_rows: int
    retained_mass: Optional[float]


@traceable(name="cmd_evict")
def cmd_evict(tensor_file: Path, plan: AllocationPlan, pooling: PoolingConfig,
              out_dir: Path, workers: int = 1) -> List[HeadDiagnostics]:
    """テンソルファイルの全ヘッドを退避し、保持した注意質量を記録する

    質量の基準クエリはウィンドウ内の最新クエリ (s=0 なら質量は記録しない)。
    保持した K̂/V̂ は retained.bin に書き出す。
    """
    header, bundles = read_tensor_file(tensor_file)
    results = evict_heads(bundles, plan, pooling, workers)
    diagnostics = []
    for head, (bundle, result) in enumerate(zip(bundles, results)):
        mass = retained_attention_mass(bundle, result, bundle.q_win[-1]) if bundle.s else None
        diagnostics.append(HeadDiagnostics(
            head=head, c=plan.c[head],
            retained_prefix_indices=result.retained_prefix_indices.tolist(),
            retained_rows=len(result), retained_mass=mass,
        ))

    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "eviction.json").write_text(json.dumps({
        "tensor_file": str(tensor_file), "header": header.model_dump(),
        "pooling": pooling.model_dump(), "heads": [d.model_dump() for d in diagnostics],
    }, indent=2), encoding="utf-8")
    with open(out_dir / "eviction.csv", "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["head", "c", "retained_rows", "retained_mass"])
        for d in diagnostics:
            writer.writerow([d.head, d.c, d.retained_rows, "" if d.retained_mass is None else repr(d.retained_mass)])
    write_retained_file(out_dir / "retained.bin", results, header.s)
    return diagnostics


# --- mask-experiment --------------------------------------------------------

def ranking(scores: Sequence[float], policy: str) -> List[int]:
    """top は降順、low は昇順 (同点はインデックスの小さい方が先)"""
    x = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-x if policy == "top" else x, kind="stable")
    return [int(i) for i in order]


@traceable(name="cmd_mask_experiment")
def cmd_mask_experiment(oracle: UtilityOracle, scores: Sequence[float], ks: Sequence[int],
                        labels: Optional[List[str]] = None) -> MaskExperimentReport:
    """上位 / 下位 k 人をマスクした効用 U(N ∖ masked) を測る"""
    n = oracle.n
    if len(scores) != n:
        raise ConfigurationError(f"スコア数 {len(scores)} がプレイヤー数 {n} と一致しません")
    bad = [k for k in ks if not 0 <= k < n]
    if bad:
        raise ConfigurationError(f"k は [0, {n}) の範囲が必要です: {bad}")

    full = CoalitionMask.full(n)
    baseline = oracle.utility(full)
    orders = {policy: ranking(scores, policy) for policy in ("top", "low")}
    rows = []
    for k in sorted(set(ks)):
        for policy in ("top", "low"):
            masked = sorted(orders[policy][:k])
            survivors = CoalitionMask.from_members(n, set(range(n)) - set(masked))
            utility = baseline if k == 0 else oracle.utility(survivors)
            rows.append(MaskRow(k=k, policy=policy, masked_players=masked, utility=utility))  # type: ignore[arg-type]
    return MaskExperimentReport(baseline=baseline, rows=rows, labels=labels or [])


# --- convergence-report -----------------------------------------------------

class ConvergenceSummary(BaseModel):
    checkpoints: int
    threshold: Optional[float]
    first_crossing: Optional[int]
    final_mae: Optional[float]


def cmd_convergence_report(log_path: Path, out_dir: Path) -> ConvergenceSummary:
    """収束ログ (JSON-L) を CSV と要約に書き直す"""
    rows = []
    try:
        with open(log_path, "r", encoding="utf-8") as f:
            for number, line in enumerate(f, 1):
                if not line.strip():
                    continue
                try:
                    row = CheckpointRow.model_validate_json(line)
                except ValidationError as e:
                    raise ConfigurationError(f"収束ログ {log_path} の {number} 行目が不正です: {e}") from e
                rows.append((row.samples_per_run, row.mae, row.threshold, row.converged))
    except FileNotFoundError:
        raise ConfigurationError(f"収束ログが見つかりません: {log_path}") from None
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "convergence.csv", "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["checkpoint", "samples_per_run", "mae", "threshold", "converged"])
        for i, (samples, gap, threshold, ok) in enumerate(rows):
            writer.writerow([i, samples, repr(gap), repr(threshold), int(ok)])
    crossing = next((samples for samples, _, _, ok in rows if ok), None)
    return ConvergenceSummary(
        checkpoints=len(rows),
        threshold=rows[-1][2] if rows else None,
        first_crossing=crossing,
        final_mae=rows[-1][1] if rows else None,
    )


# --- exact ------------------------------------------------------------------

@traceable(name="cmd_exact")
def cmd_exact(spec: GameSpec, out_dir: Path, slice_set: Optional[List[int]] = None,
              rational: bool = False) -> List[Path]:
    """厳密 Shapley 値 (と指定があれば厳密 SSV) を CSV に書く"""
    if spec.n > ENUMERATION_LIMIT:
        raise CapabilityError(f"厳密計算は n <= {ENUMERATION_LIMIT} に限られます (n={spec.n})")
    oracle = build_oracle(spec)
    try:
        table = oracle.utility_table()
    finally:
        close_oracle(oracle)
    labels = [oracle.players.label_text(i) for i in range(oracle.n)]
    artifacts = [write_value_csv(out_dir / "shapley.csv", exact_shapley(oracle, rational, table),
                                 labels, column="shapley")]
    if slice_set is not None:
        values = exact_ssv(oracle, SliceSet(slice_set, oracle.n), table=table)
        artifacts.append(write_value_csv(out_dir / "ssv.csv", values, labels, column="ssv"))
    return artifacts
