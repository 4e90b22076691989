"""
ヘッドごとのKVキャッシュ予算配分

1. 重要度スコアを α 切り捨て付き min-max 正規化する
   NSV_i = (score_i − min^α) / (max − min^α)   (最小 α 個のヘッドは 0)
2. 共有予算 B を NSV に比例して配分し、ローカルウィンドウ s を足す
   c_i = B · NSV_i / Σ NSV_j + s
3. 最大剰余法で整数化し Σ(c_i − s) = B を厳密に保つ
"""

import csv
from fractions import Fraction
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from langsmith import traceable
from pydantic import BaseModel, Field

from ..core.coalition import CoalitionMask
from ..core.debug_logger import get_debug_logger
from ..core.errors import ConfigurationError
from ..core.games import UtilityOracle
from ..estimator.sampler import load_estimate_values

# 切り捨てられなかったヘッドの NSV の下限 (0 と区別できる最小の正値)
SURVIVOR_FLOOR = float(np.finfo(np.float64).eps)


class AllocationConfig(BaseModel):
    budget: int = Field(..., ge=0)   # B (KVペア単位)
    window: int = Field(8, ge=0)     # s
    alpha: int = Field(0, ge=0)


class AllocationPlan(BaseModel):
    """ヘッドごとのキャッシュサイズ (ウィンドウ込み)"""
    c: List[int]
    nsv: List[float]
    budget: int
    window: int
    alpha: int = 0
    shortfall: int = 0
    labels: Optional[List[str]] = None

    @property
    def n(self) -> int:
        return len(self.c)

    def head_labels(self) -> List[str]:
        return self.labels or [f"p{i}" for i in range(self.n)]

    def to_json(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.model_dump_json(indent=2), encoding="utf-8")
        return path

    @classmethod
    def from_json(cls, path: Union[str, Path]) -> "AllocationPlan":
        try:
            return cls.model_validate_json(Path(path).read_text(encoding="utf-8"))
        except ValueError as e:
            raise ConfigurationError(f"配分プランが不正です: {path}: {e}") from e

    def to_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["player_index", "label", "nsv", "c"])
            for i, label in enumerate(self.head_labels()):
                writer.writerow([i, label, repr(self.nsv[i]), self.c[i]])
        return path


def zeroed_heads(scores: Sequence[float], alpha: int) -> List[int]:
    """スコア最小の α 個 (同点はインデックスの小さい方から)"""
    order = np.argsort(np.asarray(scores, dtype=np.float64), kind="stable")
    return sorted(int(i) for i in order[:alpha])


def normalize_scores(scores: Sequence[float], alpha: int) -> List[float]:
    """α 切り捨て付き min-max 正規化

    min^α は α 番目に小さいスコア (α=0 なら最小値)。
    NSV が 0 になるのはちょうど α 個のヘッドだけで、残ったヘッドのうち
    min^α と同点のもの (α=0 なら最小値のヘッド) は SURVIVOR_FLOOR に持ち上げる。
    max = min^α の縮退時は残ったヘッドすべてを 1 とする。
    """
    x = np.asarray(scores, dtype=np.float64)
    n = x.size
    if n < 2:
        raise ConfigurationError(f"正規化には2ヘッド以上が必要です: n={n}")
    if not 0 <= alpha < n:
        raise ConfigurationError(f"alpha は [0, {n}) の範囲が必要です: {alpha}")
    if not np.all(np.isfinite(x)):
        raise ConfigurationError("スコアに有限でない値があります")

    ordered = np.sort(x, kind="stable")
    low = ordered[alpha - 1] if alpha > 0 else ordered[0]
    high = ordered[-1]
    if high == low:
        nsv = np.ones(n, dtype=np.float64)
    else:
        nsv = np.clip((x - low) / (high - low), SURVIVOR_FLOOR, 1.0)
    nsv[zeroed_heads(x, alpha)] = 0.0
    return nsv.tolist()


def largest_remainder(weights: Sequence[Fraction], total: int) -> List[int]:
    """total を weights に比例して整数配分する (最大剰余法)

    剰余の同点はインデックスの小さい方を優先する。
    """
    weight_sum = sum(weights, Fraction(0))
    if weight_sum <= 0:
        raise ConfigurationError("配分の重みの合計が0です")
    shares = [Fraction(total) * w / weight_sum for w in weights]
    floors = [int(s) for s in shares]
    extra = total - sum(floors)
    order = sorted(range(len(shares)), key=lambda i: (-(shares[i] - floors[i]), i))
    for i in order[:extra]:
        floors[i] += 1
    return floors


def allocate(nsv: Sequence[float], config: AllocationConfig) -> AllocationPlan:
    """c_i = round(B · nsv_i / Σ nsv_j) + s"""
    values = [float(v) for v in nsv]
    if not values:
        raise ConfigurationError("nsv が空です")
    if any(not 0.0 <= v <= 1.0 for v in values):
        raise ConfigurationError(f"nsv は [0, 1] の範囲が必要です: {values}")

    weights = [Fraction(v) for v in values]
    if sum(weights) == 0:
        get_debug_logger().warn("ALLOC", "allocate", "全ヘッドの NSV が0のため均等配分します",
                                {"n": len(values), "budget": config.budget})
        weights = [Fraction(1)] * len(values)
    extra = largest_remainder(weights, config.budget) if config.budget else [0] * len(values)
    return AllocationPlan(
        c=[e + config.window for e in extra], nsv=values,
        budget=config.budget, window=config.window, alpha=config.alpha,
    )


def cap_and_redistribute(plan: AllocationPlan, capacity: Sequence[int]) -> AllocationPlan:
    """容量を超えたヘッドを容量で頭打ちにし、超過分を残りのヘッドへ NSV 比で再配分する

    全ヘッドが容量に達しても予算が余る場合は shortfall に不足分を記録する。
    """
    caps = [int(c) for c in capacity]
    s, B = plan.window, plan.budget
    if len(caps) != plan.n:
        raise ConfigurationError(f"容量の数 {len(caps)} がヘッド数 {plan.n} と一致しません")
    if any(c < s for c in caps):
        raise ConfigurationError(f"容量はウィンドウ s={s} 以上が必要です: {caps}")
    if all(c <= cap for c, cap in zip(plan.c, caps)):
        return plan

    room = [cap - s for cap in caps]
    extra = [0] * plan.n
    capped: set = set()
    while True:
        active = [i for i in range(plan.n) if i not in capped]
        remaining = B - sum(room[i] for i in capped)
        if not active:
            break
        weights = [Fraction(plan.nsv[i]) for i in active]
        if sum(weights) == 0:
            weights = [Fraction(1)] * len(active)
        shares = largest_remainder(weights, remaining) if remaining else [0] * len(active)
        over = [i for i, share in zip(active, shares) if share > room[i]]
        if not over:
            for i, share in zip(active, shares):
                extra[i] = share
            break
        capped.update(over)

    for i in capped:
        extra[i] = room[i]
    shortfall = B - sum(extra)
    if shortfall:
        get_debug_logger().warn("ALLOC", "cap", "容量合計が予算に足りません",
                                {"budget": B, "shortfall": shortfall})
    return plan.model_copy(update={"c": [e + s for e in extra], "shortfall": shortfall})


@traceable(name="allocation_plan")
def allocation_plan(scores: Sequence[float], config: AllocationConfig,
                    labels: Optional[List[str]] = None) -> AllocationPlan:
    """正規化と配分をまとめて行う"""
    plan = allocate(normalize_scores(scores, config.alpha), config)
    get_debug_logger().debug("ALLOC", "plan", "配分プランを作成しました", {
        "n": plan.n, "budget": config.budget, "window": config.window, "alpha": config.alpha,
    })
    return plan.model_copy(update={"labels": labels})


class AlphaSweep(BaseModel):
    plans: Dict[int, AllocationPlan]
    utilities: Dict[int, float] = Field(default_factory=dict)
    best_alpha: Optional[int] = None


def alpha_sweep(scores: Sequence[float], alphas: Sequence[int], budget: int, window: int,
                oracle: Optional[UtilityOracle] = None,
                labels: Optional[List[str]] = None) -> AlphaSweep:
    """α ごとに配分プランを作る

    oracle があれば α 個のヘッドをマスクした効用 U(N ∖ zeroed) で評価し、
    最も高い α (同点は小さい方) を best_alpha とする。n 以上の α は読み飛ばす。
    """
    n = len(scores)
    plans: Dict[int, AllocationPlan] = {}
    utilities: Dict[int, float] = {}
    for alpha in sorted(set(int(a) for a in alphas)):
        if alpha >= n:
            get_debug_logger().warn("ALLOC", "sweep", "alpha がヘッド数以上のため除外します",
                                    {"alpha": alpha, "n": n})
            continue
        plans[alpha] = allocation_plan(scores, AllocationConfig(budget=budget, window=window, alpha=alpha), labels)
        if oracle is not None:
            survivors = set(range(n)) - set(zeroed_heads(scores, alpha))
            utilities[alpha] = oracle.utility(CoalitionMask.from_members(n, survivors))
    if not plans:
        raise ConfigurationError(f"有効な alpha がありません (n={n}): {list(alphas)}")

    best = None
    if utilities:
        best = min(utilities, key=lambda a: (-utilities[a], a))
    return AlphaSweep(plans=plans, utilities=utilities, best_alpha=best)


def load_scores(path: Union[str, Path]) -> Tuple[List[float], List[str]]:
    """推定器の CSV / JSON からスコアとラベルを読み込む"""
    return load_estimate_values(path)
