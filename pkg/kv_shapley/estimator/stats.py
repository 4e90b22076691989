"""
収束判定とサンプル数の見積もり

- mae / converged : 独立な2本の推定の平均絶対差が 1/n 未満なら収束
- required_samples: Hoeffding 不等式 + 和集合上界による必要サンプル数
"""

from math import ceil, log
from typing import TYPE_CHECKING

import numpy as np

from ..core.errors import ConfigurationError

if TYPE_CHECKING:
    from .sampler import SsvEstimate


def _check_pair(a: "SsvEstimate", b: "SsvEstimate") -> None:
    if a.n != b.n or a.slice_set != b.slice_set:
        raise ConfigurationError(
            f"推定の構成が一致しません: n={a.n}/{b.n}, H={a.slice_set}/{b.slice_set}"
        )


def mae(a: "SsvEstimate", b: "SsvEstimate") -> float:
    """Σ|a_i − b_i| / n"""
    _check_pair(a, b)
    return float(np.mean(np.abs(np.asarray(a.values) - np.asarray(b.values))))


def converged(a: "SsvEstimate", b: "SsvEstimate", n: int) -> bool:
    """mae(a, b) < 1/n (厳密な不等号)"""
    if n < 1:
        raise ConfigurationError(f"n は1以上が必要です: {n}")
    return mae(a, b) < 1.0 / n


def average_estimates(a: "SsvEstimate", b: "SsvEstimate") -> "SsvEstimate":
    """2本の推定の値ごとの平均 (収束後に出力する重要度スコア)"""
    _check_pair(a, b)
    values = ((np.asarray(a.values) + np.asarray(b.values)) / 2.0).tolist()
    means = ((np.asarray(a.per_slice_means) + np.asarray(b.per_slice_means)) / 2.0).tolist()
    counts = (np.asarray(a.per_slice_counts) + np.asarray(b.per_slice_counts)).tolist()
    return a.model_copy(update={
        "values": values,
        "per_slice_means": means,
        "per_slice_counts": counts,
        "total_samples": a.total_samples + b.total_samples,
        "oracle_evaluations": a.oracle_evaluations + b.oracle_evaluations,
    })


def required_samples(epsilon: float, delta: float, h_size: int, utility_range: float,
                     n: int = 1) -> int:
    """(ε, δ) 近似に十分なサンプル数

    M = ceil(2 · |H| · r² · ln(2 · |H| · n / δ) / ε²)

    補完的貢献の値域 [−r, r] に対する Hoeffding 上界を、δ を n·|H| 個の
    (プレイヤー, スライス) に分けた和集合上界で使う。定数はタイトではなく、
    経験的な失敗率で確認する。
    """
    if epsilon <= 0:
        raise ConfigurationError(f"epsilon は正が必要です: {epsilon}")
    if not 0 < delta < 1:
        raise ConfigurationError(f"delta は (0, 1) が必要です: {delta}")
    if h_size < 1:
        raise ConfigurationError(f"|H| は1以上が必要です: {h_size}")
    if utility_range <= 0:
        raise ConfigurationError(f"効用範囲は正が必要です: {utility_range}")
    if n < 1:
        raise ConfigurationError(f"n は1以上が必要です: {n}")
    return ceil(2 * h_size * utility_range ** 2 * log(2 * h_size * n / delta) / epsilon ** 2)
