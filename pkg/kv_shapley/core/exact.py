"""
総当たりによる Shapley 値・Sliced Shapley 値

全 2^n 提携を列挙して真値を計算する。推定器テストの基準 (オラクル)。
n <= 20 に制限する。

- exact_shapley      : 限界貢献の期待値 SV_i = Σ_{S∌i} |S|!(n-|S|-1)!/n! · (U(S∪i) − U(S))
- exact_slice_values : SV_{i,j} = Σ_{S∋i, |S|=j} (U(S) − U(N∖S)) / C(n-1, j-1)
- exact_shapley_cc   : SV_i = (1/n) Σ_j SV_{i,j}
- exact_ssv          : SSV_i^H = (1/|H|) Σ_{j∈H} SV_{i,j}

和はサイズごとに固定のインデックス順で取るため、評価順序に依存しない。
"""

from math import comb
from typing import Iterable, List, Optional, Union

import numpy as np
import sympy as sp
from langsmith import traceable

from .coalition import SliceSet, popcounts
from .debug_logger import get_debug_logger
from .errors import CapabilityError, ConfigurationError
from .games import UtilityOracle

ENUMERATION_LIMIT = 20


def _guard(n: int) -> None:
    if n > ENUMERATION_LIMIT:
        raise CapabilityError(
            f"総当たり計算は n <= {ENUMERATION_LIMIT} に限られます (n={n})。"
            "モンテカルロ推定を使用してください"
        )


def _utilities(oracle: UtilityOracle, table: Optional[np.ndarray]) -> np.ndarray:
    _guard(oracle.n)
    if table is None:
        table = oracle.utility_table()
    if table.shape != (1 << oracle.n,):
        raise ConfigurationError(f"効用テーブルの長さ {table.shape} が 2^{oracle.n} と一致しません")
    return table


def _size_sums(values: np.ndarray, sizes: np.ndarray, length: int) -> np.ndarray:
    # bincount は入力順に加算する
    return np.bincount(sizes, weights=values, minlength=length)


@traceable(name="exact_shapley")
def exact_shapley(oracle: UtilityOracle, rational: bool = False,
                  table: Optional[np.ndarray] = None) -> List[float]:
    """限界貢献の列挙による厳密 Shapley 値

    rational=True の場合は有理数演算 (sympy) で計算し、最後に float へ丸める。
    """
    U = _utilities(oracle, table)
    if rational:
        return [float(v) for v in exact_shapley_rational(oracle, table=U)]

    n = oracle.n
    masks = np.arange(1 << n, dtype=np.int64)
    sizes = popcounts(n)
    weights = np.array([1.0 / (n * comb(n - 1, s)) for s in range(n)])
    values = []
    for i in range(n):
        bit = 1 << i
        without = masks[(masks & bit) == 0]
        delta = U[without | bit] - U[without]
        per_size = _size_sums(delta, sizes[without], n)
        values.append(float(np.sum(weights * per_size)))
    get_debug_logger().debug("EXACT", "shapley", "厳密Shapley値を計算しました", {"n": n})
    return values


def exact_shapley_rational(oracle: UtilityOracle,
                           table: Optional[np.ndarray] = None) -> List[sp.Rational]:
    """有理数演算による厳密 Shapley 値 (効率性・対称性を厳密に検証するため)"""
    U = _utilities(oracle, table)
    n = oracle.n
    exact_u = [sp.Rational(float(u)) for u in U]
    sizes = popcounts(n)
    result = []
    for i in range(n):
        bit = 1 << i
        per_size = [sp.Integer(0)] * n
        for mask in range(1 << n):
            if mask & bit:
                continue
            s = int(sizes[mask])
            per_size[s] += exact_u[mask | bit] - exact_u[mask]
        result.append(sum(
            (sp.Rational(1, n * comb(n - 1, s)) * per_size[s] for s in range(n)),
            sp.Integer(0),
        ))
    return result


@traceable(name="exact_slice_values")
def exact_slice_values(oracle: UtilityOracle, table: Optional[np.ndarray] = None) -> np.ndarray:
    """(n, n) 行列。[i, j-1] = SV_{i,j} (プレイヤー i を含むサイズ j の提携の補完的貢献の平均)"""
    U = _utilities(oracle, table)
    n = oracle.n
    full = (1 << n) - 1
    masks = np.arange(1 << n, dtype=np.int64)
    sizes = popcounts(n)
    cc = U - U[full ^ masks]
    norms = np.array([comb(n - 1, j - 1) for j in range(1, n + 1)], dtype=np.float64)
    matrix = np.zeros((n, n), dtype=np.float64)
    for i in range(n):
        bit = 1 << i
        members = masks[(masks & bit) != 0]
        per_size = _size_sums(cc[members], sizes[members], n + 1)
        matrix[i] = per_size[1:] / norms
    return matrix


def exact_shapley_cc(oracle: UtilityOracle, table: Optional[np.ndarray] = None) -> List[float]:
    """補完的貢献による厳密 Shapley 値 SV_i = (1/n) Σ_j SV_{i,j}

    印字された式 (S ⊆ N∖{p_i}、重み 1/C(n-1,|S|)) は n=1 で符号が反転するため、
    p_i を含む (i, j)-提携の定義に従う。
    """
    matrix = exact_slice_values(oracle, table)
    return [float(v) for v in matrix.sum(axis=1) / oracle.n]


def exact_slice_value(oracle: UtilityOracle, i: int, j: int,
                      table: Optional[np.ndarray] = None) -> float:
    """SV_{i,j} (i は0始まりのプレイヤー番号、j は提携サイズ 1..n)"""
    n = oracle.n
    if not 1 <= j <= n:
        raise ConfigurationError(f"スライスサイズ j={j} は [1, {n}] の範囲が必要です")
    if not 0 <= i < n:
        raise ConfigurationError(f"プレイヤー番号 i={i} は [0, {n}) の範囲が必要です")
    return float(exact_slice_values(oracle, table)[i, j - 1])


def exact_ssv(oracle: UtilityOracle, slices: Union[SliceSet, Iterable[int]],
              table: Optional[np.ndarray] = None) -> List[float]:
    """厳密 Sliced Shapley 値"""
    H = slices if isinstance(slices, SliceSet) else SliceSet(slices, oracle.n)
    if H.n != oracle.n:
        raise ConfigurationError(f"スライス集合の n={H.n} がオラクルの n={oracle.n} と一致しません")
    matrix = exact_slice_values(oracle, table)
    cols = [j - 1 for j in H.sizes]
    return [float(v) for v in matrix[:, cols].sum(axis=1) / len(cols)]
