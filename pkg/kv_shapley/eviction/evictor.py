"""
ヘッド単位のトークン退避

ローカルウィンドウのクエリでプレフィックスのキーを採点し、
上位 (c_i − s) 個のプレフィックスKVとウィンドウ全体を残す。

  A      = softmax(q_win · k_outᵀ / √d_h)     (行ごと、プレフィックスのキーのみ)
  scores = mean_rows(maxpool_keys(A))         (kernel は奇数、stride 1、同長パディング)

スコアは入力精度によらず float64 で計算する。
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Literal, Optional, Sequence

import numpy as np
from langsmith import traceable
from numpy.lib.stride_tricks import sliding_window_view
from pydantic import BaseModel, Field, field_validator

from ..allocation.budget import AllocationPlan
from ..core.debug_logger import get_debug_logger
from ..core.errors import ConfigurationError


class PoolingConfig(BaseModel):
    kernel: int = Field(7, ge=1)
    order: Literal["pool_then_mean", "mean_then_pool"] = "pool_then_mean"

    @field_validator("kernel")
    @classmethod
    def _odd(cls, v: int) -> int:
        if v % 2 == 0:
            raise ValueError(f"kernel は奇数が必要です: {v}")
        return v


@dataclass
class HeadTensorBundle:
    """1ヘッド分の入力 (q_win, k_win, v_win は s 行、k_out, v_out は m−s 行)"""
    q_win: np.ndarray
    k_out: np.ndarray
    v_out: np.ndarray
    k_win: np.ndarray
    v_win: np.ndarray

    def __post_init__(self) -> None:
        d = self.k_out.shape[1] if self.k_out.ndim == 2 else -1
        s = self.q_win.shape[0]
        prefix = self.k_out.shape[0]
        expected = {
            "q_win": (s, d), "k_out": (prefix, d), "v_out": (prefix, d),
            "k_win": (s, d), "v_win": (s, d),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ConfigurationError(f"{name} の形状 {getattr(self, name).shape} が {shape} と一致しません")
        if prefix < 1:
            raise ConfigurationError("プレフィックスが空です (m > s が必要)")

    @property
    def s(self) -> int:
        return int(self.q_win.shape[0])

    @property
    def d_h(self) -> int:
        return int(self.k_out.shape[1])

    @property
    def m(self) -> int:
        return int(self.k_out.shape[0]) + self.s


@dataclass
class EvictionResult:
    retained_prefix_indices: np.ndarray
    k_hat: np.ndarray
    v_hat: np.ndarray
    scores: Optional[np.ndarray] = field(default=None)

    def __len__(self) -> int:
        return int(self.k_hat.shape[0])


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def max_pool_rows(a: np.ndarray, kernel: int) -> np.ndarray:
    """最終軸に沿った最大値プーリング (stride 1、-inf で同長パディング)"""
    if kernel == 1:
        return a
    pad = kernel // 2
    widths = [(0, 0)] * (a.ndim - 1) + [(pad, pad)]
    padded = np.pad(a, widths, constant_values=-np.inf)
    return sliding_window_view(padded, kernel, axis=-1).max(axis=-1)


def pooled_scores(q_win: np.ndarray, k_out: np.ndarray, d_h: int,
                  pooling: Optional[PoolingConfig] = None) -> np.ndarray:
    """長さ m−s のプレフィックス重要度"""
    pooling = pooling or PoolingConfig()
    q = np.asarray(q_win, dtype=np.float64)
    k = np.asarray(k_out, dtype=np.float64)
    if k.shape[0] == 0:
        raise ConfigurationError("プレフィックスが空です")
    if q.shape[0] == 0:
        raise ConfigurationError(
            "ローカルウィンドウが空 (s=0) のため採点できません。位置ベースの退避を使用してください"
        )
    weights = softmax_rows(q @ k.T / np.sqrt(d_h))
    if pooling.order == "mean_then_pool":
        return max_pool_rows(weights.mean(axis=0), pooling.kernel)
    return max_pool_rows(weights, pooling.kernel).mean(axis=0)


def evict(bundle: HeadTensorBundle, c_i: int, pooling: Optional[PoolingConfig] = None) -> EvictionResult:
    """上位 (c_i − s) 個のプレフィックスとウィンドウを残す

    同点はインデックスの小さい方を優先し、残したインデックスは昇順に並べる。
    """
    s, prefix = bundle.s, bundle.m - bundle.s
    if c_i < s:
        raise ConfigurationError(f"キャッシュサイズ c={c_i} はウィンドウ s={s} 以上が必要です")
    keep = min(c_i - s, prefix)

    scores = None
    if keep == 0:
        indices = np.zeros(0, dtype=np.int64)
    elif keep == prefix:
        indices = np.arange(prefix, dtype=np.int64)
    else:
        scores = pooled_scores(bundle.q_win, bundle.k_out, bundle.d_h, pooling)
        top = np.argsort(-scores, kind="stable")[:keep]
        indices = np.sort(top).astype(np.int64)

    return EvictionResult(
        retained_prefix_indices=indices,
        k_hat=np.concatenate([bundle.k_out[indices], bundle.k_win], axis=0),
        v_hat=np.concatenate([bundle.v_out[indices], bundle.v_win], axis=0),
        scores=scores,
    )


def attention_readout(query: np.ndarray, k_hat: np.ndarray, v_hat: np.ndarray, d_h: int) -> np.ndarray:
    """softmax(query · k_hatᵀ / √d_h) · v_hat"""
    if k_hat.shape[0] == 0:
        raise ConfigurationError("キャッシュが空です")
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    weights = softmax_rows(np.asarray(k_hat, dtype=np.float64) @ q / np.sqrt(d_h))
    return weights @ np.asarray(v_hat, dtype=np.float64)


def retained_attention_mass(bundle: HeadTensorBundle, result: EvictionResult,
                            query: np.ndarray) -> float:
    """全キーに対する query の注意重みのうち、残したキーが占める割合"""
    keys = np.concatenate([bundle.k_out, bundle.k_win], axis=0).astype(np.float64)
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    weights = softmax_rows(keys @ q / np.sqrt(bundle.d_h))
    prefix = bundle.m - bundle.s
    kept = float(weights[result.retained_prefix_indices].sum()) + float(weights[prefix:].sum())
    return min(1.0, kept)


@traceable(name="evict_heads")
def evict_heads(bundles: Sequence[HeadTensorBundle], plan: AllocationPlan,
                pooling: Optional[PoolingConfig] = None,
                workers: Optional[int] = None) -> List[EvictionResult]:
    """全ヘッドを独立に退避する (スレッドプール)"""
    if len(bundles) != plan.n:
        raise ConfigurationError(f"ヘッド数 {len(bundles)} が配分プランの {plan.n} と一致しません")
    mismatched = [i for i, b in enumerate(bundles) if b.s != plan.window]
    if mismatched:
        get_debug_logger().warn("EVICT", "heads", "プランのウィンドウとテンソルの s が異なります", {
            "plan_window": plan.window, "heads": mismatched[:10],
        })
    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(lambda i: evict(bundles[i], plan.c[i], pooling), range(len(bundles))))
    get_debug_logger().debug("EVICT", "heads", "退避完了", {
        "heads": len(bundles), "retained": sum(len(r) for r in results),
    })
    return results
