"""
効用オラクルと合成ゲーム族

U(S) は「N∖S のヘッドをマスクしたときのモデル精度」の代用。
卓上規模で真値を列挙できるよう、閉形式の族を用意する:

- additive        : U(S) = Σ_{p∈S} w_p
- symmetric       : U(S) = values[|S|]
- weighted-voting : U(S) = 1 if Σ_{p∈S} w_p >= quota else 0
- saboteur        : U(S) = base + Σ_{p∈S∩helpful} gain_p + Σ_{p∈S∩harmful} penalty_p
- tabular         : U(S) = values[bits(S)] (乱数ゲーム用)
- external        : bridge/ 経由の外部評価器 (実LLMハーネス等)
"""

import hashlib
import json
import threading
from abc import ABC, abstractmethod
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, Field, model_validator

from .coalition import CoalitionMask, PlayerSet, membership_matrix
from .errors import ConfigurationError, RangeViolationError

GameFamily = Literal["additive", "symmetric", "weighted-voting", "saboteur", "tabular", "external"]

_RANGE_TOL = 1e-9


class GameSpec(BaseModel):
    """ゲーム定義 (JSON: {"family": ..., "n": ..., "params": {...}})"""
    family: GameFamily
    n: int = Field(..., ge=1)
    params: Dict[str, Any] = Field(default_factory=dict)
    labels: Optional[List[Union[str, List[int]]]] = None
    u_min: Optional[float] = None
    u_max: Optional[float] = None

    @model_validator(mode="after")
    def _check_arity(self) -> "GameSpec":
        n, p = self.n, self.params
        if self.family in ("additive", "weighted-voting"):
            weights = p.get("weights")
            if weights is None or len(weights) != n:
                raise ValueError(f"{self.family}: weights は {n} 個必要です")
            if self.family == "weighted-voting" and "quota" not in p:
                raise ValueError("weighted-voting: quota が必要です")
        elif self.family == "symmetric":
            values = p.get("values")
            if values is None or len(values) != n + 1:
                raise ValueError(f"symmetric: values は n+1={n + 1} 個必要です")
        elif self.family == "saboteur":
            for group in ("helpful", "harmful"):
                for key in (p.get(group) or {}):
                    if not 0 <= int(key) < n:
                        raise ValueError(f"saboteur: {group} のプレイヤー {key} が範囲外です")
            overlap = set(map(int, p.get("helpful") or {})) & set(map(int, p.get("harmful") or {}))
            if overlap:
                raise ValueError(f"saboteur: helpful と harmful が重複しています: {sorted(overlap)}")
        elif self.family == "tabular":
            values = p.get("values")
            if values is None and "seed" not in p:
                raise ValueError("tabular: values か seed が必要です")
            if values is not None and len(values) != 1 << n:
                raise ValueError(f"tabular: values は 2^n={1 << n} 個必要です")
        if self.labels is not None and len(self.labels) != n:
            raise ValueError(f"labels は {n} 個必要です")
        return self

    def fingerprint(self) -> str:
        """オラクル同一性ハッシュ (キャッシュの取り違え防止)"""
        canonical = json.dumps(
            {"family": self.family, "n": self.n, "params": self.params},
            sort_keys=True, separators=(",", ":"),
        )
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]

    def players(self) -> PlayerSet:
        if self.labels is None:
            return PlayerSet.default(self.n)
        return PlayerSet.from_labels(self.labels)


class UtilityOracle(ABC):
    """効用オラクル: 提携 → 実数効用 (宣言された範囲 [u_min, u_max] 内)

    決定的であること。評価カウンタはスレッド安全に加算される。
    """

    def __init__(self, players: PlayerSet, u_min: float, u_max: float, fingerprint: str):
        if u_max < u_min:
            raise ConfigurationError(f"効用範囲が不正です: [{u_min}, {u_max}]")
        self.players = players
        self.n = players.n
        self.u_min = float(u_min)
        self.u_max = float(u_max)
        self.fingerprint = fingerprint
        self._evaluations = 0
        self._counter_lock = threading.Lock()

    @property
    def evaluations(self) -> int:
        return self._evaluations

    @property
    def utility_range(self) -> float:
        return self.u_max - self.u_min

    def _count(self, k: int = 1) -> None:
        with self._counter_lock:
            self._evaluations += k

    @abstractmethod
    def _evaluate(self, mask: CoalitionMask) -> float:
        """U(S) 本体"""

    def _evaluate_table(self) -> np.ndarray:
        """全提携の効用 (ビットマスク順)。族ごとにベクトル化して上書きする"""
        return np.array(
            [self._evaluate(CoalitionMask(self.n, bits)) for bits in range(1 << self.n)],
            dtype=np.float64,
        )

    def _check_range(self, value: float, mask: CoalitionMask) -> float:
        tol = _RANGE_TOL * (1.0 + abs(self.u_max) + abs(self.u_min))
        if not (self.u_min - tol <= value <= self.u_max + tol) or value != value:
            raise RangeViolationError(
                f"効用 {value} が宣言範囲 [{self.u_min}, {self.u_max}] の外です",
                coalition=mask.members(),
            )
        return value

    def utility(self, mask: CoalitionMask) -> float:
        if mask.n != self.n:
            raise ConfigurationError(f"提携の長さ {mask.n} がオラクルの n={self.n} と一致しません")
        value = float(self._evaluate(mask))
        self._count()
        return self._check_range(value, mask)

    def utility_table(self) -> np.ndarray:
        """U を全 2^n 提携について評価する (総当たり計算用)"""
        table = np.asarray(self._evaluate_table(), dtype=np.float64)
        self._count(1 << self.n)
        tol = _RANGE_TOL * (1.0 + abs(self.u_max) + abs(self.u_min))
        bad = np.flatnonzero((table < self.u_min - tol) | (table > self.u_max + tol) | np.isnan(table))
        if bad.size:
            mask = CoalitionMask(self.n, int(bad[0]))
            raise RangeViolationError(
                f"効用 {table[bad[0]]} が宣言範囲 [{self.u_min}, {self.u_max}] の外です",
                coalition=mask.members(),
            )
        return table


class AdditiveGame(UtilityOracle):
    def __init__(self, weights: Sequence[float], players: Optional[PlayerSet] = None,
                 u_min: Optional[float] = None, u_max: Optional[float] = None,
                 fingerprint: str = ""):
        self.weights = np.asarray(weights, dtype=np.float64)
        players = players or PlayerSet.default(len(self.weights))
        lo = float(self.weights[self.weights < 0].sum())
        hi = float(self.weights[self.weights > 0].sum())
        super().__init__(players, lo if u_min is None else u_min, hi if u_max is None else u_max, fingerprint)

    def _evaluate(self, mask: CoalitionMask) -> float:
        return float(self.weights[mask.as_array()].sum())

    def _evaluate_table(self) -> np.ndarray:
        member = membership_matrix(self.n)
        return np.where(member, self.weights[None, :], 0.0).sum(axis=1)


class SymmetricGame(UtilityOracle):
    def __init__(self, values: Sequence[float], players: Optional[PlayerSet] = None,
                 u_min: Optional[float] = None, u_max: Optional[float] = None,
                 fingerprint: str = ""):
        self.values = np.asarray(values, dtype=np.float64)
        players = players or PlayerSet.default(len(self.values) - 1)
        if len(self.values) != players.n + 1:
            raise ConfigurationError(f"symmetric: values は n+1={players.n + 1} 個必要です")
        super().__init__(
            players,
            float(self.values.min()) if u_min is None else u_min,
            float(self.values.max()) if u_max is None else u_max,
            fingerprint,
        )

    def _evaluate(self, mask: CoalitionMask) -> float:
        return float(self.values[mask.size])

    def _evaluate_table(self) -> np.ndarray:
        from .coalition import popcounts

        return self.values[popcounts(self.n)]


class WeightedVotingGame(UtilityOracle):
    def __init__(self, weights: Sequence[float], quota: float,
                 players: Optional[PlayerSet] = None, fingerprint: str = ""):
        self.weights = np.asarray(weights, dtype=np.float64)
        self.quota = float(quota)
        players = players or PlayerSet.default(len(self.weights))
        super().__init__(players, 0.0, 1.0, fingerprint)

    def _evaluate(self, mask: CoalitionMask) -> float:
        return 1.0 if self.weights[mask.as_array()].sum() >= self.quota else 0.0

    def _evaluate_table(self) -> np.ndarray:
        member = membership_matrix(self.n)
        totals = np.where(member, self.weights[None, :], 0.0).sum(axis=1)
        return (totals >= self.quota).astype(np.float64)


class SaboteurGame(UtilityOracle):
    """有益プレイヤーと有害プレイヤーを持つゲーム

    harmful の値は負のペナルティ。有害プレイヤーをマスクすると効用が上がる。
    """

    def __init__(self, n: int, base: float, helpful: Dict[int, float], harmful: Dict[int, float],
                 players: Optional[PlayerSet] = None,
                 u_min: Optional[float] = None, u_max: Optional[float] = None,
                 fingerprint: str = ""):
        self.base = float(base)
        self.helpful = {int(k): float(v) for k, v in helpful.items()}
        self.harmful = {int(k): float(v) for k, v in harmful.items()}
        self.effects = np.zeros(n, dtype=np.float64)
        for p, v in {**self.helpful, **self.harmful}.items():
            self.effects[p] = v
        lo = self.base + float(self.effects[self.effects < 0].sum())
        hi = self.base + float(self.effects[self.effects > 0].sum())
        super().__init__(players or PlayerSet.default(n),
                         lo if u_min is None else u_min, hi if u_max is None else u_max, fingerprint)

    def _evaluate(self, mask: CoalitionMask) -> float:
        return self.base + float(self.effects[mask.as_array()].sum())

    def _evaluate_table(self) -> np.ndarray:
        member = membership_matrix(self.n)
        return self.base + np.where(member, self.effects[None, :], 0.0).sum(axis=1)


class TabularGame(UtilityOracle):
    def __init__(self, values: Sequence[float], players: Optional[PlayerSet] = None,
                 u_min: Optional[float] = None, u_max: Optional[float] = None,
                 fingerprint: str = ""):
        self.values = np.asarray(values, dtype=np.float64)
        n = int(self.values.size).bit_length() - 1
        if n < 1 or self.values.size != 1 << n:
            raise ConfigurationError("tabular: values の長さは 2^n (n>=1) が必要です")
        super().__init__(
            players or PlayerSet.default(n),
            float(self.values.min()) if u_min is None else u_min,
            float(self.values.max()) if u_max is None else u_max,
            fingerprint,
        )

    def _evaluate(self, mask: CoalitionMask) -> float:
        return float(self.values[mask.bits])

    def _evaluate_table(self) -> np.ndarray:
        return self.values.copy()


def random_tabular_game(n: int, seed: int) -> TabularGame:
    """シード付き乱数ゲーム。効用は [0, 1) 一様"""
    spec = GameSpec(family="tabular", n=n, params={"seed": seed})
    oracle = build_oracle(spec)
    assert isinstance(oracle, TabularGame)
    return oracle


def build_oracle(spec: GameSpec) -> UtilityOracle:
    """GameSpec からオラクルを構築"""
    players = spec.players()
    fp = spec.fingerprint()
    p = spec.params
    if spec.family == "additive":
        return AdditiveGame(p["weights"], players, spec.u_min, spec.u_max, fp)
    if spec.family == "symmetric":
        return SymmetricGame(p["values"], players, spec.u_min, spec.u_max, fp)
    if spec.family == "weighted-voting":
        return WeightedVotingGame(p["weights"], p["quota"], players, fp)
    if spec.family == "saboteur":
        return SaboteurGame(
            spec.n, p.get("base", 0.0), p.get("helpful") or {}, p.get("harmful") or {},
            players, spec.u_min, spec.u_max, fp,
        )
    if spec.family == "tabular":
        values = p.get("values")
        if values is None:
            values = np.random.default_rng(int(p["seed"])).random(1 << spec.n)
        return TabularGame(values, players, spec.u_min, spec.u_max, fp)
    if spec.family == "external":
        from ..bridge.oracle import ExternalOracle

        return ExternalOracle.from_spec(spec)
    raise ConfigurationError(f"未知のゲーム族: {spec.family}")


def load_game_spec(source: Union[str, Path, Dict[str, Any]]) -> GameSpec:
    """JSONファイル (または辞書) から GameSpec を読み込み、スキーマ検証する"""
    from .schema_validator import validate_document

    if isinstance(source, dict):
        data = source
    else:
        try:
            with open(source, "r", encoding="utf-8") as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"ゲーム定義の解析エラー: {e}") from e
    validate_document(data, "game_spec")
    try:
        return GameSpec.model_validate(data)
    except ValueError as e:
        raise ConfigurationError(f"ゲーム定義が不正です: {e}") from e


def utility(oracle: UtilityOracle, mask: CoalitionMask) -> float:
    """U(S)"""
    return oracle.utility(mask)


def complementary_contribution(oracle: UtilityOracle, mask: CoalitionMask) -> float:
    """補完的貢献 U(S) − U(N∖S)"""
    return oracle.utility(mask) - oracle.utility(mask.complement())
