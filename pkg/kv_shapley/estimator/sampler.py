"""
Sliced Shapley 値のモンテカルロ推定

1サンプル:
  1. スライスサイズ j ∈ H と j 人の提携 S を引く (schedule.py)
  2. u = U(S) − U(N∖S) を計算
  3. S の全員について sums[p, j-1] += u, counts[p, j-1] += 1

推定値は SSV_i = (1/|H|) Σ_{j∈H} sums[i, j-1] / counts[i, j-1]。
1回の補完的貢献で j 人分の推定が同時に更新される。
"""

import json
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from langsmith import traceable
from pydantic import BaseModel

from ..core.coalition import CoalitionMask, SliceSet
from ..core.debug_logger import get_debug_logger
from ..core.errors import ConfigurationError, EstimateError
from ..core.export import read_value_csv, write_value_csv
from ..core.games import UtilityOracle
from .schedule import SampleSchedule, SamplingMode, coverage_floor, draw_coalition
from .table import ContributionTable, merge_tables


class SsvEstimate(BaseModel):
    """推定結果 (JSON で完全なメタデータを保存できる)"""
    n: int
    labels: List[str]
    slice_set: List[int]
    seed: int
    mode: str = "round_robin"
    mirror: bool = False
    values: List[float]
    per_slice_means: List[List[float]]   # (n, |H|)
    per_slice_counts: List[List[int]]    # (n, |H|)
    total_samples: int
    oracle_evaluations: int

    def slices(self) -> SliceSet:
        return SliceSet(self.slice_set, self.n)

    def slice_sample_counts(self) -> List[int]:
        """スライスごとのサンプル数 (= そのスライスで加算された人数の合計 / j)"""
        counts = np.asarray(self.per_slice_counts, dtype=np.int64).sum(axis=0)
        return [int(c) // j for c, j in zip(counts, self.slice_set)]

    def to_json(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.model_dump_json(indent=2), encoding="utf-8")
        return path

    @classmethod
    def from_json(cls, path: Union[str, Path]) -> "SsvEstimate":
        try:
            return cls.model_validate_json(Path(path).read_text(encoding="utf-8"))
        except ValueError as e:
            raise ConfigurationError(f"推定ファイルが不正です: {path}: {e}") from e

    def to_csv(self, path: Union[str, Path]) -> Path:
        return write_value_csv(path, self.values, self.labels, column="ssv")


def credit_sample(oracle: UtilityOracle, table: ContributionTable, j: int,
                  members: Union[np.ndarray, Sequence[int]], mirror: bool = False) -> float:
    """1サンプル分の補完的貢献を計算してテーブルに加算する

    効用評価が失敗した場合、テーブルは変更されない。
    """
    mask = CoalitionMask.from_members(table.n, members)
    complement = mask.complement()
    u = oracle.utility(mask) - oracle.utility(complement)

    table.credit(members, j, u)
    if mirror:
        k = table.n - j
        if k >= 1 and k in table.slices:
            table.credit(complement.members(), k, -u)
    table.samples_drawn += 1
    return u


def sample_once(oracle: UtilityOracle, slices: SliceSet, rng: np.random.Generator,
                table: ContributionTable, mirror: bool = False) -> ContributionTable:
    """一様ランダム置換と一様なスライスサイズで1サンプル引いて加算する"""
    if table.n != oracle.n or slices.n != oracle.n:
        raise ConfigurationError(
            f"テーブル n={table.n} / スライス集合 n={slices.n} がオラクル n={oracle.n} と一致しません"
        )
    j, members = draw_coalition(rng, oracle.n, slices)
    credit_sample(oracle, table, j, members, mirror)
    return table


class SsvSampler:
    """再開可能な推定器

    サンプル k は (seed, k) だけで決まるので、保存済みテーブルから
    samples_drawn 番目以降を引けば中断のない実行と同じ統計になる。
    """

    def __init__(self, oracle: UtilityOracle, slices: SliceSet, seed: int = 0,
                 mode: SamplingMode = "round_robin", mirror: bool = False,
                 table: Optional[ContributionTable] = None):
        if slices.n != oracle.n:
            raise ConfigurationError(f"スライス集合の n={slices.n} がオラクルの n={oracle.n} と一致しません")
        self.oracle = oracle
        self.slices = slices
        self.seed = seed
        self.mode: SamplingMode = mode
        self.mirror = mirror
        self.schedule = SampleSchedule(oracle.n, slices, seed, mode)
        if table is None:
            table = ContributionTable(oracle.n, slices, seed, 0, mode, mirror)
        elif not (table.n == oracle.n and table.slices == slices and table.seed == seed
                  and table.mode == mode and table.mirror == mirror):
            raise ConfigurationError(
                "再開するテーブルの構成が一致しません: "
                f"n={table.n}, H={list(table.slices)}, seed={table.seed}, mode={table.mode}, "
                f"mirror={table.mirror}"
            )
        self.table = table
        self._evaluations_start = oracle.evaluations

    @property
    def oracle_evaluations(self) -> int:
        return self.oracle.evaluations - self._evaluations_start

    def coverage_floor(self) -> int:
        return coverage_floor(self.oracle.n, self.slices, self.mode)

    def run(self, samples: int, workers: int = 1) -> ContributionTable:
        """samples 個のサンプルを追加する

        workers > 1 のとき、連続した大域インデックス範囲を各ワーカーに割り当て、
        ワーカー順にマージする。失敗した場合このバッチの結果は捨てられる。
        """
        if samples < 1:
            raise ConfigurationError(f"サンプル数は1以上が必要です: {samples}")
        logger = get_debug_logger()
        start = self.table.samples_drawn
        if workers > samples:
            logger.warn("SAMPLE", "run", "ワーカー数をサンプル数に合わせて減らします",
                        {"requested": workers, "used": samples})
            workers = samples

        if workers <= 1:
            for k in range(start, start + samples):
                j, members = self.schedule.coalition(k)
                credit_sample(self.oracle, self.table, j, members, self.mirror)
        else:
            bounds = np.linspace(start, start + samples, workers + 1).astype(np.int64)
            ranges = [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]
            with ThreadPoolExecutor(max_workers=workers) as pool:
                partials = list(pool.map(lambda r: self._run_range(*r), ranges))
            table = self.table
            for partial in partials:
                table = merge_tables(table, partial)
            self.table = table

        logger.debug("SAMPLE", "run", "サンプリング完了", {
            "samples": samples, "workers": workers, "samples_drawn": self.table.samples_drawn,
        })
        return self.table

    def _run_range(self, begin: int, end: int) -> ContributionTable:
        table = ContributionTable.empty_like(self.table)
        schedule = SampleSchedule(self.oracle.n, self.slices, self.seed, self.mode)
        for k in range(begin, end):
            j, members = schedule.coalition(k)
            credit_sample(self.oracle, table, j, members, self.mirror)
        return table

    def finalize(self) -> SsvEstimate:
        """現在のテーブルから推定値を確定する。カウント0のセルがあれば拒否"""
        missing = self.table.missing_cells()
        if missing:
            raise EstimateError(
                f"カウント0の (プレイヤー, スライス) が {len(missing)} 個あります: {missing[:10]}"
                " サンプル数を増やすか round_robin モードを使用してください"
            )
        labels = [self.oracle.players.label_text(i) for i in range(self.oracle.n)]
        return estimate_from_table(self.table, labels, self.oracle_evaluations)


def estimate_from_table(table: ContributionTable, labels: Optional[List[str]] = None,
                        oracle_evaluations: int = 0) -> SsvEstimate:
    means = table.slice_means()
    if np.isnan(means).any():
        raise EstimateError(f"カウント0のセルがあります: {table.missing_cells()[:10]}")
    cols = [j - 1 for j in table.slices.sizes]
    return SsvEstimate(
        n=table.n,
        labels=labels or [f"p{i}" for i in range(table.n)],
        slice_set=list(table.slices.sizes),
        seed=table.seed,
        mode=table.mode,
        mirror=table.mirror,
        values=means.mean(axis=1).tolist(),
        per_slice_means=means.tolist(),
        per_slice_counts=table.counts[:, cols].tolist(),
        total_samples=table.samples_drawn,
        oracle_evaluations=oracle_evaluations,
    )


def _as_slice_set(slices: Union[SliceSet, Iterable[int]], n: int) -> SliceSet:
    return slices if isinstance(slices, SliceSet) else SliceSet(slices, n)


@traceable(name="estimate_ssv")
def estimate_ssv(oracle: UtilityOracle, slices: Union[SliceSet, Iterable[int]], samples: int,
                 seed: int = 0, workers: int = 1, mode: SamplingMode = "round_robin",
                 mirror: bool = False) -> SsvEstimate:
    """M 個のサンプルで SSV^H を推定する

    round_robin モードでは M がカバレッジ下限 |H|·ceil(n/min H) 以上であれば
    全 (プレイヤー, スライス) のカウントが1以上になる。
    """
    H = _as_slice_set(slices, oracle.n)
    if samples < 1:
        raise ConfigurationError(f"サンプル数は1以上が必要です: {samples}")
    if workers < 1:
        raise ConfigurationError(f"ワーカー数は1以上が必要です: {workers}")
    floor = coverage_floor(oracle.n, H, mode)
    if samples < floor:
        raise ConfigurationError(
            f"サンプル数 {samples} では全スライスを網羅できません (最低 {floor}, mode={mode})"
        )
    sampler = SsvSampler(oracle, H, seed, mode, mirror)
    sampler.run(samples, workers)
    estimate = sampler.finalize()
    get_debug_logger().info("SAMPLE", "estimate", "SSV推定完了", {
        "n": oracle.n, "H": list(H), "samples": samples, "evaluations": estimate.oracle_evaluations,
    })
    return estimate


def load_estimate_values(path: Union[str, Path]) -> Tuple[List[float], List[str]]:
    """推定ファイル (JSON または CSV) からスコアとラベルを読む"""
    path = Path(path)
    if path.suffix.lower() == ".json":
        data = json.loads(path.read_text(encoding="utf-8"))
        if "values" not in data:
            raise ConfigurationError(f"values がありません: {path}")
        values = [float(v) for v in data["values"]]
        return values, list(data.get("labels") or [f"p{i}" for i in range(len(values))])
    return read_value_csv(path)
