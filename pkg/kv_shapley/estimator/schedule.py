"""
サンプルスケジュール

k 番目のサンプル (スライスサイズ j と提携メンバー) を (seed, k) だけから決める。
ワーカー分割や中断・再開に関わらず同じ列が得られる。

- iid         : 一様ランダム置換 π とスライス j ~ Uniform(H) を引き、S = π の先頭 j 人
- round_robin : エポックごとに H をランダム順に1巡する。各スライスでは
                プレイヤーのランダム置換を j 人ずつのブロックに区切って順に使い、
                端数ブロックは残りのプレイヤーから一様に補う
"""

from math import ceil
from typing import Dict, List, Literal, Tuple

import numpy as np

from ..core.coalition import SliceSet
from ..core.errors import ConfigurationError

SamplingMode = Literal["round_robin", "iid"]

IID_CHUNK = 1024

# 乱数ストリームの種別
_EPOCH_STREAM = 0
_CYCLE_STREAM = 1
_IID_STREAM = 2


def draw_coalition(rng: np.random.Generator, n: int, slices: SliceSet) -> Tuple[int, np.ndarray]:
    """ランダム置換 π とスライス j を引き、(j, π の先頭 j 人) を返す"""
    perm = rng.permutation(n)
    j = int(rng.choice(np.asarray(slices.sizes)))
    return j, perm[:j]


def coverage_floor(n: int, slices: SliceSet, mode: SamplingMode) -> int:
    """全 (プレイヤー, スライス) にカウントが付くのに必要な最小サンプル数

    iid モードでは保証できないため |H| (必要条件) を返す。
    """
    if mode == "iid":
        return len(slices)
    return len(slices) * ceil(n / min(slices.sizes))


class SampleSchedule:
    """(seed, k) → (j, メンバー) の決定的スケジュール"""

    def __init__(self, n: int, slices: SliceSet, seed: int, mode: SamplingMode = "round_robin"):
        if seed < 0:
            raise ConfigurationError(f"シードは0以上が必要です: {seed}")
        if mode not in ("round_robin", "iid"):
            raise ConfigurationError(f"未知のサンプリングモード: {mode}")
        if slices.n != n:
            raise ConfigurationError(f"スライス集合の n={slices.n} が n={n} と一致しません")
        self.n = n
        self.slices = slices
        self.seed = seed
        self.mode: SamplingMode = mode
        self._sizes = np.asarray(slices.sizes, dtype=np.int64)
        self._epoch: Tuple[int, np.ndarray] = (-1, self._sizes)
        self._cycles: Dict[int, Tuple[int, List[np.ndarray]]] = {}
        self._chunk: Tuple[int, List[Tuple[int, np.ndarray]]] = (-1, [])

    def coalition(self, k: int) -> Tuple[int, np.ndarray]:
        """k 番目 (0始まり) のサンプルの (スライスサイズ, メンバー)"""
        if self.mode == "iid":
            return self._iid(k)
        return self._round_robin(k)

    def _iid(self, k: int) -> Tuple[int, np.ndarray]:
        chunk, offset = divmod(k, IID_CHUNK)
        if self._chunk[0] != chunk:
            rng = np.random.default_rng([self.seed, _IID_STREAM, chunk])
            draws = [draw_coalition(rng, self.n, self.slices) for _ in range(IID_CHUNK)]
            self._chunk = (chunk, draws)
        return self._chunk[1][offset]

    def _round_robin(self, k: int) -> Tuple[int, np.ndarray]:
        h = len(self._sizes)
        epoch, pos = divmod(k, h)
        if self._epoch[0] != epoch:
            rng = np.random.default_rng([self.seed, _EPOCH_STREAM, epoch])
            self._epoch = (epoch, rng.permutation(self._sizes))
        j = int(self._epoch[1][pos])

        # 各エポックで各スライスはちょうど1回訪問される
        n_blocks = ceil(self.n / j)
        cycle, block = divmod(epoch, n_blocks)
        cached = self._cycles.get(j)
        if cached is None or cached[0] != cycle:
            cached = (cycle, self._player_blocks(j, cycle, n_blocks))
            self._cycles[j] = cached
        return j, cached[1][block]

    def _player_blocks(self, j: int, cycle: int, n_blocks: int) -> List[np.ndarray]:
        rng = np.random.default_rng([self.seed, _CYCLE_STREAM, j, cycle])
        perm = rng.permutation(self.n)
        blocks = [perm[b * j:(b + 1) * j] for b in range(n_blocks)]
        tail = blocks[-1]
        if tail.size < j:
            others = perm[: self.n - tail.size]
            fill = rng.choice(others, j - tail.size, replace=False)
            blocks[-1] = np.concatenate([tail, fill])
        return blocks
