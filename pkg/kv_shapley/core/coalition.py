"""
プレイヤーと提携

プレイヤー集合 N = {p_0, ..., p_{n-1}} と、その部分集合 (提携) を
整数ビットセットで表す。ビット p が立っていればプレイヤー p は提携に属する。
KV設定ではプレイヤーはヘッドグループ (layer, group) に対応する。
"""

import math
from dataclasses import dataclass
from typing import Iterable, Iterator, List, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigurationError

Label = Union[str, Tuple[int, int]]


@dataclass(frozen=True)
class PlayerSet:
    """プレイヤー集合

    labels は (layer, group) の組か不透明な文字列。一意でなければならない。
    """
    n: int
    labels: Tuple[Label, ...]

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ConfigurationError(f"プレイヤー数は1以上が必要です: n={self.n}")
        if len(self.labels) != self.n:
            raise ConfigurationError(f"ラベル数 {len(self.labels)} が n={self.n} と一致しません")
        if len(set(self.labels)) != self.n:
            raise ConfigurationError("ラベルが重複しています")

    @classmethod
    def default(cls, n: int) -> "PlayerSet":
        return cls(n, tuple(f"p{i}" for i in range(n)))

    @classmethod
    def from_head_groups(cls, layers: int, groups: int) -> "PlayerSet":
        """層 × グループの格子からプレイヤー集合を作る (GQAのグループ単位)"""
        labels = tuple((layer, group) for layer in range(layers) for group in range(groups))
        return cls(layers * groups, labels)

    @classmethod
    def from_labels(cls, labels: Sequence[Union[str, Sequence[int]]]) -> "PlayerSet":
        parsed: List[Label] = []
        for label in labels:
            if isinstance(label, str):
                parsed.append(label)
            else:
                layer, group = label
                parsed.append((int(layer), int(group)))
        return cls(len(parsed), tuple(parsed))

    def label_text(self, index: int) -> str:
        label = self.labels[index]
        if isinstance(label, tuple):
            return f"L{label[0]}G{label[1]}"
        return label


@dataclass(frozen=True)
class CoalitionMask:
    """長さ n のビット列で表した提携"""
    n: int
    bits: int

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ConfigurationError(f"不正なプレイヤー数: {self.n}")
        if self.bits < 0 or self.bits >> self.n:
            raise ConfigurationError(f"ビット列が n={self.n} の範囲外です")

    @classmethod
    def empty(cls, n: int) -> "CoalitionMask":
        return cls(n, 0)

    @classmethod
    def full(cls, n: int) -> "CoalitionMask":
        return cls(n, (1 << n) - 1)

    @classmethod
    def from_members(cls, n: int, members: Iterable[int]) -> "CoalitionMask":
        bits = 0
        for p in members:
            p = int(p)
            if not 0 <= p < n:
                raise ConfigurationError(f"プレイヤー番号 {p} が範囲 [0, {n}) の外です")
            bits |= 1 << p
        return cls(n, bits)

    @classmethod
    def from_key(cls, n: int, key: str) -> "CoalitionMask":
        return cls(n, int(key, 16))

    def complement(self) -> "CoalitionMask":
        return CoalitionMask(self.n, ((1 << self.n) - 1) ^ self.bits)

    def contains(self, player: int) -> bool:
        return bool(self.bits >> player & 1)

    @property
    def size(self) -> int:
        return self.bits.bit_count()

    def members(self) -> Tuple[int, ...]:
        return tuple(p for p in range(self.n) if self.bits >> p & 1)

    def as_array(self) -> np.ndarray:
        """長さ n の bool 配列 (インデックス = プレイヤー)"""
        raw = np.frombuffer(self.bits.to_bytes((self.n + 7) // 8, "little"), dtype=np.uint8)
        return np.unpackbits(raw, bitorder="little")[: self.n].astype(bool)

    def key(self) -> str:
        """正規化キー: 固定幅の16進表現 (構築順序に依存しない)"""
        width = (self.n + 3) // 4
        return format(self.bits, f"0{width}x")

    def __len__(self) -> int:
        return self.size


def popcounts(n: int) -> np.ndarray:
    """0..2^n-1 の各ビットマスクの要素数"""
    counts = np.zeros(1 << n, dtype=np.int64)
    for p in range(n):
        counts[1 << p: 1 << (p + 1)] = counts[: 1 << p] + 1
    return counts


def membership_matrix(n: int) -> np.ndarray:
    """(2^n, n) の所属行列。行 = ビットマスク、列 = プレイヤー"""
    masks = np.arange(1 << n, dtype=np.int64)
    return ((masks[:, None] >> np.arange(n, dtype=np.int64)[None, :]) & 1).astype(bool)


class SliceSet:
    """提携サイズのスライス集合 H ⊆ {1, ..., n}

    狭義単調増加・重複なし・範囲内。
    """

    __slots__ = ("sizes", "n")

    def __init__(self, sizes: Iterable[int], n: int):
        values = [int(s) for s in sizes]
        if not values:
            raise ConfigurationError("スライス集合が空です")
        if len(set(values)) != len(values):
            raise ConfigurationError(f"スライス集合に重複があります: {values}")
        if any(s < 1 or s > n for s in values):
            raise ConfigurationError(f"スライスサイズは [1, {n}] の範囲が必要です: {values}")
        self.sizes: Tuple[int, ...] = tuple(sorted(values))
        self.n = n

    @classmethod
    def full(cls, n: int) -> "SliceSet":
        return cls(range(1, n + 1), n)

    @classmethod
    def scaled(cls, fractions: Iterable[float], n: int) -> "SliceSet":
        """n に対する比率からスライス集合を作る

        round-half-up で整数化し、1 以上 n 以下に収めて重複を除く。
        比率 (1/8, 1/4, 3/8, 1/2) は n=256 で {32, 64, 96, 128} になる。
        """
        sizes = {min(n, max(1, math.floor(f * n + 0.5))) for f in fractions}
        return cls(sizes, n)

    def __len__(self) -> int:
        return len(self.sizes)

    def __iter__(self) -> Iterator[int]:
        return iter(self.sizes)

    def __contains__(self, size: object) -> bool:
        return size in self.sizes

    def __eq__(self, other: object) -> bool:
        return isinstance(other, SliceSet) and self.sizes == other.sizes and self.n == other.n

    def __hash__(self) -> int:
        return hash((self.sizes, self.n))

    def __repr__(self) -> str:
        return f"SliceSet({list(self.sizes)}, n={self.n})"

    def index(self, size: int) -> int:
        return self.sizes.index(size)
