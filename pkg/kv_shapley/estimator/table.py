"""
寄与テーブル

sums[i, j-1]   : プレイヤー i にスライス j で加算された補完的貢献の累積和
counts[i, j-1] : その回数 m_{i,j}

ファイル形式 (リトルエンディアン):
  magic   8 bytes  b"SSVTABLE"
  header  <IIIIqq  version, n, |H|, flags, seed, samples_drawn
  slices  |H| × <u4
  sums    n*n × <f8 (行優先)
  counts  n*n × <i8 (行優先)
flags: bit0 = ミラー加算, bit1 = iid モード
"""

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from ..core.coalition import SliceSet
from ..core.errors import ConfigurationError, TableFormatError

TABLE_MAGIC = b"SSVTABLE"
TABLE_VERSION = 1
_HEADER = struct.Struct("<IIIIqq")

_FLAG_MIRROR = 1
_FLAG_IID = 2


@dataclass
class ContributionTable:
    n: int
    slices: SliceSet
    seed: int = 0
    samples_drawn: int = 0
    mode: str = "round_robin"
    mirror: bool = False
    sums: np.ndarray = field(default=None)  # type: ignore[assignment]
    counts: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        if self.sums is None:
            self.sums = np.zeros((self.n, self.n), dtype=np.float64)
        if self.counts is None:
            self.counts = np.zeros((self.n, self.n), dtype=np.int64)
        if self.sums.shape != (self.n, self.n) or self.counts.shape != (self.n, self.n):
            raise ConfigurationError(f"テーブルの形状が (n, n)=({self.n}, {self.n}) ではありません")

    @classmethod
    def empty_like(cls, other: "ContributionTable") -> "ContributionTable":
        return cls(other.n, other.slices, other.seed, 0, other.mode, other.mirror)

    def credit(self, members: Union[np.ndarray, Sequence[int]], j: int, u: float) -> None:
        """メンバー全員にスライス j の補完的貢献 u を加算"""
        idx = np.asarray(members, dtype=np.int64)
        self.sums[idx, j - 1] += u
        self.counts[idx, j - 1] += 1

    def slice_means(self) -> np.ndarray:
        """(n, |H|) のスライス別平均。カウント0は nan"""
        cols = [j - 1 for j in self.slices.sizes]
        counts = self.counts[:, cols]
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(counts > 0, self.sums[:, cols] / np.maximum(counts, 1), np.nan)

    def missing_cells(self) -> list:
        """カウント0の (プレイヤー, スライスサイズ) の一覧"""
        return [
            (int(i), int(j))
            for j in self.slices.sizes
            for i in np.flatnonzero(self.counts[:, j - 1] == 0)
        ]

    def is_compatible(self, other: "ContributionTable") -> bool:
        return self.n == other.n and self.slices == other.slices

    def copy(self) -> "ContributionTable":
        return ContributionTable(
            self.n, self.slices, self.seed, self.samples_drawn, self.mode, self.mirror,
            self.sums.copy(), self.counts.copy(),
        )


def merge_tables(a: ContributionTable, b: ContributionTable) -> ContributionTable:
    """要素ごとの和 (結合的・可換)"""
    if not a.is_compatible(b):
        raise ConfigurationError(
            f"テーブルの次元が一致しません: n={a.n}/{b.n}, H={list(a.slices)}/{list(b.slices)}"
        )
    return ContributionTable(
        a.n, a.slices, a.seed, a.samples_drawn + b.samples_drawn, a.mode, a.mirror or b.mirror,
        a.sums + b.sums, a.counts + b.counts,
    )


def save_table(table: ContributionTable, path: Union[str, Path]) -> None:
    flags = (_FLAG_MIRROR if table.mirror else 0) | (_FLAG_IID if table.mode == "iid" else 0)
    sizes = table.slices.sizes
    payload = b"".join([
        TABLE_MAGIC,
        _HEADER.pack(TABLE_VERSION, table.n, len(sizes), flags, table.seed, table.samples_drawn),
        np.asarray(sizes, dtype="<u4").tobytes(),
        np.ascontiguousarray(table.sums, dtype="<f8").tobytes(),
        np.ascontiguousarray(table.counts, dtype="<i8").tobytes(),
    ])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(payload)
    tmp.replace(path)


def load_table(path: Union[str, Path], expected_n: Optional[int] = None,
               expected_slices: Optional[SliceSet] = None) -> ContributionTable:
    """テーブルを読み込む。n やスライス集合が期待と異なれば拒否する"""
    data = Path(path).read_bytes()
    if data[:8] != TABLE_MAGIC:
        raise TableFormatError(f"寄与テーブルではありません: {path}")
    if len(data) < 8 + _HEADER.size:
        raise TableFormatError(f"ヘッダーが切り詰められています: {path}")
    version, n, h, flags, seed, samples = _HEADER.unpack_from(data, 8)
    if version != TABLE_VERSION:
        raise TableFormatError(f"未対応のバージョン {version} (対応: {TABLE_VERSION})")
    offset = 8 + _HEADER.size
    expected_len = offset + 4 * h + 16 * n * n
    if len(data) != expected_len:
        raise TableFormatError(f"ファイル長 {len(data)} が期待値 {expected_len} と一致しません")
    sizes = np.frombuffer(data, dtype="<u4", count=h, offset=offset).tolist()
    offset += 4 * h
    sums = np.frombuffer(data, dtype="<f8", count=n * n, offset=offset).reshape(n, n).astype(np.float64)
    offset += 8 * n * n
    counts = np.frombuffer(data, dtype="<i8", count=n * n, offset=offset).reshape(n, n).astype(np.int64)

    if expected_n is not None and n != expected_n:
        raise TableFormatError(f"プレイヤー数が一致しません: expected n={expected_n}, actual n={n}")
    try:
        slices = SliceSet(sizes, n)
    except ConfigurationError as e:
        raise TableFormatError(f"スライス集合が不正です: {e}") from e
    if expected_slices is not None and slices != expected_slices:
        raise TableFormatError(
            f"スライス集合が一致しません: expected {list(expected_slices)}, actual {list(slices)}"
        )
    return ContributionTable(
        n, slices, seed, samples,
        "iid" if flags & _FLAG_IID else "round_robin", bool(flags & _FLAG_MIRROR),
        sums, counts,
    )
