"""
評価キャッシュ

(ゲーム指紋, 提携キー) → 効用 の対応表。キーは固定幅16進のビットセット表現なので、
構築順序に関わらず同じ提携は同じキーになる。

ジャーナル (JSON-L, 追記のみ):
  {"key": "<hex>", "utility": <float>, "fingerprint": "<hex>"}
"""

import json
import threading
from pathlib import Path
from typing import Dict, Iterator, Optional, Tuple, Union

import numpy as np

from ..core.coalition import CoalitionMask
from ..core.debug_logger import get_debug_logger
from ..core.games import UtilityOracle

CacheKey = Tuple[str, str]


class EvalCache:
    """スレッド安全な評価キャッシュ

    同じキーへの書き込みは後勝ち。
    journal_path を指定すると新規エントリをジャーナルへ追記する。
    """

    def __init__(self, journal_path: Optional[Union[str, Path]] = None):
        self._entries: Dict[CacheKey, float] = {}
        self._lock = threading.Lock()
        self._journal_lock = threading.Lock()
        self.journal_path = Path(journal_path) if journal_path else None
        self.hits = 0
        self.misses = 0
        self.corrupt_lines = 0

    def get(self, fingerprint: str, mask: CoalitionMask) -> Optional[float]:
        key = (fingerprint, mask.key())
        with self._lock:
            value = self._entries.get(key)
            if value is None:
                self.misses += 1
            else:
                self.hits += 1
            return value

    def peek(self, fingerprint: str, mask: CoalitionMask) -> Optional[float]:
        """カウンタを動かさずに参照"""
        with self._lock:
            return self._entries.get((fingerprint, mask.key()))

    def put(self, fingerprint: str, mask: CoalitionMask, value: float) -> None:
        key = (fingerprint, mask.key())
        with self._lock:
            is_new = key not in self._entries
            self._entries[key] = float(value)
        if is_new and self.journal_path is not None:
            self._append(key, float(value))

    def _append(self, key: CacheKey, value: float) -> None:
        assert self.journal_path is not None
        line = json.dumps({"key": key[1], "utility": value, "fingerprint": key[0]})
        with self._journal_lock:
            self.journal_path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.journal_path, "a", encoding="utf-8") as f:
                f.write(line + "\n")

    def items(self) -> Iterator[Tuple[CacheKey, float]]:
        with self._lock:
            snapshot = list(self._entries.items())
        return iter(snapshot)

    def stats(self) -> Dict[str, int]:
        return {"entries": len(self), "hits": self.hits, "misses": self.misses,
                "corrupt_lines": self.corrupt_lines}

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, key: object) -> bool:
        return key in self._entries


def persist_cache(cache: EvalCache, path: Union[str, Path]) -> Path:
    """全エントリをジャーナル形式で書き出す"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8") as f:
        for (fingerprint, key), value in cache.items():
            f.write(json.dumps({"key": key, "utility": value, "fingerprint": fingerprint}) + "\n")
    tmp.replace(path)
    return path


def load_cache(path: Union[str, Path], journal: bool = False) -> EvalCache:
    """ジャーナルを再生してキャッシュを復元する

    壊れた行は読み飛ばし、件数を corrupt_lines に記録する。
    journal=True なら以後の新規エントリを同じファイルへ追記する。
    """
    path = Path(path)
    cache = EvalCache(path if journal else None)
    if not path.exists():
        return cache
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
                key = str(record["key"])
                int(key, 16)
                entry = (str(record["fingerprint"]), key)
                value = float(record["utility"])
            except (ValueError, KeyError, TypeError):
                cache.corrupt_lines += 1
                continue
            cache._entries[entry] = value
    if cache.corrupt_lines:
        get_debug_logger().warn("CACHE", "load", "壊れたジャーナル行を読み飛ばしました",
                                {"path": str(path), "corrupt_lines": cache.corrupt_lines})
    return cache


class CachedOracle(UtilityOracle):
    """キャッシュを挟んだオラクル

    evaluations は元オラクルの実評価回数を返す (キャッシュヒットは数えない)。
    """

    def __init__(self, base: UtilityOracle, cache: EvalCache):
        super().__init__(base.players, base.u_min, base.u_max, base.fingerprint)
        self.base = base
        self.cache = cache

    @property
    def evaluations(self) -> int:
        return self.base.evaluations

    def _evaluate(self, mask: CoalitionMask) -> float:
        return self.base.utility(mask)

    def utility(self, mask: CoalitionMask) -> float:
        cached = self.cache.get(self.fingerprint, mask)
        if cached is not None:
            return cached
        value = self.base.utility(mask)
        self.cache.put(self.fingerprint, mask, value)
        return value

    def utility_table(self) -> np.ndarray:
        return self.base.utility_table()
