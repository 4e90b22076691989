"""
レベル付きデバッグログ

推定・配分・退避・オラクル通信の動作状況を
[時刻] [レベル] [カテゴリ:操作] メッセージ | コンテキスト
の形式で stderr とログファイルに出力する。
"""

import os
import sys
import threading
import traceback
from collections import Counter
from dataclasses import dataclass
from datetime import datetime
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Optional, Tuple


class DebugLogLevel(Enum):
    """デバッグログレベル"""
    TRACE = 0    # 最詳細 (サンプル単位)
    DEBUG = 1
    INFO = 2
    WARN = 3
    ERROR = 4


@dataclass
class DebugLogEntry:
    """デバッグログエントリ"""
    timestamp: str
    level: DebugLogLevel
    category: str     # GAME, EXACT, SAMPLE, ALLOC, EVICT, BRIDGE, CACHE, CLI
    operation: str
    message: str
    context: Optional[Dict[str, Any]] = None


class DebugLogger:
    """カテゴリ別のレベル付きロガー

    エントリ自体は保持せず、(レベル, カテゴリ) ごとの件数だけを数える。
    長い推定でもメモリが増えない。
    """

    def __init__(self, log_file: Optional[Path] = None,
                 min_level: DebugLogLevel = DebugLogLevel.INFO,
                 console_output: bool = True):
        self.log_file = log_file
        self.min_level = min_level
        self.console_output = console_output
        self.counts: Counter[Tuple[DebugLogLevel, str]] = Counter()
        self._lock = threading.Lock()

        if self.log_file is not None:
            self._open_log_file()

    def _open_log_file(self) -> None:
        assert self.log_file is not None
        try:
            self.log_file.parent.mkdir(parents=True, exist_ok=True)
            with open(self.log_file, "a", encoding="utf-8") as f:
                f.write(f"# kv-shapley log {datetime.now().isoformat()} pid={os.getpid()}\n")
        except OSError as e:
            print(f"⚠️ ログファイルを開けません: {e}", file=sys.stderr)
            self.log_file = None

    def enabled(self, level: DebugLogLevel) -> bool:
        return level.value >= self.min_level.value

    @staticmethod
    def render(entry: DebugLogEntry) -> str:
        """1行の表示形式に整形"""
        line = f"[{entry.timestamp}] [{entry.level.name}] [{entry.category}:{entry.operation}] {entry.message}"
        if entry.context:
            line += " | " + ", ".join(f"{k}={v}" for k, v in entry.context.items())
        return line

    def _emit(self, level: DebugLogLevel, category: str, operation: str,
              message: str, context: Optional[Dict[str, Any]] = None) -> None:
        if not self.enabled(level):
            return
        entry = DebugLogEntry(datetime.now().strftime("%H:%M:%S.%f")[:-3],
                              level, category, operation, message, context)
        line = self.render(entry)
        with self._lock:
            self.counts[(level, category)] += 1
            if self.console_output:
                print(line, file=sys.stderr)
            if self.log_file is not None:
                try:
                    with open(self.log_file, "a", encoding="utf-8") as f:
                        f.write(line + "\n")
                except OSError as e:
                    print(f"⚠️ ログ書き込みエラー: {e}", file=sys.stderr)

    def trace(self, category: str, operation: str, message: str, context: Optional[Dict[str, Any]] = None) -> None:
        self._emit(DebugLogLevel.TRACE, category, operation, message, context)

    def debug(self, category: str, operation: str, message: str, context: Optional[Dict[str, Any]] = None) -> None:
        self._emit(DebugLogLevel.DEBUG, category, operation, message, context)

    def info(self, category: str, operation: str, message: str, context: Optional[Dict[str, Any]] = None) -> None:
        self._emit(DebugLogLevel.INFO, category, operation, message, context)

    def warn(self, category: str, operation: str, message: str, context: Optional[Dict[str, Any]] = None) -> None:
        self._emit(DebugLogLevel.WARN, category, operation, message, context)

    def error(self, category: str, operation: str, message: str, context: Optional[Dict[str, Any]] = None) -> None:
        self._emit(DebugLogLevel.ERROR, category, operation, message, context)

    def exception(self, category: str, operation: str, error: BaseException) -> None:
        """例外を型名とトレースバック付きで記録"""
        self.error(category, operation, f"{type(error).__name__}: {error}", {
            "traceback": "".join(traceback.format_exception(error)).strip(),
        })

    def count(self, level: DebugLogLevel, category: Optional[str] = None) -> int:
        """記録済みエントリ数 (レベル未満で捨てたものは数えない)"""
        return sum(c for (lv, cat), c in self.counts.items()
                   if lv == level and (category is None or cat == category))


# グローバルインスタンス
_debug_logger: Optional[DebugLogger] = None


def _level_from_name(name: str) -> DebugLogLevel:
    try:
        return DebugLogLevel[name.upper()]
    except KeyError:
        return DebugLogLevel.INFO


def get_debug_logger() -> DebugLogger:
    """デバッグログインスタンスを取得"""
    global _debug_logger
    if _debug_logger is None:
        from ..config.settings import settings

        log_file = Path(settings.system.log_file) if settings.system.log_file else None
        _debug_logger = DebugLogger(log_file, _level_from_name(settings.system.log_level))
    return _debug_logger


def setup_debug_logging(log_file: Optional[Path] = None,
                        level: DebugLogLevel = DebugLogLevel.INFO,
                        console_output: bool = True) -> DebugLogger:
    """デバッグログを設定"""
    global _debug_logger
    _debug_logger = DebugLogger(log_file, level, console_output)
    return _debug_logger
