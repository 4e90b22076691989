"""
実行トレースログ

JSON-L形式でコマンド単位の実行 (引数、終了コード、所要時間) を記録する。
"""

import json
import threading
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Union


class ProvenanceType(Enum):
    """実行元の種別 (現状はコマンド単位のみ)"""
    CLI = "cli"


@dataclass
class ExecutionMetadata:
    """実行メタデータ"""
    provenance: ProvenanceType = ProvenanceType.CLI
    error: Optional[str] = None
    context: Dict[str, Any] = field(default_factory=dict)


@dataclass
class TraceEntry:
    """トレースログエントリ"""
    timestamp: str
    operation: str
    input: Any
    output: Any
    duration_ms: float
    metadata: ExecutionMetadata

    def to_json_line(self) -> str:
        """JSON-L形式で出力"""
        data = asdict(self)
        data["metadata"]["provenance"] = self.metadata.provenance.value
        return json.dumps(data, ensure_ascii=False, separators=(",", ":"))


class TraceLogger:
    """JSON-L トレースロガー"""

    def __init__(self, output_file: Optional[Path] = None):
        self.output_file = output_file
        self.entries: List[TraceEntry] = []
        self._starts: Dict[int, float] = {}
        self._lock = threading.Lock()

    def start_operation(self, operation: str, input_data: Any,
                        provenance: ProvenanceType = ProvenanceType.CLI) -> int:
        """操作開始をログ"""
        with self._lock:
            entry_id = len(self.entries)
            self.entries.append(TraceEntry(
                timestamp=self._current_timestamp(),
                operation=operation,
                input=input_data,
                output=None,
                duration_ms=0.0,
                metadata=ExecutionMetadata(provenance=provenance),
            ))
            self._starts[entry_id] = time.perf_counter()
        return entry_id

    def end_operation(self, entry_id: int, output: Any,
                      context: Optional[Dict[str, Any]] = None,
                      error: Optional[str] = None) -> None:
        """操作終了とログ出力"""
        with self._lock:
            if entry_id >= len(self.entries):
                return
            entry = self.entries[entry_id]
            entry.output = output
            entry.duration_ms = (time.perf_counter() - self._starts.pop(entry_id, time.perf_counter())) * 1000
            if context:
                entry.metadata.context.update(context)
            entry.metadata.error = error
            if self.output_file:
                self._write_to_file(entry)

    def _current_timestamp(self) -> str:
        return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%S.%f")[:-3] + "Z"

    def _write_to_file(self, entry: TraceEntry) -> None:
        assert self.output_file is not None
        try:
            self.output_file.parent.mkdir(parents=True, exist_ok=True)
            with open(self.output_file, "a", encoding="utf-8") as f:
                f.write(entry.to_json_line() + "\n")
        except OSError as e:
            from .debug_logger import get_debug_logger

            get_debug_logger().warn("TRACE", "write", f"ログ書き込みエラー: {e}")


def configure_trace_logging(output_file: Optional[Union[str, Path]] = None) -> TraceLogger:
    """コマンド1回分のトレースロガーを作る"""
    return TraceLogger(Path(output_file) if output_file else None)
