"""
CSV 入出力

プレイヤーごとの値を (player_index, label, <列名>) の形式で読み書きする。
"""

import csv
from pathlib import Path
from typing import List, Sequence, Tuple, Union

from .errors import ConfigurationError


def write_value_csv(path: Union[str, Path], values: Sequence[float], labels: Sequence[str],
                    column: str = "value") -> Path:
    path = Path(path)
    if len(values) != len(labels):
        raise ConfigurationError(f"値の数 {len(values)} とラベル数 {len(labels)} が一致しません")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["player_index", "label", column])
        for i, (label, value) in enumerate(zip(labels, values)):
            writer.writerow([i, label, repr(float(value))])
    return path


def read_value_csv(path: Union[str, Path], column: str = "") -> Tuple[List[float], List[str]]:
    """(値, ラベル) を返す。column 未指定なら3列目を使う"""
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        fields = reader.fieldnames or []
        if "player_index" not in fields or len(fields) < 3:
            raise ConfigurationError(f"CSVの列が不正です: {fields}")
        key = column or fields[2]
        if key not in fields:
            raise ConfigurationError(f"CSVに列 {key} がありません: {fields}")
        rows = sorted(reader, key=lambda r: int(r["player_index"]))
    if [int(r["player_index"]) for r in rows] != list(range(len(rows))):
        raise ConfigurationError("player_index が 0..n-1 の連番ではありません")
    try:
        values = [float(r[key]) for r in rows]
    except ValueError as e:
        raise ConfigurationError(f"CSVの数値が不正です: {e}") from e
    return values, [r.get("label") or f"p{i}" for i, r in enumerate(rows)]
