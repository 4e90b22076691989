"""
テンソルファイルの読み書き

入力 (退避前):
  1行目: JSON ヘッダー {"magic": "cokvtensor", "version": 1, "m": .., "s": .., "d_h": .., "heads": ..} + "\\n"
  以降 : ヘッドごとに q_win, k_out, v_out, k_win, v_win の順で
         float32 リトルエンディアン行優先のペイロード

出力 (退避後、ヘッドごとに行数が異なる):
  1行目: JSON ヘッダー {"magic": "cokvtensor", "version": 1, "kind": "retained",
                       "s": .., "d_h": .., "rows": [c_0, c_1, ...]} + "\\n"
  以降 : ヘッドごとに k_hat, v_hat (各 c_h × d_h) の順で同じ形式のペイロード
"""

import json
from pathlib import Path
from typing import Any, Dict, List, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, ValidationError

from ..core.errors import TensorFormatError
from .evictor import EvictionResult, HeadTensorBundle

TENSOR_MAGIC = "cokvtensor"
TENSOR_VERSION = 1
_DTYPE = np.dtype("<f4")
_PAYLOADS = ("q_win", "k_out", "v_out", "k_win", "v_win")


class TensorHeader(BaseModel):
    magic: str
    version: int
    m: int = Field(..., ge=1)
    s: int = Field(..., ge=0)
    d_h: int = Field(..., ge=1)
    heads: int = Field(1, ge=1)

    def shapes(self) -> List[Tuple[int, int]]:
        prefix = self.m - self.s
        return [(self.s, self.d_h), (prefix, self.d_h), (prefix, self.d_h),
                (self.s, self.d_h), (self.s, self.d_h)]

    def head_nbytes(self) -> int:
        return sum(r * c for r, c in self.shapes()) * _DTYPE.itemsize


def _read_header(data: bytes) -> Tuple[Dict[str, Any], int]:
    end = data.find(b"\n")
    if end < 0:
        raise TensorFormatError("ヘッダー行の終端 (改行) がありません", offset=0)
    try:
        raw = json.loads(data[:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise TensorFormatError(f"ヘッダーが不正です: {e}", offset=0) from e
    if not isinstance(raw, dict) or raw.get("magic") != TENSOR_MAGIC:
        raise TensorFormatError(f"magic が {TENSOR_MAGIC!r} ではありません", offset=0)
    if raw.get("version") != TENSOR_VERSION:
        raise TensorFormatError(f"未対応のバージョン {raw.get('version')}", offset=0)
    return raw, end + 1


def read_tensor_file(path: Union[str, Path]) -> Tuple[TensorHeader, List[HeadTensorBundle]]:
    data = Path(path).read_bytes()
    raw, offset = _read_header(data)
    try:
        header = TensorHeader.model_validate(raw)
    except ValidationError as e:
        raise TensorFormatError(f"ヘッダーが不正です: {e}", offset=0) from e
    if header.m <= header.s:
        raise TensorFormatError(f"m > s が必要です (m={header.m}, s={header.s})", offset=0)

    bundles = []
    for head in range(header.heads):
        arrays = []
        for name, (rows, cols) in zip(_PAYLOADS, header.shapes()):
            nbytes = rows * cols * _DTYPE.itemsize
            if offset + nbytes > len(data):
                raise TensorFormatError(
                    f"ヘッド {head} の {name} が切り詰められています "
                    f"({nbytes} bytes 必要、残り {len(data) - offset} bytes)",
                    offset=offset,
                )
            arrays.append(np.frombuffer(data, dtype=_DTYPE, count=rows * cols, offset=offset)
                          .reshape(rows, cols).copy())
            offset += nbytes
        if not all(np.isfinite(a).all() for a in arrays):
            raise TensorFormatError(f"ヘッド {head} に有限でない値があります",
                                    offset=offset - header.head_nbytes())
        bundles.append(HeadTensorBundle(*arrays))
    if offset != len(data):
        raise TensorFormatError(f"余分なデータが {len(data) - offset} bytes あります", offset=offset)
    return header, bundles


def write_tensor_file(path: Union[str, Path], bundles: Sequence[HeadTensorBundle]) -> Path:
    if not bundles:
        raise TensorFormatError("ヘッドがありません")
    first = bundles[0]
    if any((b.m, b.s, b.d_h) != (first.m, first.s, first.d_h) for b in bundles):
        raise TensorFormatError("全ヘッドの (m, s, d_h) が一致している必要があります")
    header = {"magic": TENSOR_MAGIC, "version": TENSOR_VERSION,
              "m": first.m, "s": first.s, "d_h": first.d_h, "heads": len(bundles)}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(json.dumps(header).encode("utf-8") + b"\n")
        for bundle in bundles:
            for name in _PAYLOADS:
                f.write(np.ascontiguousarray(getattr(bundle, name), dtype=_DTYPE).tobytes())
    return path


def random_bundles(seed: int, heads: int, m: int, s: int, d_h: int) -> List[HeadTensorBundle]:
    """シード付き乱数テンソル (回帰コーパス・テスト用)"""
    rng = np.random.default_rng(seed)

    def draw(rows: int) -> np.ndarray:
        return rng.standard_normal((rows, d_h)).astype(np.float32)

    return [HeadTensorBundle(draw(s), draw(m - s), draw(m - s), draw(s), draw(s)) for _ in range(heads)]


class RetainedHeader(BaseModel):
    magic: str
    version: int
    kind: str
    s: int = Field(..., ge=0)
    d_h: int = Field(..., ge=1)
    rows: List[int]


def write_retained_file(path: Union[str, Path], results: Sequence[EvictionResult], s: int) -> Path:
    """退避後の K̂ / V̂ を書き出す (ヘッドごとの行数はヘッダーの rows)"""
    if not results:
        raise TensorFormatError("ヘッドがありません")
    d_h = int(results[0].k_hat.shape[1])
    if any(r.k_hat.shape[1] != d_h or r.v_hat.shape != r.k_hat.shape for r in results):
        raise TensorFormatError("全ヘッドの d_h が一致し、K̂ と V̂ の形状が等しい必要があります")
    header = {"magic": TENSOR_MAGIC, "version": TENSOR_VERSION, "kind": "retained",
              "s": s, "d_h": d_h, "rows": [len(r) for r in results]}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(json.dumps(header).encode("utf-8") + b"\n")
        for result in results:
            f.write(np.ascontiguousarray(result.k_hat, dtype=_DTYPE).tobytes())
            f.write(np.ascontiguousarray(result.v_hat, dtype=_DTYPE).tobytes())
    return path


def read_retained_file(path: Union[str, Path]) -> Tuple[RetainedHeader, List[Tuple[np.ndarray, np.ndarray]]]:
    """write_retained_file の逆。ヘッドごとの (k_hat, v_hat) を返す"""
    data = Path(path).read_bytes()
    raw, offset = _read_header(data)
    try:
        header = RetainedHeader.model_validate(raw)
    except ValidationError as e:
        raise TensorFormatError(f"ヘッダーが不正です: {e}", offset=0) from e
    if header.kind != "retained":
        raise TensorFormatError(f"退避後のファイルではありません (kind={header.kind!r})", offset=0)

    caches = []
    for head, rows in enumerate(header.rows):
        pair = []
        for name in ("k_hat", "v_hat"):
            nbytes = rows * header.d_h * _DTYPE.itemsize
            if offset + nbytes > len(data):
                raise TensorFormatError(f"ヘッド {head} の {name} が切り詰められています", offset=offset)
            pair.append(np.frombuffer(data, dtype=_DTYPE, count=rows * header.d_h, offset=offset)
                        .reshape(rows, header.d_h).copy())
            offset += nbytes
        caches.append((pair[0], pair[1]))
    if offset != len(data):
        raise TensorFormatError(f"余分なデータが {len(data) - offset} bytes あります", offset=offset)
    return header, caches
