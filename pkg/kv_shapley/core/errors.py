"""
例外階層

CLIはこの階層を終了コードに対応付ける (cli/main.py 参照)。
"""

from typing import Any, Optional, Sequence


class KvShapleyError(Exception):
    """パッケージ共通の基底例外"""


class ConfigurationError(KvShapleyError):
    """設定・引数の不整合"""


class CapabilityError(ConfigurationError):
    """列挙上限などの能力制限を超えた要求"""


class EstimateError(KvShapleyError):
    """推定値を確定できない (カウント0のスライスが残っている等)"""


class NotConvergedError(EstimateError):
    """サンプル上限までに2系列の MAE が 1/n を下回らなかった"""

    def __init__(self, mae: float, threshold: float, samples_per_run: int):
        self.mae = mae
        self.threshold = threshold
        self.samples_per_run = samples_per_run
        super().__init__(f"未収束: MAE={mae:.3e} >= 1/n={threshold:.3e} ({samples_per_run} samples/run)")


class VerificationError(KvShapleyError):
    """総当たり検証の失敗"""


class TableFormatError(KvShapleyError):
    """寄与テーブルファイルの破損・バージョン不一致"""


class TensorFormatError(KvShapleyError):
    """テンソルファイルの形式違反"""

    def __init__(self, message: str, offset: Optional[int] = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)


class EvaluationError(KvShapleyError):
    """効用評価の失敗

    失敗した提携 (メンバーのインデックス列) を保持する。
    """

    kind = "evaluation"

    def __init__(self, message: str, coalition: Optional[Sequence[int]] = None,
                 detail: Any = None):
        self.coalition = tuple(coalition) if coalition is not None else None
        self.detail = detail
        if self.coalition is not None:
            message = f"{message} [coalition={list(self.coalition)}]"
        super().__init__(message)


class TransportError(EvaluationError):
    """トランスポート層の障害 (パイプ切断・HTTPエラー等)。1回だけ再試行される"""

    kind = "transport"


class OracleTimeoutError(EvaluationError):
    kind = "timeout"


class MalformedReplyError(EvaluationError):
    kind = "malformed"


class RangeViolationError(EvaluationError):
    kind = "range"


class IdMismatchError(EvaluationError):
    kind = "id_mismatch"
