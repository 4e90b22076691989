"""
設定管理

推定・オラクル接続・ログ出力の既定値

環境変数による設定例:
# 推定の既定シードとワーカー数
export KVS_SEED=2024
export KVS_WORKERS=4

# 外部オラクル (LLM評価ハーネス) のタイムアウト (秒)
export KVS_ORACLE_TIMEOUT=1800

# ログ
export KVS_LOG_LEVEL=DEBUG
export KVS_LOG_FILE=kv_shapley_debug.log
export KVS_TRACE_FILE=kv_shapley_trace.jsonl

優先順位: 組み込み既定値 < 環境変数 < --config ファイル < コマンドラインフラグ
"""

import os
from typing import List, Optional

from pydantic import BaseModel, Field


class EstimatorDefaults(BaseModel):
    """推定器の既定値

    スライス集合の既定値は n に対する比率で与える。
    256グループ構成では {32, 64, 96, 128} になる。
    """
    seed: int = 0
    workers: int = 1
    slice_fractions: List[float] = Field(default_factory=lambda: [0.125, 0.25, 0.375, 0.5])
    sample_cap: int = 50_000
    mode: str = "round_robin"  # round_robin | iid
    mirror_credit: bool = False


class BridgeDefaults(BaseModel):
    """外部オラクル接続の既定値"""
    timeout: float = 30 * 60.0  # LLM規模の推論を想定
    parallelism: int = 1
    poll_interval: float = 0.5  # directory モードのポーリング間隔
    u_min: float = 0.0
    u_max: float = 1.0


class AllocationDefaults(BaseModel):
    """予算配分の既定値"""
    window: int = 8
    alpha: int = 0
    alpha_grid: List[int] = Field(default_factory=lambda: [1, 5, 10, 15, 20, 30, 40])
    pooling_kernel: int = 7


class SystemConfig(BaseModel):
    """システム設定"""
    debug: bool = False
    log_level: str = "INFO"
    log_file: Optional[str] = None
    trace_file: Optional[str] = None


class Settings:
    """設定管理クラス"""

    def __init__(self) -> None:
        self.estimator = EstimatorDefaults()
        self.bridge = BridgeDefaults()
        self.allocation = AllocationDefaults()
        self.system = SystemConfig()

        # 環境変数から設定を読み込み
        self._load_from_env()

    def _load_from_env(self) -> None:
        """環境変数から設定を読み込み"""
        seed = os.getenv("KVS_SEED")
        if seed:
            self.estimator.seed = int(seed)
        workers = os.getenv("KVS_WORKERS")
        if workers:
            self.estimator.workers = max(1, int(workers))

        timeout = os.getenv("KVS_ORACLE_TIMEOUT")
        if timeout:
            self.bridge.timeout = float(timeout)

        debug = os.getenv("DEBUG")
        if debug:
            self.system.debug = debug.lower() in ("true", "1", "yes")
            if self.system.debug:
                self.system.log_level = "DEBUG"
        level = os.getenv("KVS_LOG_LEVEL")
        if level:
            self.system.log_level = level.upper()
        log_file = os.getenv("KVS_LOG_FILE")
        if log_file:
            self.system.log_file = log_file
        trace_file = os.getenv("KVS_TRACE_FILE")
        if trace_file:
            self.system.trace_file = trace_file


# グローバル設定インスタンス
settings = Settings()
