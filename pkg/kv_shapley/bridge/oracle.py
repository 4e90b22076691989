"""
外部オラクルとの接続

OracleBridge   : 非同期。トランスポート・キャッシュ・タイムアウト・値域検査を受け持つ
ExternalOracle : OracleBridge を同期の UtilityOracle として使うアダプタ
                 (バックグラウンドスレッドでイベントループを回す)
"""

import asyncio
import hashlib
import itertools
import json
import threading
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
from langsmith import traceable
from pydantic import BaseModel, Field

from ..config.settings import settings
from ..core.coalition import CoalitionMask, PlayerSet
from ..core.debug_logger import get_debug_logger
from ..core.errors import ConfigurationError, EvaluationError, OracleTimeoutError, RangeViolationError, TransportError
from ..core.games import GameSpec, UtilityOracle
from .cache import EvalCache, load_cache
from .protocol import OracleRequest
from .transports import OracleTransport, build_transport


class FailureRecord(BaseModel):
    index: int
    coalition: List[int]
    kind: str
    message: str


class BatchResult(BaseModel):
    """バッチ評価の結果。失敗した位置は None で、failures に理由が残る"""
    values: List[Optional[float]]
    failures: List[FailureRecord] = Field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures


class OracleBridge:
    """外部オラクルへの非同期アクセス

    同じ提携はキャッシュの生存期間中に高々1回しか評価しない。
    トランスポート障害は1回だけ再試行する。
    """

    def __init__(self, transport: OracleTransport, n: int, fingerprint: str,
                 u_min: float = 0.0, u_max: float = 1.0, timeout: float = 1800.0,
                 cache: Optional[EvalCache] = None, retries: int = 1):
        self.transport = transport
        self.n = n
        self.fingerprint = fingerprint
        self.u_min = u_min
        self.u_max = u_max
        self.timeout = timeout
        self.cache = cache if cache is not None else EvalCache()
        self.retries = retries
        self.requests_sent = 0
        self._ids = itertools.count()
        self._inflight: Dict[str, "asyncio.Future[float]"] = {}

    async def evaluate(self, mask: CoalitionMask) -> float:
        """U(S)。キャッシュ済みならオラクルを呼ばない"""
        cached = self.cache.get(self.fingerprint, mask)
        if cached is not None:
            return cached
        key = mask.key()
        inflight = self._inflight.get(key)
        if inflight is not None:
            return await asyncio.shield(inflight)

        future: "asyncio.Future[float]" = asyncio.get_running_loop().create_future()
        self._inflight[key] = future
        try:
            value = await self._call(mask)
        except asyncio.CancelledError:
            future.cancel()
            raise
        except Exception as e:
            future.set_exception(e)
            future.exception()  # 未回収の例外警告を抑止
            raise
        finally:
            self._inflight.pop(key, None)
        self.cache.put(self.fingerprint, mask, value)
        future.set_result(value)
        return value

    async def _call(self, mask: CoalitionMask) -> float:
        members = mask.members()
        attempt = 0
        while True:
            req = OracleRequest.for_coalition(next(self._ids), mask)
            self.requests_sent += 1
            try:
                response = await asyncio.wait_for(self.transport.request(req), timeout=self.timeout)
            except asyncio.TimeoutError:
                raise OracleTimeoutError(f"{self.timeout} 秒以内に応答がありません", coalition=members) from None
            except TransportError as e:
                if attempt < self.retries:
                    attempt += 1
                    get_debug_logger().warn("BRIDGE", "retry", f"トランスポート障害のため再試行します: {e}",
                                            {"request_id": req.id})
                    continue
                raise TransportError(str(e), coalition=members, detail=e.detail) from e
            except EvaluationError as e:
                raise type(e)(str(e), coalition=members, detail=e.detail) from e

            utility = response.utility
            if not self.u_min <= utility <= self.u_max:
                raise RangeViolationError(
                    f"効用 {utility} が宣言範囲 [{self.u_min}, {self.u_max}] の外です", coalition=members,
                )
            get_debug_logger().trace("BRIDGE", "evaluate", "評価完了", {
                "request_id": req.id, "utility": utility, "diagnostics": response.diagnostics,
            })
            return utility

    @traceable(name="oracle_batch")
    async def evaluate_batch(self, masks: Sequence[CoalitionMask], parallelism: int = 1) -> BatchResult:
        """入力順を保ったバッチ評価

        バッチ内の重複とキャッシュ済みの提携は評価しない。同時に送る要求は parallelism 件まで。
        """
        if parallelism < 1:
            raise ConfigurationError(f"parallelism は1以上が必要です: {parallelism}")
        unique: Dict[str, CoalitionMask] = {}
        for mask in masks:
            unique.setdefault(mask.key(), mask)

        semaphore = asyncio.Semaphore(parallelism)
        outcomes: Dict[str, Any] = {}

        async def run(key: str, mask: CoalitionMask) -> None:
            async with semaphore:
                try:
                    outcomes[key] = await self.evaluate(mask)
                except EvaluationError as e:
                    outcomes[key] = e

        await asyncio.gather(*(run(key, mask) for key, mask in unique.items()))

        values: List[Optional[float]] = []
        failures: List[FailureRecord] = []
        for index, mask in enumerate(masks):
            outcome = outcomes[mask.key()]
            if isinstance(outcome, EvaluationError):
                values.append(None)
                failures.append(FailureRecord(index=index, coalition=list(mask.members()),
                                              kind=outcome.kind, message=str(outcome)))
            else:
                values.append(outcome)
        if failures:
            get_debug_logger().warn("BRIDGE", "batch", "評価に失敗した提携があります", {
                "failed": len(failures), "total": len(masks),
            })
        return BatchResult(values=values, failures=failures)

    async def close(self) -> None:
        await self.transport.close()


class ExternalOracle(UtilityOracle):
    """OracleBridge を同期の UtilityOracle として使う

    evaluations はオラクルへ実際に送った要求数。
    """

    def __init__(self, bridge: OracleBridge, players: Optional[PlayerSet] = None, parallelism: int = 1):
        super().__init__(players or PlayerSet.default(bridge.n), bridge.u_min, bridge.u_max, bridge.fingerprint)
        self.bridge = bridge
        self.parallelism = parallelism
        self._loop = asyncio.new_event_loop()
        self._thread = threading.Thread(target=self._loop.run_forever, name="oracle-bridge", daemon=True)
        self._thread.start()

    @classmethod
    def from_spec(cls, spec: GameSpec) -> "ExternalOracle":
        p = spec.params
        transport = build_transport(p, settings.bridge.poll_interval)
        cache_path = p.get("cache_path")
        cache = load_cache(cache_path, journal=True) if cache_path else EvalCache()
        bridge = OracleBridge(
            transport, spec.n, external_fingerprint(spec),
            spec.u_min if spec.u_min is not None else settings.bridge.u_min,
            spec.u_max if spec.u_max is not None else settings.bridge.u_max,
            float(p.get("timeout", settings.bridge.timeout)),
            cache,
        )
        return cls(bridge, spec.players(), int(p.get("parallelism", settings.bridge.parallelism)))

    @property
    def evaluations(self) -> int:
        return self.bridge.requests_sent

    @property
    def cache(self) -> EvalCache:
        return self.bridge.cache

    def _run(self, coro: Any) -> Any:
        return asyncio.run_coroutine_threadsafe(coro, self._loop).result()

    def _evaluate(self, mask: CoalitionMask) -> float:
        return float(self._run(self.bridge.evaluate(mask)))

    def utility(self, mask: CoalitionMask) -> float:
        if mask.n != self.n:
            raise ConfigurationError(f"提携の長さ {mask.n} がオラクルの n={self.n} と一致しません")
        return self._evaluate(mask)

    def evaluate_batch(self, masks: Sequence[CoalitionMask]) -> BatchResult:
        return self._run(self.bridge.evaluate_batch(masks, self.parallelism))

    def _evaluate_table(self) -> np.ndarray:
        masks = [CoalitionMask(self.n, bits) for bits in range(1 << self.n)]
        result = self.evaluate_batch(masks)
        if not result.ok:
            first = result.failures[0]
            raise EvaluationError(f"{len(result.failures)} 個の提携の評価に失敗しました: {first.message}",
                                  coalition=first.coalition, detail=[f.model_dump() for f in result.failures])
        return np.asarray(result.values, dtype=np.float64)

    def utility_table(self) -> np.ndarray:
        return self._evaluate_table()

    def close(self) -> None:
        if not self._loop.is_running():
            return
        self._run(self.bridge.close())
        self._loop.call_soon_threadsafe(self._loop.stop)
        self._thread.join(timeout=5.0)

    def __enter__(self) -> "ExternalOracle":
        return self

    def __exit__(self, *exc: Any) -> None:
        self.close()


def external_fingerprint(spec: GameSpec) -> str:
    """外部オラクルの指紋

    params.identity があればそれだけから作る (接続先の変更でキャッシュが無効にならない)。
    """
    identity = spec.params.get("identity")
    if not identity:
        return spec.fingerprint()
    canonical = json.dumps({"family": "external", "n": spec.n, "identity": identity},
                           sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]
