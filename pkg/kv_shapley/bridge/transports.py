"""
オラクルへのトランスポート

- StdioTransport     : サブプロセスの標準入出力で1行1 JSON。複数要求を多重化し、
                       順不同の応答を id で対応付ける
- DirectoryTransport : request-<id>.json を書き、response-<id>.json を待つ
                       (バッチクラスタのスケジューラ向け)
- HttpTransport      : 同じ JSON を HTTP POST で送る

タイムアウトは呼び出し側 (OracleBridge) が asyncio.wait_for で掛ける。
"""

import asyncio
import os
from abc import ABC, abstractmethod
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import requests

from ..core.debug_logger import get_debug_logger
from ..core.errors import ConfigurationError, IdMismatchError, MalformedReplyError, TransportError
from .protocol import OracleRequest, OracleResponse, parse_response


class OracleTransport(ABC):
    """トランスポートの共通インターフェース"""

    async def start(self) -> None:
        return None

    @abstractmethod
    async def request(self, req: OracleRequest) -> OracleResponse:
        """1件の要求を送り、対応する応答を返す"""

    async def close(self) -> None:
        return None

    @staticmethod
    def _check_id(req: OracleRequest, response: OracleResponse) -> OracleResponse:
        if response.id != req.id:
            raise IdMismatchError(f"応答 id={response.id} が要求 id={req.id} と一致しません")
        return response


class StdioTransport(OracleTransport):
    """サブプロセスとの行区切り JSON 通信

    解析できない行や未知の id を持つ行は、最も古い未完了の要求を失敗させる。
    プロセスが終了していれば次の要求時に再起動する。
    """

    def __init__(self, command: List[str], env: Optional[Dict[str, str]] = None,
                 cwd: Optional[str] = None):
        if not command:
            raise ConfigurationError("stdio トランスポートには command が必要です")
        self.command = list(command)
        self.env = env
        self.cwd = cwd
        self.process: Optional[asyncio.subprocess.Process] = None
        self._pending: Dict[int, "asyncio.Future[OracleResponse]"] = {}
        self._reader: Optional["asyncio.Task[None]"] = None
        self._write_lock = asyncio.Lock()

    async def start(self) -> None:
        alive = self.process is not None and self.process.returncode is None
        reading = self._reader is not None and not self._reader.done()
        if alive and reading:
            return
        if alive:
            # 標準出力が閉じたプロセスは使えない
            assert self.process is not None
            self.process.kill()
            await self.process.wait()
        full_env = dict(os.environ)
        full_env.update(self.env or {})
        try:
            self.process = await asyncio.create_subprocess_exec(
                *self.command,
                stdin=asyncio.subprocess.PIPE,
                stdout=asyncio.subprocess.PIPE,
                env=full_env,
                cwd=self.cwd,
            )
        except OSError as e:
            raise TransportError(f"オラクルプロセスを起動できません: {e}") from e
        self._reader = asyncio.create_task(self._read_loop(self.process))
        get_debug_logger().info("BRIDGE", "start", "オラクルプロセスを起動しました", {
            "command": self.command, "pid": self.process.pid,
        })

    async def _read_loop(self, process: asyncio.subprocess.Process) -> None:
        assert process.stdout is not None
        while True:
            line = await process.stdout.readline()
            if not line:
                self._fail_all(TransportError("オラクルプロセスが終了しました"))
                return
            if not line.strip():
                continue
            try:
                response = parse_response(line)
            except MalformedReplyError as e:
                self._fail_oldest(e)
                continue
            future = self._pending.get(response.id)
            if future is None:
                self._fail_oldest(IdMismatchError(f"未知の id={response.id} の応答を受信しました"))
                continue
            if not future.done():
                future.set_result(response)

    def _fail_oldest(self, error: Exception) -> None:
        for future in self._pending.values():
            if not future.done():
                future.set_exception(error)
                return
        get_debug_logger().warn("BRIDGE", "read", f"対応する要求のない応答を破棄しました: {error}")

    def _fail_all(self, error: Exception) -> None:
        for future in self._pending.values():
            if not future.done():
                future.set_exception(error)

    async def request(self, req: OracleRequest) -> OracleResponse:
        await self.start()
        assert self.process is not None and self.process.stdin is not None
        if req.id in self._pending:
            raise ConfigurationError(f"id={req.id} の要求がすでに処理中です")
        future: "asyncio.Future[OracleResponse]" = asyncio.get_running_loop().create_future()
        self._pending[req.id] = future
        try:
            async with self._write_lock:
                try:
                    self.process.stdin.write(req.to_line().encode("utf-8"))
                    await self.process.stdin.drain()
                except (BrokenPipeError, ConnectionResetError) as e:
                    raise TransportError(f"オラクルへの書き込みに失敗しました: {e}") from e
            return await future
        finally:
            self._pending.pop(req.id, None)

    async def close(self) -> None:
        process = self.process
        if process is None:
            return
        if process.stdin is not None and not process.stdin.is_closing():
            process.stdin.close()
        try:
            await asyncio.wait_for(process.wait(), timeout=5.0)
        except asyncio.TimeoutError:
            # 強制終了
            process.kill()
            await process.wait()
        if self._reader is not None:
            self._reader.cancel()
            try:
                await self._reader
            except (asyncio.CancelledError, Exception):
                pass
        self._fail_all(TransportError("トランスポートを閉じました"))
        self.process = None


class DirectoryTransport(OracleTransport):
    """ファイル交換によるトランスポート

    要求は一時ファイル経由の置換で原子的に書く。応答ファイルは読み取り後に、
    要求ファイルは応答・タイムアウト・失敗のいずれでも削除する。
    """

    def __init__(self, directory: Union[str, Path], poll_interval: float = 0.5):
        self.directory = Path(directory)
        self.poll_interval = poll_interval

    async def start(self) -> None:
        self.directory.mkdir(parents=True, exist_ok=True)

    def request_path(self, request_id: int) -> Path:
        return self.directory / f"request-{request_id}.json"

    def response_path(self, request_id: int) -> Path:
        return self.directory / f"response-{request_id}.json"

    async def request(self, req: OracleRequest) -> OracleResponse:
        await self.start()
        target = self.request_path(req.id)
        tmp = target.with_suffix(".json.tmp")
        try:
            tmp.write_text(req.to_line(), encoding="utf-8")
            tmp.replace(target)
        except OSError as e:
            raise TransportError(f"要求ファイルを書き込めません: {e}") from e

        response_file = self.response_path(req.id)
        try:
            while not response_file.exists():
                await asyncio.sleep(self.poll_interval)
            response = await self._read_response(response_file)
            response_file.unlink(missing_ok=True)
        finally:
            # タイムアウトでキャンセルされても要求は残さない
            target.unlink(missing_ok=True)
        return self._check_id(req, response)

    async def _read_response(self, path: Path) -> OracleResponse:
        # 書き込み途中のファイルに備えて1回だけ読み直す
        try:
            return parse_response(path.read_text(encoding="utf-8"))
        except MalformedReplyError:
            await asyncio.sleep(self.poll_interval)
            return parse_response(path.read_text(encoding="utf-8"))


class HttpTransport(OracleTransport):
    """HTTP POST によるトランスポート (requests をエグゼキュータで実行)"""

    def __init__(self, url: str, timeout: Optional[float] = None,
                 session: Optional[requests.Session] = None):
        if not url:
            raise ConfigurationError("http トランスポートには url が必要です")
        self.url = url
        self.timeout = timeout
        self.session = session or requests.Session()

    def _post(self, payload: Dict[str, Any]) -> Any:
        try:
            reply = self.session.post(self.url, json=payload, timeout=self.timeout)
        except requests.RequestException as e:
            raise TransportError(f"HTTP要求に失敗しました: {e}") from e
        if reply.status_code >= 400:
            raise TransportError(f"HTTP {reply.status_code}: {reply.text[:200]}")
        return reply.text

    async def request(self, req: OracleRequest) -> OracleResponse:
        loop = asyncio.get_running_loop()
        body = await loop.run_in_executor(None, self._post, req.model_dump())
        return self._check_id(req, parse_response(body))

    async def close(self) -> None:
        self.session.close()


def build_transport(params: Dict[str, Any], poll_interval: float = 0.5) -> OracleTransport:
    """外部ゲーム定義の params からトランスポートを作る"""
    kind = params.get("transport")
    if kind == "stdio":
        command = params.get("command")
        if isinstance(command, str):
            command = [command]
        return StdioTransport(command or [], cwd=params.get("cwd"))
    if kind == "directory":
        if not params.get("directory"):
            raise ConfigurationError("directory トランスポートには directory が必要です")
        return DirectoryTransport(params["directory"], float(params.get("poll_interval", poll_interval)))
    if kind == "http":
        return HttpTransport(params.get("url", ""), params.get("timeout"))
    raise ConfigurationError(f"未知のトランスポート: {kind}")

