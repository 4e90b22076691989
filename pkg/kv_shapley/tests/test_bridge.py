"""
外部オラクル接続のテスト

偽トランスポートと、順不同に応答するサブプロセスを使う。
"""

import asyncio
import json

import pytest

from kv_shapley.bridge.oracle import ExternalOracle, OracleBridge, external_fingerprint
from kv_shapley.bridge.protocol import OracleRequest, OracleResponse, parse_response
from kv_shapley.bridge.transports import (
    DirectoryTransport,
    HttpTransport,
    OracleTransport,
    StdioTransport,
    build_transport,
)
from kv_shapley.core.coalition import CoalitionMask
from kv_shapley.core.errors import (
    ConfigurationError,
    EvaluationError,
    IdMismatchError,
    MalformedReplyError,
    OracleTimeoutError,
    RangeViolationError,
    TransportError,
)
from kv_shapley.core.games import GameSpec, build_oracle


def additive_reply(req: OracleRequest, weights=(0.1, 0.2, 0.3, 0.4)) -> OracleResponse:
    masked = set(req.masked_players)
    return OracleResponse(id=req.id, utility=sum(w for p, w in enumerate(weights) if p not in masked))


class FakeTransport(OracleTransport):
    """呼び出しを記録する偽トランスポート"""

    def __init__(self, delay: float = 0.0, fail_first: int = 0, utility=None):
        self.delay = delay
        self.fail_first = fail_first
        self.utility = utility
        self.requests = []
        self.closed = False

    async def request(self, req: OracleRequest) -> OracleResponse:
        self.requests.append(req)
        await asyncio.sleep(self.delay)
        if self.fail_first > 0:
            self.fail_first -= 1
            raise TransportError("pipe closed")
        if self.utility is not None:
            return OracleResponse(id=req.id, utility=self.utility)
        return additive_reply(req)

    async def close(self) -> None:
        self.closed = True


class TestProtocol:
    def test_request_masks_complement(self):
        req = OracleRequest.for_coalition(7, CoalitionMask.from_members(4, [0, 2]))
        assert req.masked_players == [1, 3]
        assert json.loads(req.to_line()) == {"id": 7, "n": 4, "masked_players": [1, 3]}
        assert req.coalition() == CoalitionMask.from_members(4, [0, 2])

    def test_request_players_sorted_unique(self):
        with pytest.raises(ValueError):
            OracleRequest(id=0, n=3, masked_players=[2, 1])
        with pytest.raises(ValueError):
            OracleRequest(id=0, n=3, masked_players=[3])

    @pytest.mark.parametrize("payload", [
        "not json", "[1, 2]", '{"id": 1}', '{"id": 1, "utility": "abc"}',
        '{"id": 1, "error": "oom"}', '{"id": 1, "utility": NaN}',
    ])
    def test_malformed_replies(self, payload):
        with pytest.raises(MalformedReplyError):
            parse_response(payload)

    def test_diagnostics_optional(self):
        response = parse_response('{"id": 3, "utility": 0.5, "diagnostics": {"tokens": 12}}')
        assert response.diagnostics == {"tokens": 12}
        assert parse_response({"id": 3, "utility": 0.5}).diagnostics is None


class TestOracleBridge:
    @pytest.mark.asyncio
    async def test_evaluate_and_cache(self):
        transport = FakeTransport()
        bridge = OracleBridge(transport, 4, "fp")
        mask = CoalitionMask.from_members(4, [1, 3])
        assert await bridge.evaluate(mask) == pytest.approx(0.6)
        assert await bridge.evaluate(mask) == pytest.approx(0.6)
        assert len(transport.requests) == 1

    @pytest.mark.asyncio
    async def test_concurrent_duplicates_share_one_call(self):
        transport = FakeTransport(delay=0.05)
        bridge = OracleBridge(transport, 4, "fp")
        mask = CoalitionMask.full(4)
        values = await asyncio.gather(*(bridge.evaluate(mask) for _ in range(5)))
        assert values == [pytest.approx(1.0)] * 5
        assert len(transport.requests) == 1

    @pytest.mark.asyncio
    async def test_timeout(self):
        bridge = OracleBridge(FakeTransport(delay=1.0), 4, "fp", timeout=0.05)
        with pytest.raises(OracleTimeoutError) as info:
            await bridge.evaluate(CoalitionMask.from_members(4, [2]))
        assert info.value.coalition == (2,)

    @pytest.mark.asyncio
    async def test_transport_failure_retried_once(self):
        transport = FakeTransport(fail_first=1)
        bridge = OracleBridge(transport, 4, "fp")
        assert await bridge.evaluate(CoalitionMask.full(4)) == pytest.approx(1.0)
        assert len(transport.requests) == 2
        assert bridge.requests_sent == 2

    @pytest.mark.asyncio
    async def test_transport_failure_after_retry(self):
        transport = FakeTransport(fail_first=2)
        bridge = OracleBridge(transport, 4, "fp")
        with pytest.raises(TransportError) as info:
            await bridge.evaluate(CoalitionMask.from_members(4, [0, 1]))
        assert info.value.coalition == (0, 1)

    @pytest.mark.asyncio
    async def test_range_violation_not_cached(self):
        bridge = OracleBridge(FakeTransport(utility=1.5), 4, "fp", u_min=0.0, u_max=1.0)
        mask = CoalitionMask.full(4)
        with pytest.raises(RangeViolationError):
            await bridge.evaluate(mask)
        assert bridge.cache.peek("fp", mask) is None

    @pytest.mark.asyncio
    async def test_batch_preserves_order_and_dedups(self):
        transport = FakeTransport(delay=0.01)
        bridge = OracleBridge(transport, 4, "fp")
        masks = [CoalitionMask.from_members(4, m) for m in ([0], [1], [0], [2, 3], [1])]
        result = await bridge.evaluate_batch(masks, parallelism=3)
        assert result.ok
        assert result.values == pytest.approx([0.1, 0.2, 0.1, 0.7, 0.2])
        assert len(transport.requests) == 3

    @pytest.mark.asyncio
    async def test_batch_failure_manifest(self):
        class HalfBroken(FakeTransport):
            async def request(self, req):
                if 0 in req.masked_players:
                    return OracleResponse(id=req.id, utility=7.0)
                return additive_reply(req)

        bridge = OracleBridge(HalfBroken(), 4, "fp")
        masks = [CoalitionMask.full(4), CoalitionMask.from_members(4, [1, 2])]
        result = await bridge.evaluate_batch(masks)
        assert not result.ok
        assert result.values[0] == pytest.approx(1.0)
        assert result.values[1] is None
        assert result.failures[0].index == 1
        assert result.failures[0].coalition == [1, 2]
        assert result.failures[0].kind == "range"

    @pytest.mark.asyncio
    async def test_batch_parallelism_validated(self):
        bridge = OracleBridge(FakeTransport(), 4, "fp")
        with pytest.raises(ConfigurationError):
            await bridge.evaluate_batch([CoalitionMask.full(4)], parallelism=0)


class TestStdioTransport:
    @pytest.mark.asyncio
    async def test_out_of_order_replies_matched_by_id(self, oracle_script):
        transport = StdioTransport(oracle_script)
        try:
            requests = [OracleRequest.for_coalition(i, CoalitionMask.from_members(4, [i])) for i in range(4)]
            responses = await asyncio.gather(*(transport.request(r) for r in requests))
            assert [r.id for r in responses] == [0, 1, 2, 3]
            assert [r.utility for r in responses] == pytest.approx([0.1, 0.2, 0.3, 0.4])
            assert max(r.diagnostics["batch"] for r in responses) > 1
        finally:
            await transport.close()

    @pytest.mark.asyncio
    async def test_garbage_line_fails_request(self, oracle_script):
        bridge = OracleBridge(StdioTransport(oracle_script + ["--garbage"]), 4, "fp")
        try:
            with pytest.raises(MalformedReplyError) as info:
                await bridge.evaluate(CoalitionMask.from_members(4, [3]))
            assert info.value.coalition == (3,)
        finally:
            await bridge.close()

    @pytest.mark.asyncio
    async def test_restart_after_exit(self, oracle_script):
        transport = StdioTransport(oracle_script + ["--exit-after", "1"])
        bridge = OracleBridge(transport, 4, "fp")
        try:
            assert await bridge.evaluate(CoalitionMask.from_members(4, [0])) == pytest.approx(0.1)
            first_pid = transport.process.pid
            await asyncio.sleep(0.3)
            assert await bridge.evaluate(CoalitionMask.from_members(4, [1])) == pytest.approx(0.2)
            assert transport.process.pid != first_pid
        finally:
            await bridge.close()

    def test_command_required(self):
        with pytest.raises(ConfigurationError):
            StdioTransport([])


class TestDirectoryTransport:
    @pytest.mark.asyncio
    async def test_request_response_files(self, tmp_path):
        transport = DirectoryTransport(tmp_path / "xchg", poll_interval=0.01)

        async def responder():
            target = transport.request_path(5)
            while not target.exists():
                await asyncio.sleep(0.01)
            req = OracleRequest.model_validate_json(target.read_text(encoding="utf-8"))
            transport.response_path(5).write_text(additive_reply(req).to_line(), encoding="utf-8")

        task = asyncio.create_task(responder())
        req = OracleRequest.for_coalition(5, CoalitionMask.from_members(4, [0, 3]))
        response = await asyncio.wait_for(transport.request(req), timeout=5.0)
        await task
        assert response.utility == pytest.approx(0.5)
        assert not transport.response_path(5).exists()
        assert not transport.request_path(5).exists()

    @pytest.mark.asyncio
    async def test_wrong_id_rejected(self, tmp_path):
        transport = DirectoryTransport(tmp_path, poll_interval=0.01)
        transport.response_path(1).write_text('{"id": 2, "utility": 0.5}\n', encoding="utf-8")
        with pytest.raises(IdMismatchError):
            await transport.request(OracleRequest(id=1, n=2, masked_players=[]))

    @pytest.mark.asyncio
    async def test_timeout_removes_request_file(self, tmp_path):
        bridge = OracleBridge(DirectoryTransport(tmp_path, poll_interval=0.01), 4, "fp", timeout=0.05)
        with pytest.raises(OracleTimeoutError):
            await bridge.evaluate(CoalitionMask.from_members(4, [1]))
        assert list(tmp_path.glob("request-*")) == []


class FakeReply:
    def __init__(self, status_code, text):
        self.status_code = status_code
        self.text = text


class FakeSession:
    def __init__(self, status_code=200, body=None):
        self.status_code = status_code
        self.body = body
        self.posted = []
        self.closed = False

    def post(self, url, json=None, timeout=None):
        self.posted.append((url, json))
        body = self.body if self.body is not None else (
            '{"id": %d, "utility": 0.25}' % json["id"])
        return FakeReply(self.status_code, body)

    def close(self):
        self.closed = True


class TestHttpTransport:
    @pytest.mark.asyncio
    async def test_post_json(self):
        session = FakeSession()
        transport = HttpTransport("http://oracle.local/eval", session=session)
        response = await transport.request(OracleRequest(id=4, n=3, masked_players=[1]))
        assert response.utility == 0.25
        assert session.posted == [("http://oracle.local/eval", {"id": 4, "n": 3, "masked_players": [1]})]
        await transport.close()
        assert session.closed

    @pytest.mark.asyncio
    async def test_http_error_is_transport_error(self):
        transport = HttpTransport("http://oracle.local/eval", session=FakeSession(status_code=503, body="busy"))
        with pytest.raises(TransportError, match="503"):
            await transport.request(OracleRequest(id=0, n=3, masked_players=[]))

    def test_build_transport(self, tmp_path):
        assert isinstance(build_transport({"transport": "http", "url": "http://x"}), HttpTransport)
        assert isinstance(build_transport({"transport": "directory", "directory": str(tmp_path)}),
                          DirectoryTransport)
        with pytest.raises(ConfigurationError):
            build_transport({"transport": "carrier-pigeon"})
        with pytest.raises(ConfigurationError):
            build_transport({"transport": "directory"})


class TestExternalOracle:
    def test_from_spec_stdio(self, oracle_script, tmp_path):
        spec = GameSpec(family="external", n=4, u_max=2.0, params={
            "transport": "stdio", "command": oracle_script, "timeout": 30,
            "parallelism": 4, "cache_path": str(tmp_path / "cache.jsonl"),
        })
        oracle = build_oracle(spec)
        assert isinstance(oracle, ExternalOracle)
        with oracle:
            table = oracle.utility_table()
            assert table[0b1111] == pytest.approx(1.0)
            assert table[0b0101] == pytest.approx(0.4)
            assert oracle.evaluations == 16
            assert oracle.utility(CoalitionMask.full(4)) == pytest.approx(1.0)
            assert oracle.evaluations == 16
        lines = (tmp_path / "cache.jsonl").read_text(encoding="utf-8").splitlines()
        assert len(lines) == 16

    def test_table_failure_raises(self):
        bridge = OracleBridge(FakeTransport(utility=3.0), 2, "fp")
        with ExternalOracle(bridge) as oracle:
            with pytest.raises(EvaluationError, match="4"):
                oracle.utility_table()

    def test_identity_fingerprint(self):
        a = GameSpec(family="external", n=4, params={"transport": "http", "url": "http://a", "identity": "llama-x"})
        b = GameSpec(family="external", n=4, params={"transport": "http", "url": "http://b", "identity": "llama-x"})
        c = GameSpec(family="external", n=4, params={"transport": "http", "url": "http://b"})
        assert external_fingerprint(a) == external_fingerprint(b)
        assert external_fingerprint(a) != external_fingerprint(c)
