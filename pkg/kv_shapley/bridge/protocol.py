"""
オラクル通信プロトコル

1行1 JSON オブジェクト (UTF-8、改行終端):
  リクエスト: {"id": int, "n": int, "masked_players": [int, ...]}
  レスポンス: {"id": int, "utility": float, "diagnostics": {...}}   (diagnostics は任意)

masked_players は N∖S (マスクするヘッド)。空なら U(N)、全員なら U(∅)。
"""

import json
from typing import Any, Dict, List, Optional, Union

from pydantic import BaseModel, Field, ValidationError, model_validator

from ..core.coalition import CoalitionMask
from ..core.errors import MalformedReplyError


class OracleRequest(BaseModel):
    id: int = Field(..., ge=0)
    n: int = Field(..., ge=1)
    masked_players: List[int]

    @model_validator(mode="after")
    def _check_players(self) -> "OracleRequest":
        players = self.masked_players
        if players != sorted(set(players)):
            raise ValueError("masked_players は重複のない昇順が必要です")
        if players and not (0 <= players[0] and players[-1] < self.n):
            raise ValueError(f"masked_players は [0, {self.n}) の範囲が必要です")
        return self

    @classmethod
    def for_coalition(cls, request_id: int, mask: CoalitionMask) -> "OracleRequest":
        """提携 S の評価要求 (S の外側をマスクする)"""
        return cls(id=request_id, n=mask.n, masked_players=list(mask.complement().members()))

    def coalition(self) -> CoalitionMask:
        return CoalitionMask.from_members(self.n, self.masked_players).complement()

    def to_line(self) -> str:
        return json.dumps(self.model_dump(), separators=(",", ":")) + "\n"


class OracleResponse(BaseModel):
    id: int
    utility: float
    diagnostics: Optional[Dict[str, Any]] = None

    def to_line(self) -> str:
        return json.dumps(self.model_dump(exclude_none=True), separators=(",", ":")) + "\n"


def parse_response(payload: Union[str, bytes, Dict[str, Any]]) -> OracleResponse:
    """レスポンスを解析する。JSONとして不正・必須項目欠落は MalformedReplyError"""
    try:
        data = json.loads(payload) if isinstance(payload, (str, bytes)) else payload
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise MalformedReplyError(f"JSONとして解析できない応答: {e}", detail=payload) from e
    if not isinstance(data, dict):
        raise MalformedReplyError("応答がJSONオブジェクトではありません", detail=payload)
    if "error" in data and "utility" not in data:
        raise MalformedReplyError(f"オラクルがエラーを返しました: {data['error']}", detail=data)
    try:
        response = OracleResponse.model_validate(data)
    except ValidationError as e:
        raise MalformedReplyError(f"応答の形式が不正です: {e.errors()[0]['msg']}", detail=data) from e
    if response.utility != response.utility or response.utility in (float("inf"), float("-inf")):
        raise MalformedReplyError(f"効用が有限ではありません: {response.utility}", detail=data)
    return response
