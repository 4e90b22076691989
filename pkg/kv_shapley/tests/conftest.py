"""
pytest設定ファイル

kv-shapley のテスト用共通ゲームとフィクスチャ
"""

import os
import sys
from pathlib import Path

import pytest

# トレースは外部送信しない
os.environ.setdefault("LANGSMITH_TRACING", "false")

FIXTURES = Path(__file__).parent / "fixtures"

from kv_shapley.core.games import (  # noqa: E402
    AdditiveGame,
    GameSpec,
    SaboteurGame,
    SymmetricGame,
    build_oracle,
    random_tabular_game,
)


@pytest.fixture
def additive4() -> AdditiveGame:
    """重み [1, 2, 3, 4] の加法ゲーム"""
    return AdditiveGame([1.0, 2.0, 3.0, 4.0])


@pytest.fixture
def symmetric5() -> SymmetricGame:
    return SymmetricGame([0.0, 0.1, 0.35, 0.5, 0.9, 1.0])


@pytest.fixture
def saboteur8() -> SaboteurGame:
    """有益3人・有害2人のゲーム (JSON 経由で構築)"""
    spec = GameSpec.model_validate({
        "family": "saboteur", "n": 8,
        "params": {"base": 0.5,
                   "helpful": {"0": 0.2, "3": 0.15, "5": 0.1},
                   "harmful": {"2": -0.2, "6": -0.15}},
    })
    oracle = build_oracle(spec)
    assert isinstance(oracle, SaboteurGame)
    return oracle


@pytest.fixture
def random_game():
    """シード付き乱数ゲームの生成関数"""
    return random_tabular_game


@pytest.fixture
def oracle_script() -> list:
    """順不同に応答する stdio オラクルの起動コマンド"""
    return [sys.executable, str(FIXTURES / "out_of_order_oracle.py")]
