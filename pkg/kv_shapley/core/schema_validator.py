"""
JSON文書のスキーマ検証

GameSpec と RunConfig の JSON を schema/ 以下の JSON Schema で検証する。
pydantic による型検証の前段で、利用者に分かりやすいパス付きのエラーを返す。
"""

import json
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, List

from jsonschema import Draft7Validator

from .errors import ConfigurationError

SCHEMA_DIR = Path(__file__).parent.parent / "schema"

_SCHEMA_FILES = {
    "game_spec": "game_spec_schema.json",
    "run_config": "run_config_schema.json",
}


@lru_cache(maxsize=None)
def _load_validator(name: str) -> Draft7Validator:
    """JSON Schemaをロード"""
    try:
        schema_path = SCHEMA_DIR / _SCHEMA_FILES[name]
    except KeyError:
        raise ConfigurationError(f"未知のスキーマ: {name}") from None
    try:
        with open(schema_path, "r", encoding="utf-8") as f:
            schema = json.load(f)
    except FileNotFoundError:
        raise ConfigurationError(f"スキーマファイルが見つかりません: {schema_path}") from None
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"スキーマファイルの解析エラー: {e}") from e
    Draft7Validator.check_schema(schema)
    return Draft7Validator(schema)


def schema_errors(document: Dict[str, Any], name: str) -> List[str]:
    """検証エラーを "path: message" の形で返す (空なら妥当)"""
    validator = _load_validator(name)
    errors = []
    for error in sorted(validator.iter_errors(document), key=lambda e: list(e.absolute_path)):
        path = "/".join(str(p) for p in error.absolute_path) or "<root>"
        errors.append(f"{path}: {error.message}")
    return errors


def validate_document(document: Dict[str, Any], name: str) -> None:
    """スキーマ違反があれば ConfigurationError"""
    errors = schema_errors(document, name)
    if errors:
        raise ConfigurationError(f"{name} の検証エラー: " + "; ".join(errors))
