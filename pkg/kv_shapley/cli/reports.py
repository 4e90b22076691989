"""
実行設定とレポート

- RunConfig            : 1つの JSON 文書で表す実行設定
                         (組み込み既定値 < 環境変数 < --config ファイル < フラグ)
- MaskExperimentReport : 上位 / 下位ヘッドをマスクしたときの効用
- RunManifest          : 各実行ディレクトリの manifest.json
"""

import csv
import json
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Union

from pydantic import BaseModel, Field, ValidationError

from .. import __version__
from ..config.settings import settings
from ..core.errors import ConfigurationError
from ..core.schema_validator import validate_document


class RunConfig(BaseModel):
    game: Optional[Dict[str, Any]] = None
    slice_set: Optional[List[int]] = None   # None なら n の 1/8, 1/4, 3/8, 1/2 (n=256 で {32, 64, 96, 128})
    samples: int = Field(default_factory=lambda: settings.estimator.sample_cap, ge=1)
    checkpoint_every: Optional[int] = Field(None, ge=1)
    seed: int = Field(default_factory=lambda: settings.estimator.seed, ge=0)
    workers: int = Field(default_factory=lambda: settings.estimator.workers, ge=1)
    mode: Literal["round_robin", "iid"] = Field(
        default_factory=lambda: settings.estimator.mode)  # type: ignore[arg-type]
    mirror_credit: bool = Field(default_factory=lambda: settings.estimator.mirror_credit)
    alpha: int = Field(default_factory=lambda: settings.allocation.alpha, ge=0)
    alphas: Optional[List[int]] = None
    budget: int = Field(0, ge=0)
    window: int = Field(default_factory=lambda: settings.allocation.window, ge=0)
    pooling_kernel: int = Field(default_factory=lambda: settings.allocation.pooling_kernel, ge=1)
    pooling_order: Literal["pool_then_mean", "mean_then_pool"] = "pool_then_mean"
    cache: bool = False
    cache_path: Optional[str] = None
    ks: List[int] = Field(default_factory=list)
    output_dir: str = "runs/latest"
    resume: bool = False
    games: int = Field(50, ge=1)

    def checkpoint_interval(self) -> int:
        """チェックポイント間隔 (1本あたりのサンプル数)"""
        return self.checkpoint_every or max(100, self.samples // 50)


def load_run_config(config_path: Optional[Union[str, Path]] = None,
                    overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """設定ファイルを検証して読み込み、フラグで上書きする (None のフラグは無視)"""
    data: Dict[str, Any] = {}
    if config_path is not None:
        try:
            with open(config_path, "r", encoding="utf-8") as f:
                data = json.load(f)
        except FileNotFoundError:
            raise ConfigurationError(f"設定ファイルが見つかりません: {config_path}") from None
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"設定ファイルの解析エラー: {e}") from e
        validate_document(data, "run_config")
    data.update({k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigurationError(f"実行設定が不正です: {e}") from e


class MaskRow(BaseModel):
    k: int
    policy: Literal["top", "low"]
    masked_players: List[int]
    utility: float


class MaskExperimentReport(BaseModel):
    """マスク実験の結果 (行は k 昇順、同じ k では top → low)"""
    baseline: float
    rows: List[MaskRow]
    labels: List[str] = Field(default_factory=list)

    def utility_at(self, k: int, policy: str) -> float:
        for row in self.rows:
            if row.k == k and row.policy == policy:
                return row.utility
        raise KeyError((k, policy))

    def to_json(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.model_dump_json(indent=2), encoding="utf-8")
        return path

    @classmethod
    def from_json(cls, path: Union[str, Path]) -> "MaskExperimentReport":
        return cls.model_validate_json(Path(path).read_text(encoding="utf-8"))

    def to_csv(self, path: Union[str, Path]) -> Path:
        """先頭行はベースライン (k=0, policy=none)"""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["k", "policy", "masked_players", "utility"])
            writer.writerow([0, "none", "", repr(self.baseline)])
            for row in self.rows:
                writer.writerow([row.k, row.policy, " ".join(map(str, row.masked_players)), repr(row.utility)])
        return path

    @classmethod
    def from_csv(cls, path: Union[str, Path]) -> "MaskExperimentReport":
        with open(path, "r", encoding="utf-8", newline="") as f:
            records = list(csv.DictReader(f))
        if not records or records[0]["policy"] != "none":
            raise ConfigurationError(f"マスク実験CSVの先頭行にベースラインがありません: {path}")
        rows = [
            MaskRow(k=int(r["k"]), policy=r["policy"],  # type: ignore[arg-type]
                    masked_players=[int(p) for p in r["masked_players"].split()],
                    utility=float(r["utility"]))
            for r in records[1:]
        ]
        return cls(baseline=float(records[0]["utility"]), rows=rows)

    def render(self) -> str:
        lines = [f"baseline U(N) = {self.baseline:.6f}", f"{'k':>4}  {'policy':<6}  utility"]
        for row in self.rows:
            lines.append(f"{row.k:>4}  {row.policy:<6}  {row.utility:.6f}")
        return "\n".join(lines)


class RunManifest(BaseModel):
    command: str
    version: str = __version__
    started_at: str
    finished_at: Optional[str] = None
    exit_code: Optional[int] = None
    status: str = "running"
    config: Dict[str, Any] = Field(default_factory=dict)
    artifacts: List[str] = Field(default_factory=list)
    summary: Dict[str, Any] = Field(default_factory=dict)

    @classmethod
    def begin(cls, command: str, config: Dict[str, Any]) -> "RunManifest":
        return cls(command=command, started_at=_now(), config=config)

    def finish(self, exit_code: int, status: str) -> "RunManifest":
        self.exit_code = exit_code
        self.status = status
        self.finished_at = _now()
        return self

    def write(self, out_dir: Union[str, Path]) -> Path:
        path = Path(out_dir) / "manifest.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.model_dump(), indent=2, ensure_ascii=False, default=str),
                        encoding="utf-8")
        return path


def _now() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
