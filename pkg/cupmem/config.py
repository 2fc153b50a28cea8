"""
Configuration: process settings from the environment and per-run models.

Settings come from CUPMEM_* variables (after loading .env.{ENVIRONMENT});
nothing is required, every CLI command works from flags alone.
"""
from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import Dict, Optional

from pydantic import AliasChoices, BaseModel, ConfigDict, Field, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from cupmem.database import DEFAULT_DATABASE_URL, load_environment
from cupmem.errors import IoError
from cupmem.schemas import ConditionKind, Verdict


class Settings(BaseSettings):
    model_config = SettingsConfigDict(env_prefix="CUPMEM_", extra="ignore")

    environment: str = Field(
        default="development",
        validation_alias=AliasChoices("CUPMEM_ENVIRONMENT", "ENVIRONMENT"),
    )
    log_level: Optional[str] = None
    log_dir: Optional[str] = None
    use_gcp_logging: bool = False
    use_gcp_monitoring: bool = False
    gcp_project_id: Optional[str] = None
    gcp_service_name: str = "cupmem"
    redis_url: Optional[str] = None
    redis_enabled: bool = False
    verdict_cache_ttl: int = 86400
    judge_endpoint: Optional[str] = None
    judge_timeout_s: float = 10.0
    judge_max_retries: int = 2
    database_url: str = DEFAULT_DATABASE_URL
    schema_path: Optional[str] = None
    knowledge_path: Optional[str] = None


@lru_cache()
def get_settings() -> Settings:
    load_environment()
    return Settings()


class AdjudicatorKind(str, Enum):
    RULE_BASED = "RULE_BASED"
    EXTERNAL = "EXTERNAL"


DEFAULT_VERDICT_MAP: Dict[ConditionKind, Verdict] = {
    ConditionKind.SINGLE_SLOT: Verdict.REPLACE,
    ConditionKind.INCOMPAT_SAME_SLOT: Verdict.STALE,
    ConditionKind.DEPENDENCY: Verdict.UNKNOWN,
}


class AdjudicatorConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: AdjudicatorKind = AdjudicatorKind.RULE_BASED
    endpoint: Optional[str] = None
    timeout: float = Field(default=10.0, gt=0)
    max_retries: int = Field(default=2, ge=0)
    max_in_flight: int = Field(default=4, ge=1)
    fallback_verdict: Verdict = Verdict.UNKNOWN
    verdict_map: Dict[ConditionKind, Verdict] = Field(default_factory=lambda: dict(DEFAULT_VERDICT_MAP))
    cache_ttl: Optional[int] = Field(default=None, ge=1)

    @field_validator("fallback_verdict")
    @classmethod
    def _fallback_not_replace(cls, v: Verdict) -> Verdict:
        if v == Verdict.REPLACE:
            raise ValueError("REPLACE needs a replacement and cannot be a fallback verdict")
        return v

    @model_validator(mode="after")
    def _endpoint_for_external(self):
        if self.kind == AdjudicatorKind.EXTERNAL and not self.endpoint:
            raise ValueError("EXTERNAL adjudicator requires an endpoint")
        missing = set(ConditionKind) - set(self.verdict_map)
        if missing:
            raise ValueError(f"verdict_map missing {sorted(m.value for m in missing)}")
        return self


class IngestConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    adjudicator: AdjudicatorConfig = Field(default_factory=AdjudicatorConfig)
    global_k: int = Field(default=5, ge=0)
    transitive_affect: bool = False


class RunConfig(BaseModel):
    """Everything one CLI run needs; all randomness flows from seed"""

    model_config = ConfigDict(extra="forbid")

    schema_path: Optional[Path] = None
    knowledge_path: Optional[Path] = None
    adjudicator: AdjudicatorConfig = Field(default_factory=AdjudicatorConfig)
    global_k: int = Field(default=5, ge=0)
    seed: int = 0
    count_type_i: int = Field(default=200, ge=0)
    count_type_ii: int = Field(default=200, ge=0)
    sessions_per_haystack: int = Field(default=10, ge=2)
    gap_min_days: int = Field(default=30, ge=0)
    gap_max_days: int = Field(default=180, ge=0)
    target_year: int = Field(default=2027, ge=1971, le=9998)
    workers: int = Field(default=1, ge=1)
    out: Optional[Path] = None
    verbose: bool = False

    def ensure_paths(self) -> None:
        for path in (self.schema_path, self.knowledge_path):
            if path is not None and not path.is_file():
                raise IoError(f"cannot read {path}: no such file")

    def ingest_config(self) -> IngestConfig:
        return IngestConfig(adjudicator=self.adjudicator, global_k=self.global_k)
