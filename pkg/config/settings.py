"""
Configuration Settings
Service settings from the environment and per-run configuration resolved from flags, config file and environment.
"""

from dotenv import load_dotenv

# Load .env file
load_dotenv()

import hashlib
import json
import logging
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional, Tuple, Union

from pydantic import Field, ValidationError, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from utils.errors import ConfigError
from utils.llm_gateway import Backend
from utils.prompts import Strategy
from utils.search import DEFAULT_SEARCH_URL, DEFAULT_SITE, GroundingConfig, Provider

log = logging.getLogger(__name__)

LIVE_CLAIM_TIMEOUT_S = 120.0


class Settings(BaseSettings):
    """Endpoints, credentials and decoding defaults (plain env var names, no prefix)."""

    model_config = SettingsConfigDict(extra="ignore")

    # API keys
    llm_api_key: Optional[str] = None
    search_api_key: Optional[str] = None

    # Endpoints
    llm_api_url: Optional[str] = None
    search_api_url: str = DEFAULT_SEARCH_URL
    llm_wire_mapping: str = "openai"

    # Decoding
    llm_model_id: str = "text-davinci-003"
    llm_max_tokens: int = Field(512, gt=0)
    llm_temperature: float = Field(0.0, ge=0)
    llm_max_retries: int = Field(3, ge=0)
    llm_timeout_s: float = Field(60.0, gt=0)

    def to_dict(self) -> Dict[str, Any]:
        """Settings without secrets."""
        return self.model_dump(exclude={"llm_api_key", "search_api_key"})


class RunConfig(BaseSettings):
    """Everything one CLI run needs; env vars use the CLAIMCHECK_ prefix."""

    model_config = SettingsConfigDict(env_prefix="CLAIMCHECK_", extra="forbid")

    strategy: Optional[Strategy] = None
    backend: str = "live"

    # grounding
    providers: str = "cache,websearch"
    site_restriction: Optional[str] = DEFAULT_SITE
    restriction_mode: Literal["prefix", "site_operator"] = "prefix"
    prefer_answer_box: bool = True
    snippet_max_chars: int = Field(600, ge=64)
    corpus: Optional[Path] = None
    cache: Optional[Path] = None
    rate_limit: float = Field(2.0, gt=0)

    # data
    dataset: Optional[Path] = None
    dataset_format: str = "jsonl"
    sample_n: Optional[int] = Field(None, gt=0)
    seed: int = 0
    per_challenge: bool = False

    # execution
    parallelism: int = Field(1, ge=1)
    claim_timeout_s: Optional[float] = Field(None, gt=0)
    out: Optional[Path] = None

    @field_validator("strategy", mode="before")
    @classmethod
    def _strategy(cls, value):
        if isinstance(value, str):
            return value.strip().lower()
        return value

    @field_validator("backend")
    @classmethod
    def _backend(cls, value: str) -> str:
        kind, _, rest = value.partition(":")
        Backend.from_flag(kind)
        if kind.strip().lower() == "replay" and not rest.strip():
            raise ValueError("replay backend needs a trace path: replay:PATH[,PATH...]")
        return value.strip()

    @property
    def backend_kind(self) -> Backend:
        return Backend.from_flag(self.backend.partition(":")[0])

    @property
    def replay_paths(self) -> List[Path]:
        rest = self.backend.partition(":")[2]
        return [Path(p.strip()) for p in rest.split(",") if p.strip()]

    @property
    def effective_timeout_s(self) -> Optional[float]:
        if self.claim_timeout_s is not None:
            return self.claim_timeout_s
        return LIVE_CLAIM_TIMEOUT_S if self.backend_kind == Backend.LIVE else None

    def grounding_config(self, **overrides) -> GroundingConfig:
        values = dict(
            site_restriction=self.site_restriction,
            snippet_max_chars=self.snippet_max_chars,
            cache_path=self.cache,
            corpus_path=self.corpus,
            provider_order=self.providers,
            restriction_mode=self.restriction_mode,
            prefer_answer_box=self.prefer_answer_box,
            rate_limit_per_s=self.rate_limit,
        )
        values.update(overrides)
        return GroundingConfig(**values)

    def validate_for(self, settings: Settings):
        """Preconditions that depend on the backend and provider choice."""
        if self.backend_kind == Backend.REPLAY:
            missing = [str(p) for p in self.replay_paths if not p.exists()]
            if missing:
                raise ConfigError(f"replay trace store not found: {', '.join(missing)}")
        if self.backend_kind == Backend.LIVE and not settings.llm_api_key:
            raise ConfigError("live backend needs LLM_API_KEY")
        order = self.grounding_config().provider_order
        if Provider.WEB_SEARCH in order and Provider.OFFLINE_CORPUS not in order and not settings.search_api_key:
            log.warning("search_key_missing providers=%s", self.providers)

    def digest(self) -> str:
        """SHA-256 over the fields that change results (not parallelism, timeouts or output path)."""
        semantic = self.model_dump(mode="json", exclude={"parallelism", "claim_timeout_s", "out"})
        return hashlib.sha256(json.dumps(semantic, sort_keys=True).encode("utf-8")).hexdigest()


def load_config_file(path: Union[str, Path]) -> Dict[str, Any]:
    """Flatten a TOML file into RunConfig keys; [section] key becomes section_key when that is a field."""
    try:
        with open(path, "rb") as f:
            document = tomllib.load(f)
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"invalid config file {path}: {e}") from e

    fields = RunConfig.model_fields
    flat: Dict[str, Any] = {}

    def put(key: str, value: Any):
        key = key.replace("-", "_")
        if key not in fields:
            raise ConfigError(f"unknown config key {key!r} in {path}")
        flat[key] = value

    for key, value in document.items():
        if isinstance(value, dict):
            for sub, sub_value in value.items():
                joined = f"{key}_{sub}".replace("-", "_")
                put(joined if joined in fields else sub, sub_value)
        else:
            put(key, value)
    return flat


def resolve_run_config(flags: Mapping[str, Any], config_path: Optional[Union[str, Path]] = None) -> RunConfig:
    """Precedence: flag > config file > CLAIMCHECK_* environment > default."""
    values: Dict[str, Any] = {}
    if config_path:
        values.update(load_config_file(config_path))
    values.update({k: v for k, v in flags.items() if v is not None})
    try:
        return RunConfig(**values)
    except ValidationError as e:
        raise ConfigError(f"invalid run configuration: {e}") from e


# Global settings instance
settings = Settings()
