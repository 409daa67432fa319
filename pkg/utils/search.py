"""
Knowledge Grounding
Answers follow-up questions from web search (top-1 snippet), an offline corpus, a persistent cache
or the model's own knowledge.
"""

import json
import logging
import threading
import time
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Literal, Optional, Tuple, Union

import requests
from pydantic import BaseModel, ConfigDict, Field, field_validator

from utils.errors import ConfigError, FormatError, GroundingMiss, ProviderUnavailable, StorageFailure

log = logging.getLogger(__name__)

DEFAULT_SITE = "en.wikipedia.org"
DEFAULT_SEARCH_URL = "https://serpapi.com/search.json"


class Provider(str, Enum):
    WEB_SEARCH = "WebSearch"
    OFFLINE_CORPUS = "OfflineCorpus"
    CACHE = "Cache"
    SELF_ANSWER = "SelfAnswer"

    @classmethod
    def from_flag(cls, value: Union[str, "Provider"]) -> "Provider":
        if isinstance(value, Provider):
            return value
        aliases = {
            "websearch": cls.WEB_SEARCH, "web": cls.WEB_SEARCH, "web_search": cls.WEB_SEARCH,
            "offlinecorpus": cls.OFFLINE_CORPUS, "offline": cls.OFFLINE_CORPUS, "corpus": cls.OFFLINE_CORPUS,
            "cache": cls.CACHE,
            "selfanswer": cls.SELF_ANSWER, "self_answer": cls.SELF_ANSWER, "self": cls.SELF_ANSWER,
        }
        try:
            return aliases[value.strip().lower().replace("-", "_")]
        except KeyError:
            raise ConfigError(f"unknown grounding provider {value!r}") from None


class GroundedQA(BaseModel):
    model_config = ConfigDict(frozen=True)

    question: str
    answer: str = Field(min_length=1)
    source_url: str = ""
    provider: Provider


class GroundingConfig(BaseModel):
    site_restriction: Optional[str] = DEFAULT_SITE
    snippet_max_chars: int = Field(600, ge=64)
    cache_path: Optional[Path] = None
    corpus_path: Optional[Path] = None
    provider_order: Tuple[Provider, ...] = (Provider.CACHE, Provider.WEB_SEARCH)
    restriction_mode: Literal["prefix", "site_operator"] = "prefix"
    prefer_answer_box: bool = True
    rate_limit_per_s: float = Field(2.0, gt=0)

    @field_validator("provider_order", mode="before")
    @classmethod
    def _parse_providers(cls, value):
        if isinstance(value, str):
            value = [v for v in value.split(",") if v.strip()]
        return tuple(Provider.from_flag(v) for v in value)

    @field_validator("site_restriction", mode="before")
    @classmethod
    def _blank_site(cls, value):
        if value is None or not str(value).strip() or str(value).strip().lower() == "none":
            return None
        return str(value).strip()


def normalize_question(question: str) -> str:
    return " ".join(question.split()).lower()


def cache_key(question: str, site_restriction: Optional[str]) -> Tuple[str, str]:
    return normalize_question(question), site_restriction or ""


def truncate_snippet(text: str, max_chars: int) -> str:
    """Collapse whitespace and cut at the last word boundary within max_chars."""
    text = " ".join(text.split())
    if len(text) <= max_chars:
        return text
    cut = text[:max_chars]
    if text[max_chars] != " " and " " in cut:
        cut = cut.rsplit(" ", 1)[0]
    return cut.rstrip()


def grounded_answer(question: str, text: Optional[str], config: GroundingConfig,
                    provider: Provider, url: str = "") -> Optional[GroundedQA]:
    """GroundedQA for text after truncation, or None when nothing but whitespace is left."""
    answer = truncate_snippet(str(text or ""), config.snippet_max_chars)
    if not answer:
        return None
    return GroundedQA(question=question, answer=answer, source_url=url or "", provider=provider)


def build_query(question: str, site_restriction: Optional[str], mode: str = "prefix") -> str:
    question = " ".join(question.split())
    if not site_restriction:
        return question
    if mode == "site_operator":
        return f"site:{site_restriction} {question}"
    return f"{site_restriction} {question}"


class TokenBucket:
    """Blocking rate limiter shared by concurrent callers."""

    def __init__(self, rate_per_s: float, capacity: int = 1, clock=time.monotonic, sleep=time.sleep):
        self.rate = rate_per_s
        self.capacity = capacity
        self.clock = clock
        self.sleep = sleep
        self.tokens = float(capacity)
        self.updated = clock()
        self._lock = threading.Lock()

    def acquire(self) -> float:
        """Blocks until a token is free; returns the clock reading it was granted at."""
        while True:
            with self._lock:
                now = self.clock()
                self.tokens = min(self.capacity, self.tokens + (now - self.updated) * self.rate)
                self.updated = now
                if self.tokens >= 1:
                    self.tokens -= 1
                    return now
                wait = (1 - self.tokens) / self.rate
            self.sleep(wait)


class WebSearchProvider:
    """Top-1 result from a SerpAPI-style search endpoint."""

    def __init__(
        self,
        api_key: Optional[str],
        api_url: str = DEFAULT_SEARCH_URL,
        session: Optional[requests.Session] = None,
        rate_limiter: Optional[TokenBucket] = None,
        timeout_s: float = 30.0,
    ):
        self.api_key = api_key
        self.api_url = api_url
        self.session = session or requests.Session()
        self.rate_limiter = rate_limiter
        self.timeout_s = timeout_s
        self.call_count = 0
        self._lock = threading.Lock()

    def search(self, question: str, config: GroundingConfig) -> Optional[GroundedQA]:
        if not self.api_key:
            raise ProviderUnavailable("SEARCH_API_KEY environment variable not set")

        query = build_query(question, config.site_restriction, config.restriction_mode)
        if self.rate_limiter is not None:
            self.rate_limiter.acquire()
        with self._lock:
            self.call_count += 1

        try:
            response = self.session.get(
                self.api_url,
                params={"engine": "google", "q": query, "api_key": self.api_key},
                timeout=self.timeout_s,
            )
            response.raise_for_status()
            data = response.json()
        except (requests.RequestException, ValueError) as e:
            raise ProviderUnavailable(f"web search failed: {e}") from e

        answer, url = self._top_result(data, config.prefer_answer_box)
        return grounded_answer(question, answer, config, Provider.WEB_SEARCH, url)

    @staticmethod
    def _top_result(data: dict, prefer_answer_box: bool) -> Tuple[Optional[str], Optional[str]]:
        organic = data.get("organic_results") or []
        first = organic[0] if organic else {}

        if prefer_answer_box:
            box = data.get("answer_box") or {}
            text = box.get("answer") or box.get("snippet") or box.get("result")
            if isinstance(text, list):
                text = " ".join(str(t) for t in text)
            if text and str(text).strip():
                return str(text), box.get("link") or first.get("link")

        if str(first.get("snippet") or "").strip():
            return first["snippet"], first.get("link")
        return None, None


def _read_jsonl(path: Path) -> List[dict]:
    rows = []
    try:
        with open(path, "r", encoding="utf-8") as f:
            for line_no, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    rows.append(json.loads(line))
                except json.JSONDecodeError as e:
                    raise FormatError(f"invalid JSON: {e.msg}", line=line_no, path=str(path)) from e
    except OSError as e:
        raise StorageFailure(f"cannot read {path}: {e}") from e
    return rows


class OfflineCorpusProvider:
    """Exact normalized-question lookup in a {question, answer, url} JSONL file."""

    def __init__(self, entries: Dict[str, Tuple[str, str]]):
        self.entries = entries

    @classmethod
    def load(cls, path: Union[str, Path]) -> "OfflineCorpusProvider":
        entries = {}
        for row in _read_jsonl(Path(path)):
            if not row.get("question") or not str(row.get("answer") or "").strip():
                continue
            entries.setdefault(normalize_question(row["question"]), (row["answer"], row.get("url") or ""))
        log.info("offline_corpus_loaded path=%s entries=%d", path, len(entries))
        return cls(entries)

    def lookup(self, question: str, config: GroundingConfig) -> Optional[GroundedQA]:
        hit = self.entries.get(normalize_question(question))
        if hit is None:
            return None
        answer, url = hit
        return grounded_answer(question, answer, config, Provider.OFFLINE_CORPUS, url)


class GroundingCache:
    """Persistent answer cache keyed by (normalized question, site restriction)."""

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        self._entries: Dict[Tuple[str, str], dict] = {}
        self._lock = threading.Lock()
        if self.path.exists():
            for row in _read_jsonl(self.path):
                key = cache_key(row.get("question", ""), row.get("site_restriction"))
                if key[0] and str(row.get("answer") or "").strip():
                    self._entries.setdefault(key, row)

    def __len__(self) -> int:
        return len(self._entries)

    def get(self, question: str, site_restriction: Optional[str]) -> Optional[GroundedQA]:
        row = self._entries.get(cache_key(question, site_restriction))
        if row is None:
            return None
        return GroundedQA(question=question, answer=row["answer"], source_url=row.get("url") or "", provider=Provider.CACHE)

    def put(self, qa: GroundedQA, site_restriction: Optional[str]) -> bool:
        """Idempotent upsert; returns True when the key was new."""
        key = cache_key(qa.question, site_restriction)
        row = {
            "question": qa.question,
            "answer": qa.answer,
            "url": qa.source_url,
            "site_restriction": site_restriction,
            "cached_at": datetime.now(timezone.utc).isoformat(),
        }
        with self._lock:
            if key in self._entries:
                return False
            try:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with open(self.path, "a", encoding="utf-8") as f:
                    f.write(json.dumps(row, ensure_ascii=False) + "\n")
            except OSError as e:
                raise StorageFailure(f"cannot write cache {self.path}: {e}") from e
            self._entries[key] = row
        return True


SELF_ANSWER_PROMPT = "Answer the following question in one or two sentences.\n\nQuestion: {question}\nAnswer:"


class SelfAnswerProvider:
    """Answers from the model's internal knowledge instead of a search engine."""

    def __init__(self, gateway):
        self.gateway = gateway

    def answer(self, question: str, config: GroundingConfig) -> Optional[GroundedQA]:
        prompt = SELF_ANSWER_PROMPT.format(question=" ".join(question.split()))
        result = self.gateway.complete(self.gateway.request(prompt, stop_sequences=("------", "\nQuestion:")))
        return grounded_answer(question, result.text, config, Provider.SELF_ANSWER)


class KnowledgeGrounder:
    """Consults providers in configured order; first hit wins."""

    def __init__(
        self,
        config: GroundingConfig,
        web: Optional[WebSearchProvider] = None,
        corpus: Optional[OfflineCorpusProvider] = None,
        cache: Optional[GroundingCache] = None,
        self_answer: Optional[SelfAnswerProvider] = None,
    ):
        self.config = config
        self.web = web
        self.corpus = corpus
        self.cache = cache
        self.self_answer = self_answer

    @classmethod
    def from_config(cls, config: GroundingConfig, settings=None, gateway=None,
                    session: Optional[requests.Session] = None) -> "KnowledgeGrounder":
        if settings is None:
            from config.settings import settings as default_settings
            settings = default_settings

        web = corpus = cache = self_answer = None
        if Provider.WEB_SEARCH in config.provider_order:
            web = WebSearchProvider(
                api_key=settings.search_api_key,
                api_url=settings.search_api_url,
                session=session,
                rate_limiter=TokenBucket(config.rate_limit_per_s),
            )
        if Provider.OFFLINE_CORPUS in config.provider_order:
            if config.corpus_path is None:
                raise ConfigError("offline corpus provider requested without a corpus path")
            corpus = OfflineCorpusProvider.load(config.corpus_path)
        if Provider.CACHE in config.provider_order and config.cache_path is not None:
            cache = GroundingCache(config.cache_path)
        if Provider.SELF_ANSWER in config.provider_order:
            if gateway is None:
                raise ConfigError("self-answer provider needs an LLM gateway")
            self_answer = SelfAnswerProvider(gateway)
        return cls(config, web=web, corpus=corpus, cache=cache, self_answer=self_answer)

    def ground_question(self, question: str) -> GroundedQA:
        if not question or not question.strip():
            raise GroundingMiss("empty question")

        site = self.config.site_restriction
        web_failure: Optional[Exception] = None
        for provider in self.config.provider_order:
            hit = None
            if provider == Provider.CACHE and self.cache is not None:
                hit = self.cache.get(question, site)
            elif provider == Provider.OFFLINE_CORPUS and self.corpus is not None:
                hit = self.corpus.lookup(question, self.config)
            elif provider == Provider.WEB_SEARCH and self.web is not None:
                try:
                    hit = self.web.search(question, self.config)
                except ProviderUnavailable as e:
                    log.warning("web_search_unavailable question=%r error=%s", question, e)
                    web_failure = e
            elif provider == Provider.SELF_ANSWER and self.self_answer is not None:
                hit = self.self_answer.answer(question, self.config)

            if hit is not None:
                if self.cache is not None and provider in (Provider.WEB_SEARCH, Provider.OFFLINE_CORPUS):
                    self.cache.put(hit, site)
                return hit

        if web_failure is not None:
            raise ProviderUnavailable(f"no answer for {question!r}: {web_failure}") from web_failure
        log.info("grounding_miss question=%r", question)
        raise GroundingMiss(f"no provider answered {question!r}")

    def ground_all(self, questions: Iterable[str]) -> List[GroundedQA]:
        return [self.ground_question(q) for q in questions]


def warm_cache(qa_list: Iterable[GroundedQA], cache_path: Union[str, Path],
               site_restriction: Optional[str] = DEFAULT_SITE) -> int:
    """Upsert answers into the cache file; returns the number of new keys."""
    cache = GroundingCache(cache_path)
    written = sum(1 for qa in qa_list if cache.put(qa, site_restriction))
    log.info("cache_warmed path=%s new=%d total=%d", cache_path, written, len(cache))
    return written
