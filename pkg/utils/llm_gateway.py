"""
LLM Gateway
Uniform text-completion interface over a live endpoint, a record/replay trace store and a scripted stub.
"""

import hashlib
import json
import logging
import threading
import time
from collections import deque
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Deque, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import requests
import yaml
from pydantic import BaseModel, ConfigDict, Field, NonNegativeFloat, NonNegativeInt, PositiveInt
from tenacity import (
    RetryError,
    Retrying,
    retry_if_exception_type,
    stop_after_attempt,
    stop_before_delay,
    wait_exponential,
)

from utils.errors import BackendUnavailable, ConfigError, FormatError, ReplayMiss, StorageFailure
from utils.prompts import EXAMPLE_SEPARATOR

log = logging.getLogger(__name__)

DEFAULT_MODEL_ID = "text-davinci-003"
DEFAULT_STOPS: Tuple[str, ...] = (EXAMPLE_SEPARATOR,)
BUILTIN_WIRE_MAPPING = "openai"


class Backend(str, Enum):
    LIVE = "Live"
    REPLAY = "Replay"
    SCRIPTED = "Scripted"

    @classmethod
    def from_flag(cls, value: Union[str, "Backend"]) -> "Backend":
        if isinstance(value, Backend):
            return value
        lookup = {b.value.lower(): b for b in cls}
        try:
            return lookup[value.strip().lower()]
        except KeyError:
            raise ConfigError(f"unknown backend {value!r}; expected one of {sorted(lookup)}") from None


def request_tag(model_id: str, prompt: str, stop_sequences: Iterable[str]) -> str:
    """SHA-256 over model, prompt and stops; max_tokens and temperature are not part of the tag."""
    payload = "\x00".join([model_id, prompt, "\x1f".join(stop_sequences)])
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class TokenUsage(BaseModel):
    prompt_tokens: NonNegativeInt = 0
    completion_tokens: NonNegativeInt = 0


class CompletionRequest(BaseModel):
    model_config = ConfigDict(frozen=True)

    prompt: str
    max_tokens: PositiveInt = 512
    temperature: NonNegativeFloat = 0.0
    stop_sequences: Tuple[str, ...] = DEFAULT_STOPS
    model_id: str = DEFAULT_MODEL_ID

    @property
    def request_tag(self) -> str:
        return request_tag(self.model_id, self.prompt, self.stop_sequences)


class CompletionResult(BaseModel):
    text: str
    backend: Backend
    latency_ms: NonNegativeInt = 0
    token_usage: Optional[TokenUsage] = None


class TraceRecord(BaseModel):
    """One line of a recording / replay trace file."""

    tag: str
    model_id: str
    prompt: str
    stops: List[str]
    completion: str
    recorded_at: str
    token_usage: Optional[TokenUsage] = None
    max_tokens: Optional[int] = None


class TransientBackendError(Exception):
    """Network hiccup or 5xx/429; retried."""


class LiveBackend:
    """HTTPS completion endpoint.

    With the built-in "openai" wire mapping the request goes through the openai SDK
    (completions API); any other mapping names a YAML file describing the JSON field
    names and is posted with requests.
    """

    kind = Backend.LIVE

    def __init__(
        self,
        api_url: Optional[str],
        api_key: Optional[str],
        wire_mapping: str = BUILTIN_WIRE_MAPPING,
        max_retries: int = 3,
        timeout_s: float = 60.0,
        session: Optional[requests.Session] = None,
    ):
        self.api_url = api_url
        self.api_key = api_key
        self.max_retries = max_retries
        self.timeout_s = timeout_s
        self.session = session
        self.mapping: Optional[Dict[str, Dict[str, str]]] = None
        self.client = None

        if wire_mapping == BUILTIN_WIRE_MAPPING:
            self._initialize_client()
        else:
            self.mapping = load_wire_mapping(wire_mapping)
            if not api_url:
                raise ConfigError("LLM_API_URL must be set for a custom wire mapping")
            self.session = session or requests.Session()

    def _initialize_client(self):
        from openai import OpenAI

        if not self.api_key:
            raise BackendUnavailable("LLM_API_KEY environment variable not set")
        # retries are owned by tenacity below
        self.client = OpenAI(api_key=self.api_key, base_url=self.api_url or None, max_retries=0, timeout=self.timeout_s)
        log.info("live_backend_ready wire=openai base_url=%s", self.api_url or "default")

    def complete(self, request: CompletionRequest, deadline: Optional[float] = None) -> CompletionResult:
        """deadline is a time.perf_counter() value; retries and call timeouts never run past it."""
        started = time.perf_counter()
        stop = stop_after_attempt(self.max_retries + 1)
        if deadline is not None:
            stop = stop | stop_before_delay(max(deadline - started, 0.0))
        try:
            for attempt in Retrying(
                stop=stop,
                wait=wait_exponential(multiplier=0.5, max=8),
                retry=retry_if_exception_type(TransientBackendError),
                reraise=True,
            ):
                with attempt:
                    if attempt.retry_state.attempt_number > 1:
                        log.warning("live_retry attempt=%d tag=%s", attempt.retry_state.attempt_number, request.request_tag[:12])
                    text, usage = self._call(request, self._attempt_timeout(deadline))
        except (TransientBackendError, RetryError) as e:
            raise BackendUnavailable(f"completion endpoint failed after {self.max_retries} retries: {e}") from e

        latency_ms = int((time.perf_counter() - started) * 1000)
        return CompletionResult(text=text, backend=Backend.LIVE, latency_ms=latency_ms, token_usage=usage)

    def _attempt_timeout(self, deadline: Optional[float]) -> float:
        if deadline is None:
            return self.timeout_s
        remaining = deadline - time.perf_counter()
        if remaining <= 0:
            raise BackendUnavailable("claim deadline passed before the completion call")
        return min(self.timeout_s, remaining)

    def _call(self, request: CompletionRequest, timeout_s: float) -> Tuple[str, Optional[TokenUsage]]:
        if self.client is not None:
            return self._call_openai(request, timeout_s)
        return self._call_mapped(request, timeout_s)

    def _call_openai(self, request: CompletionRequest, timeout_s: float) -> Tuple[str, Optional[TokenUsage]]:
        import openai

        try:
            response = self.client.completions.create(
                model=request.model_id,
                prompt=request.prompt,
                max_tokens=request.max_tokens,
                temperature=request.temperature,
                stop=list(request.stop_sequences) or None,
                timeout=timeout_s,
            )
        except (openai.APIConnectionError, openai.RateLimitError, openai.InternalServerError) as e:
            raise TransientBackendError(str(e)) from e
        except openai.OpenAIError as e:
            raise BackendUnavailable(f"completion request rejected: {e}") from e

        usage = None
        if response.usage is not None:
            usage = TokenUsage(prompt_tokens=response.usage.prompt_tokens,
                               completion_tokens=response.usage.completion_tokens)
        return response.choices[0].text, usage

    def _call_mapped(self, request: CompletionRequest, timeout_s: float) -> Tuple[str, Optional[TokenUsage]]:
        fields = self.mapping["request"]
        body = {
            fields["model"]: request.model_id,
            fields["prompt"]: request.prompt,
            fields["max_tokens"]: request.max_tokens,
            fields["temperature"]: request.temperature,
            fields["stop"]: list(request.stop_sequences),
        }
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"

        try:
            response = self.session.post(self.api_url, json=body, headers=headers, timeout=timeout_s)
        except requests.RequestException as e:
            raise TransientBackendError(str(e)) from e
        if response.status_code == 429 or response.status_code >= 500:
            raise TransientBackendError(f"http {response.status_code}")
        if response.status_code >= 400:
            raise BackendUnavailable(f"completion request rejected: http {response.status_code}")

        try:
            data = response.json()
            paths = self.mapping["response"]
            text = _dig(data, paths["text"])
            usage = None
            if "prompt_tokens" in paths and _dig(data, paths["prompt_tokens"], None) is not None:
                usage = TokenUsage(
                    prompt_tokens=_dig(data, paths["prompt_tokens"], 0),
                    completion_tokens=_dig(data, paths.get("completion_tokens", ""), 0),
                )
        except (ValueError, KeyError, IndexError, TypeError) as e:
            raise BackendUnavailable(f"unexpected completion response: {e}") from e
        if not isinstance(text, str):
            raise BackendUnavailable("completion response text is not a string")
        return text, usage


_MISSING = object()


def _dig(data: Any, dotted: str, default: Any = _MISSING) -> Any:
    """Follow a dotted path such as  choices.0.text  through dicts and lists."""
    current = data
    try:
        for part in dotted.split("."):
            current = current[int(part)] if isinstance(current, list) else current[part]
    except (KeyError, IndexError, ValueError, TypeError):
        if default is _MISSING:
            raise KeyError(dotted)
        return default
    return current


def load_wire_mapping(path: Union[str, Path]) -> Dict[str, Dict[str, str]]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            mapping = yaml.safe_load(f) or {}
    except (OSError, yaml.YAMLError) as e:
        raise ConfigError(f"cannot read wire mapping {path}: {e}") from e
    missing = [k for k in ("model", "prompt", "max_tokens", "temperature", "stop") if k not in mapping.get("request", {})]
    if missing or "text" not in mapping.get("response", {}):
        raise ConfigError(f"wire mapping {path} lacks fields {missing or ['response.text']}")
    return mapping


class TraceStore:
    """Read-only tag -> record index over one or more trace files."""

    def __init__(self, records: Iterable[TraceRecord] = ()):
        self._records: Dict[str, TraceRecord] = {}
        for record in records:
            # first recording of a tag wins
            self._records.setdefault(record.tag, record)

    @classmethod
    def load(cls, *paths: Union[str, Path]) -> "TraceStore":
        records: List[TraceRecord] = []
        for path in paths:
            try:
                with open(path, "r", encoding="utf-8") as f:
                    for line_no, line in enumerate(f, start=1):
                        if not line.strip():
                            continue
                        try:
                            records.append(TraceRecord.model_validate_json(line))
                        except ValueError as e:
                            raise FormatError(f"bad trace record: {e}", line=line_no, path=str(path)) from e
            except OSError as e:
                raise StorageFailure(f"cannot read trace file {path}: {e}") from e
        store = cls(records)
        log.info("trace_store_loaded files=%d tags=%d", len(paths), len(store))
        return store

    def get(self, tag: str) -> Optional[TraceRecord]:
        return self._records.get(tag)

    def __contains__(self, tag: str) -> bool:
        return tag in self._records

    def __len__(self) -> int:
        return len(self._records)


class ReplayBackend:
    kind = Backend.REPLAY

    def __init__(self, store: TraceStore):
        self.store = store

    def complete(self, request: CompletionRequest, deadline: Optional[float] = None) -> CompletionResult:
        tag = request.request_tag
        record = self.store.get(tag)
        if record is None:
            raise ReplayMiss(tag)
        return CompletionResult(text=record.completion, backend=Backend.REPLAY, latency_ms=0,
                                token_usage=record.token_usage)


Responder = Callable[[CompletionRequest], str]


class ScriptedBackend:
    """Answers from a queue of canned completions or a responder callable."""

    kind = Backend.SCRIPTED

    def __init__(self, queue: Sequence[str] = (), responder: Optional[Responder] = None):
        self._queue: Deque[str] = deque(queue)
        self._responder = responder
        self._lock = threading.Lock()
        self.requests: List[CompletionRequest] = []

    def complete(self, request: CompletionRequest, deadline: Optional[float] = None) -> CompletionResult:
        with self._lock:
            self.requests.append(request)
            if self._queue:
                text = self._queue.popleft()
            elif self._responder is not None:
                text = self._responder(request)
            else:
                raise BackendUnavailable("scripted backend has no completion left")
        return CompletionResult(text=text, backend=Backend.SCRIPTED, latency_ms=0)


class RecordingSink:
    """Append-only NDJSON trace writer; appends are serialized."""

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        self._lock = threading.Lock()
        self.count = 0
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._handle = open(self.path, "w", encoding="utf-8")
        except OSError as e:
            raise StorageFailure(f"cannot open recording {self.path}: {e}") from e

    def append(self, request: CompletionRequest, result: CompletionResult):
        record = TraceRecord(
            tag=request.request_tag,
            model_id=request.model_id,
            prompt=request.prompt,
            stops=list(request.stop_sequences),
            completion=result.text,
            recorded_at=datetime.now(timezone.utc).isoformat(),
            token_usage=result.token_usage,
            max_tokens=request.max_tokens,
        )
        line = json.dumps(record.model_dump(mode="json"), ensure_ascii=False, sort_keys=True)
        with self._lock:
            try:
                self._handle.write(line + "\n")
                self._handle.flush()
            except (OSError, ValueError) as e:
                raise StorageFailure(f"cannot append to recording {self.path}: {e}") from e
            self.count += 1

    def close(self) -> Path:
        with self._lock:
            try:
                self._handle.close()
            except OSError as e:
                raise StorageFailure(f"cannot close recording {self.path}: {e}") from e
        return self.path


class LLMGateway:
    """Front door for every completion call; holds request defaults and call counters."""

    def __init__(
        self,
        backend,
        model_id: str = DEFAULT_MODEL_ID,
        max_tokens: int = 512,
        temperature: float = 0.0,
        stop_sequences: Sequence[str] = DEFAULT_STOPS,
    ):
        self.backend = backend
        self.model_id = model_id
        self.max_tokens = max_tokens
        self.temperature = temperature
        self.stop_sequences = tuple(stop_sequences)
        self._recorder: Optional[RecordingSink] = None
        self._lock = threading.Lock()
        self.call_count = 0
        self.live_call_count = 0

    @property
    def kind(self) -> Backend:
        return self.backend.kind

    def request(self, prompt: str, **overrides) -> CompletionRequest:
        params = dict(
            prompt=prompt,
            model_id=self.model_id,
            max_tokens=self.max_tokens,
            temperature=self.temperature,
            stop_sequences=self.stop_sequences,
        )
        params.update(overrides)
        return CompletionRequest(**params)

    def complete(self, request: Union[CompletionRequest, str], deadline: Optional[float] = None) -> CompletionResult:
        if isinstance(request, str):
            request = self.request(request)

        result = self.backend.complete(request, deadline=deadline)
        with self._lock:
            self.call_count += 1
            if result.backend == Backend.LIVE:
                self.live_call_count += 1
            recorder = self._recorder
        if recorder is not None:
            recorder.append(request, result)
        log.debug("completion backend=%s tag=%s latency_ms=%d", result.backend.value, request.request_tag[:12], result.latency_ms)
        return result

    def record_session(self, name: str, directory: Union[str, Path] = "traces") -> Path:
        if self.kind == Backend.REPLAY:
            raise ConfigError("recording needs a live (or scripted) backend, not replay")
        if self._recorder is not None:
            raise ConfigError(f"recording session already open at {self._recorder.path}")
        path = Path(directory) / f"{name}.ndjson"
        self._recorder = RecordingSink(path)
        log.info("recording_started path=%s", path)
        return path

    def finalize_session(self) -> Optional[Path]:
        """Close the open recording; the returned file loads as a TraceStore."""
        recorder, self._recorder = self._recorder, None
        if recorder is None:
            return None
        path = recorder.close()
        log.info("recording_finalized path=%s entries=%d", path, recorder.count)
        return path


def create_gateway(
    backend: Union[str, Backend],
    settings=None,
    trace_paths: Sequence[Union[str, Path]] = (),
    scripted: Optional[ScriptedBackend] = None,
) -> LLMGateway:
    """Build a gateway from service settings (config.settings.Settings)."""
    if settings is None:
        from config.settings import settings as default_settings
        settings = default_settings

    kind = Backend.from_flag(backend)
    if kind == Backend.LIVE:
        impl = LiveBackend(
            api_url=settings.llm_api_url,
            api_key=settings.llm_api_key,
            wire_mapping=settings.llm_wire_mapping,
            max_retries=settings.llm_max_retries,
            timeout_s=settings.llm_timeout_s,
        )
    elif kind == Backend.REPLAY:
        if not trace_paths:
            raise ConfigError("replay backend needs at least one trace file")
        impl = ReplayBackend(TraceStore.load(*trace_paths))
    else:
        impl = scripted or ScriptedBackend()

    return LLMGateway(
        impl,
        model_id=settings.llm_model_id,
        max_tokens=settings.llm_max_tokens,
        temperature=settings.llm_temperature,
    )
