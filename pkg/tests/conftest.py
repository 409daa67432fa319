"""
Shared test fixtures: scripted responders, a deny-all network guard and the worked-example artifacts.
"""

import json
import re
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional

import pytest
import yaml

ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(ROOT))

from config.settings import Settings  # noqa: E402
from utils.llm_gateway import CompletionRequest, LLMGateway, ScriptedBackend  # noqa: E402
from utils.prompts import Phase, Strategy, load_template  # noqa: E402

FIXTURES_DIR = ROOT / "fixtures"
GOLDEN_DIR = Path(__file__).resolve().parent / "golden"
TABLE1_SCRIPT = FIXTURES_DIR / "table1_script.yaml"
TABLE1_CORPUS = FIXTURES_DIR / "table1_corpus.jsonl"
TABLE1_TRACE = FIXTURES_DIR / "table1.ndjson"
TABLE1_CLAIM = (
    "Lubabalo Kondlo won a silver medal in the 2012 SportAccord World Mind Games "
    "inaugurated in July 2011 in Beijing."
)

SYNTHETIC = re.compile(r"synthetic claim (\d+)")


@pytest.fixture
def test_settings() -> Settings:
    return Settings(
        llm_api_key=None,
        search_api_key=None,
        llm_api_url=None,
        llm_model_id="text-davinci-003",
        llm_max_tokens=512,
        llm_temperature=0.0,
    )


@pytest.fixture
def table1_script() -> dict:
    with open(TABLE1_SCRIPT, "r", encoding="utf-8") as f:
        return yaml.safe_load(f)


class NetworkGuard:
    def __init__(self):
        self.attempts: List[str] = []


@pytest.fixture
def deny_network(monkeypatch) -> NetworkGuard:
    """Any HTTP request through requests or httpx fails the test."""
    import httpx
    import requests

    guard = NetworkGuard()

    def refuse(self, request, *args, **kwargs):
        guard.attempts.append(str(getattr(request, "url", request)))
        raise RuntimeError(f"network access attempted: {getattr(request, 'url', request)}")

    monkeypatch.setattr(requests.Session, "send", refuse)
    monkeypatch.setattr(httpx.Client, "send", refuse)
    return guard


class StubResponse:
    def __init__(self, payload: dict, status_code: int = 200):
        self.payload = payload
        self.status_code = status_code

    def json(self):
        return self.payload

    def raise_for_status(self):
        import requests

        if self.status_code >= 400:
            raise requests.HTTPError(f"http {self.status_code}")


class StubSession:
    """Stands in for requests.Session; records every GET/POST."""

    def __init__(self, payload: Optional[dict] = None, status_code: int = 200, error: Optional[Exception] = None):
        self.payload = payload or {}
        self.status_code = status_code
        self.error = error
        self.calls: List[Dict] = []

    def get(self, url, params=None, timeout=None, **kwargs):
        self.calls.append({"method": "GET", "url": url, "params": dict(params or {}), "timeout": timeout})
        if self.error is not None:
            raise self.error
        return StubResponse(self.payload, self.status_code)

    def post(self, url, json=None, headers=None, timeout=None, **kwargs):
        self.calls.append({"method": "POST", "url": url, "json": json, "headers": headers, "timeout": timeout})
        if self.error is not None:
            raise self.error
        return StubResponse(self.payload, self.status_code)


def synthetic_claim_number(prompt: str) -> int:
    return int(SYNTHETIC.findall(prompt)[-1])


def synthetic_claim_text(n: int) -> str:
    return f"The synthetic claim {n} says item {n} has property P{n}."


def synthetic_question(n: int) -> str:
    return f"Does item {n} have property P{n}?"


def synthetic_answer(n: int) -> str:
    return f"Item {n} {'has' if n % 2 == 0 else 'lacks'} property P{n}."


def folk_responder(request: CompletionRequest) -> str:
    """Deterministic FOLK completions for synthetic claims; even numbers are SUPPORTED."""
    n = synthetic_claim_number(request.prompt)
    if request.prompt.startswith(load_template(Strategy.FOLK, Phase.DECOMPOSE).preamble):
        return (
            "Predicates:\n"
            f"Has(item {n}, property P{n}) ::: Verify item {n} has property P{n}.\n\n"
            f"Followup Question: {synthetic_question(n)}\n"
        )
    value, label = ("True", "SUPPORTED") if n % 2 == 0 else ("False", "NOT_SUPPORTED")
    return (
        "Prediction:\n"
        f"Has(item {n}, property P{n}) is {value} because {synthetic_answer(n)}\n"
        f"Has(item {n}, property P{n}) is {value}.\n"
        f"The claim is [{label}].\n\n"
        "Explanation:\n"
        f"{synthetic_answer(n)}\n"
    )


def write_synthetic_corpus(path: Path, numbers) -> Path:
    with open(path, "w", encoding="utf-8") as f:
        for n in numbers:
            row = {"question": synthetic_question(n), "answer": synthetic_answer(n), "url": f"https://en.wikipedia.org/wiki/Item_{n}"}
            f.write(json.dumps(row) + "\n")
    return path


def scripted_gateway(queue=(), responder: Optional[Callable[[CompletionRequest], str]] = None) -> LLMGateway:
    return LLMGateway(ScriptedBackend(queue=queue, responder=responder))
