"""
Knowledge grounding tests: provider order, query restriction, snippet truncation and the persistent cache.
"""

import json
import threading
from concurrent.futures import ThreadPoolExecutor

import pytest
import requests

from conftest import TABLE1_CORPUS, StubSession, scripted_gateway
from utils.errors import ConfigError, GroundingMiss, ProviderUnavailable
from utils.search import (
    GroundedQA,
    GroundingCache,
    GroundingConfig,
    KnowledgeGrounder,
    OfflineCorpusProvider,
    Provider,
    TokenBucket,
    WebSearchProvider,
    build_query,
    cache_key,
    truncate_snippet,
    warm_cache,
)

QUESTION = "When and where was the 2012 SportAccord World Mind Games inaugurated?"

SEARCH_PAYLOAD = {
    "organic_results": [
        {"link": "https://en.wikipedia.org/wiki/SportAccord_World_Mind_Games",
         "snippet": "The International Mind Sports Association (IMSA) inaugurated the SportAccord World Mind Games December 2011 in Beijing."},
        {"link": "https://example.org/other", "snippet": "second result"},
    ]
}


def web_grounder(session, **config):
    config.setdefault("provider_order", "websearch")
    grounding = GroundingConfig(**config)
    return KnowledgeGrounder(grounding, web=WebSearchProvider(api_key="key", session=session))


class TestQueries:
    def test_default_restriction_prefixes_the_site(self):
        assert build_query(QUESTION, "en.wikipedia.org") == f"en.wikipedia.org {QUESTION}"

    def test_site_operator_mode(self):
        assert build_query(QUESTION, "en.wikipedia.org", "site_operator") == f"site:en.wikipedia.org {QUESTION}"

    def test_no_restriction(self):
        assert build_query("  spaced   question ", None) == "spaced question"

    @pytest.mark.parametrize("value", ["", "none", "None", None])
    def test_blank_restriction_means_open_web(self, value):
        assert GroundingConfig(site_restriction=value).site_restriction is None

    def test_provider_order_from_text(self):
        config = GroundingConfig(provider_order="cache, corpus,web")
        assert config.provider_order == (Provider.CACHE, Provider.OFFLINE_CORPUS, Provider.WEB_SEARCH)

    def test_unknown_provider(self):
        with pytest.raises(ConfigError):
            GroundingConfig(provider_order="bing")


class TestSnippets:
    def test_short_text_is_kept(self):
        assert truncate_snippet("a  short\nanswer", 64) == "a short answer"

    def test_cut_at_word_boundary(self):
        text = "word " * 40
        cut = truncate_snippet(text, 64)
        assert len(cut) <= 64
        assert cut.endswith("word")

    def test_cache_key_normalizes_case_and_whitespace(self):
        assert cache_key("  Where IS   Monticello? ", "en.wikipedia.org") == cache_key("where is monticello?", "en.wikipedia.org")
        assert cache_key("q", None) != cache_key("q", "en.wikipedia.org")


class TestWebSearch:
    def test_top_organic_result(self):
        session = StubSession(payload=SEARCH_PAYLOAD)
        qa = web_grounder(session).ground_question(QUESTION)
        assert qa.provider == Provider.WEB_SEARCH
        assert qa.source_url == "https://en.wikipedia.org/wiki/SportAccord_World_Mind_Games"
        assert qa.answer.startswith("The International Mind Sports Association")
        params = session.calls[0]["params"]
        assert params["q"] == f"en.wikipedia.org {QUESTION}"
        assert params["engine"] == "google"

    def test_open_web_query_has_no_site(self):
        session = StubSession(payload=SEARCH_PAYLOAD)
        web_grounder(session, site_restriction=None).ground_question(QUESTION)
        assert session.calls[0]["params"]["q"] == QUESTION

    def test_answer_box_is_preferred(self):
        payload = dict(SEARCH_PAYLOAD, answer_box={"answer": "December 2011, Beijing"})
        qa = web_grounder(StubSession(payload=payload)).ground_question(QUESTION)
        assert qa.answer == "December 2011, Beijing"
        assert qa.source_url == SEARCH_PAYLOAD["organic_results"][0]["link"]

    def test_answer_box_can_be_ignored(self):
        payload = dict(SEARCH_PAYLOAD, answer_box={"answer": "December 2011, Beijing"})
        qa = web_grounder(StubSession(payload=payload), prefer_answer_box=False).ground_question(QUESTION)
        assert qa.answer.startswith("The International")

    def test_snippet_is_truncated(self):
        payload = {"organic_results": [{"link": "u", "snippet": "long " * 200}]}
        qa = web_grounder(StubSession(payload=payload), snippet_max_chars=64).ground_question(QUESTION)
        assert len(qa.answer) <= 64

    def test_empty_results_are_a_miss(self):
        with pytest.raises(GroundingMiss):
            web_grounder(StubSession(payload={"organic_results": []})).ground_question(QUESTION)

    def test_blank_snippet_is_a_miss(self):
        payload = {"organic_results": [{"link": "u", "snippet": " \n "}]}
        with pytest.raises(GroundingMiss):
            web_grounder(StubSession(payload=payload)).ground_question(QUESTION)

    def test_blank_answer_box_falls_back_to_organic(self):
        payload = dict(SEARCH_PAYLOAD, answer_box={"answer": "   "})
        qa = web_grounder(StubSession(payload=payload)).ground_question(QUESTION)
        assert qa.answer.startswith("The International")

    def test_failing_search_is_provider_unavailable(self):
        session = StubSession(error=requests.ConnectionError("down"))
        with pytest.raises(ProviderUnavailable):
            web_grounder(session).ground_question(QUESTION)

    def test_missing_key(self):
        grounder = KnowledgeGrounder(GroundingConfig(provider_order="websearch"),
                                     web=WebSearchProvider(api_key=None, session=StubSession()))
        with pytest.raises(ProviderUnavailable):
            grounder.ground_question(QUESTION)


class TestOfflineAndCache:
    def test_offline_corpus_lookup(self, deny_network):
        corpus = OfflineCorpusProvider.load(TABLE1_CORPUS)
        grounder = KnowledgeGrounder(GroundingConfig(provider_order="corpus"), corpus=corpus)
        qa = grounder.ground_question("  when and where was the 2012 SportAccord World Mind Games   inaugurated? ")
        assert qa.provider == Provider.OFFLINE_CORPUS
        assert qa.source_url == "https://en.wikipedia.org/wiki/SportAccord_World_Mind_Games"
        assert deny_network.attempts == []

    def test_corpus_miss(self):
        grounder = KnowledgeGrounder(GroundingConfig(provider_order="corpus"), corpus=OfflineCorpusProvider.load(TABLE1_CORPUS))
        with pytest.raises(GroundingMiss):
            grounder.ground_question("Who founded IMSA?")

    def test_corpus_provider_needs_a_path(self):
        with pytest.raises(ConfigError):
            KnowledgeGrounder.from_config(GroundingConfig(provider_order="corpus"))

    def test_blank_corpus_answer_falls_through(self, tmp_path):
        path = tmp_path / "corpus.jsonl"
        path.write_text(json.dumps({"question": QUESTION, "answer": "   ", "url": "u"}) + "\n", encoding="utf-8")
        corpus = OfflineCorpusProvider.load(path)
        with pytest.raises(GroundingMiss):
            KnowledgeGrounder(GroundingConfig(provider_order="corpus"), corpus=corpus).ground_question(QUESTION)

        grounder = KnowledgeGrounder(GroundingConfig(provider_order="corpus,websearch"), corpus=corpus,
                                     web=WebSearchProvider(api_key="key", session=StubSession(payload=SEARCH_PAYLOAD)))
        assert grounder.ground_question(QUESTION).provider == Provider.WEB_SEARCH

    def test_blank_cached_answer_is_ignored(self, tmp_path):
        path = tmp_path / "cache.jsonl"
        row = {"question": QUESTION, "answer": " \n ", "url": "", "site_restriction": "en.wikipedia.org"}
        path.write_text(json.dumps(row) + "\n", encoding="utf-8")
        cache = GroundingCache(path)
        assert len(cache) == 0
        assert cache.get(QUESTION, "en.wikipedia.org") is None

    def test_cache_is_transparent(self, tmp_path):
        cache_path = tmp_path / "cache.jsonl"
        session = StubSession(payload=SEARCH_PAYLOAD)
        first = KnowledgeGrounder(
            GroundingConfig(provider_order="cache,websearch"),
            web=WebSearchProvider(api_key="key", session=session),
            cache=GroundingCache(cache_path),
        )
        fresh = first.ground_question(QUESTION)

        offline = StubSession(error=requests.ConnectionError("down"))
        second = KnowledgeGrounder(
            GroundingConfig(provider_order="cache,websearch"),
            web=WebSearchProvider(api_key="key", session=offline),
            cache=GroundingCache(cache_path),
        )
        cached = second.ground_question(QUESTION.upper())

        assert (cached.answer, cached.source_url) == (fresh.answer, fresh.source_url)
        assert cached.provider == Provider.CACHE
        assert len(session.calls) == 1
        assert offline.calls == []

    def test_cache_is_keyed_by_site(self, tmp_path):
        cache = GroundingCache(tmp_path / "cache.jsonl")
        cache.put(GroundedQA(question="q?", answer="a", provider=Provider.WEB_SEARCH), "en.wikipedia.org")
        assert cache.get("q?", "en.wikipedia.org") is not None
        assert cache.get("q?", None) is None

    def test_warm_cache_counts_new_keys(self, tmp_path, deny_network):
        path = tmp_path / "cache.jsonl"
        one = GroundedQA(question="Where is Monticello?", answer="Virginia", provider=Provider.OFFLINE_CORPUS)
        assert warm_cache([one], path) == 1
        assert warm_cache([one], path) == 0
        assert warm_cache([one.model_copy(update={"question": "  where is MONTICELLO? "})], path) == 0
        more = [GroundedQA(question=f"Question {i}?", answer=f"Answer {i}", provider=Provider.OFFLINE_CORPUS) for i in range(5)]
        assert warm_cache(more, path) == 5
        assert len(GroundingCache(path)) == 6
        assert deny_network.attempts == []


class TestSelfAnswer:
    def test_model_answers_the_question(self):
        gateway = scripted_gateway(queue=[" It was inaugurated in December 2011 in Beijing.\n"])
        grounder = KnowledgeGrounder.from_config(GroundingConfig(provider_order="self"), gateway=gateway)
        qa = grounder.ground_question(QUESTION)
        assert qa.provider == Provider.SELF_ANSWER
        assert qa.answer == "It was inaugurated in December 2011 in Beijing."
        assert qa.source_url == ""
        assert QUESTION in gateway.backend.requests[0].prompt

    def test_self_answer_needs_gateway(self):
        with pytest.raises(ConfigError):
            KnowledgeGrounder.from_config(GroundingConfig(provider_order="self"))


class FakeClock:
    """Monotonic clock that only moves when a caller sleeps."""

    def __init__(self):
        self.now = 0.0
        self._lock = threading.Lock()

    def __call__(self) -> float:
        with self._lock:
            return self.now

    def sleep(self, seconds: float):
        with self._lock:
            self.now += seconds


class RecordingBucket(TokenBucket):
    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.grants = []

    def acquire(self) -> float:
        granted = super().acquire()
        self.grants.append(granted)
        return granted


class TestConcurrency:
    def test_default_rate_limit(self, test_settings):
        grounder = KnowledgeGrounder.from_config(GroundingConfig(provider_order="websearch"), test_settings)
        assert grounder.web.rate_limiter.rate == 2.0

    def test_sequential_acquisitions_are_spaced(self):
        clock = FakeClock()
        bucket = TokenBucket(2.0, clock=clock, sleep=clock.sleep)
        grants = [bucket.acquire() for _ in range(5)]
        assert grants[0] == 0.0
        assert grants[-1] == pytest.approx(2.0)
        assert all(b - a >= 0.5 - 1e-9 for a, b in zip(grants, grants[1:]))

    def test_concurrent_searches_respect_the_rate(self):
        clock = FakeClock()
        bucket = RecordingBucket(2.0, clock=clock, sleep=clock.sleep)
        session = StubSession(payload=SEARCH_PAYLOAD)
        web = WebSearchProvider(api_key="key", session=session, rate_limiter=bucket)
        grounder = KnowledgeGrounder(GroundingConfig(provider_order="websearch", rate_limit_per_s=2), web=web)

        questions = [f"Question number {i}?" for i in range(12)]
        with ThreadPoolExecutor(max_workers=6) as pool:
            answers = list(pool.map(grounder.ground_question, questions))

        assert len(answers) == 12
        assert len(session.calls) == web.call_count == 12
        grants = sorted(bucket.grants)
        assert len(grants) == 12
        assert all(b - a >= 0.5 - 1e-9 for a, b in zip(grants, grants[1:]))

    def test_concurrent_identical_questions_leave_one_cache_entry(self, tmp_path):
        path = tmp_path / "cache.jsonl"
        grounder = KnowledgeGrounder(
            GroundingConfig(provider_order="cache,websearch"),
            web=WebSearchProvider(api_key="key", session=StubSession(payload=SEARCH_PAYLOAD)),
            cache=GroundingCache(path),
        )
        with ThreadPoolExecutor(max_workers=8) as pool:
            answers = list(pool.map(grounder.ground_question, [QUESTION] * 32))

        assert {qa.answer for qa in answers} == {answers[0].answer}
        lines = path.read_text(encoding="utf-8").splitlines()
        assert len(lines) == 1
        assert json.loads(lines[0])["question"] == QUESTION
        assert len(GroundingCache(path)) == 1
