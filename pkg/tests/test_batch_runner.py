"""
Batch runner tests: replay determinism across runs and worker counts, error isolation and trace files.
"""

import json

import pytest

from conftest import (
    folk_responder,
    scripted_gateway,
    synthetic_claim_number,
    synthetic_claim_text,
    synthetic_question,
    write_synthetic_corpus,
)
from batch_runner import (
    RunManifest,
    file_digest,
    fixture_digests,
    load_traces,
    normalize_trace_record,
    normalized_dump,
    run_batch,
    write_traces,
)
from claim_verifier import Claim, ClaimVerifier, GoldLabel
from utils.errors import ConfigError, FormatError
from utils.llm_gateway import LLMGateway, ReplayBackend, TraceStore
from utils.prompts import Label, Strategy
from utils.search import GroundingConfig, KnowledgeGrounder, OfflineCorpusProvider


def synthetic_claims(count: int):
    return [
        Claim(id=f"c{n:02d}", text=synthetic_claim_text(n),
              gold_label=GoldLabel.SUPPORTED if n % 2 == 0 else GoldLabel.NOT_SUPPORTED)
        for n in range(count)
    ]


def corpus_grounder(corpus_path) -> KnowledgeGrounder:
    return KnowledgeGrounder(GroundingConfig(provider_order="corpus"), corpus=OfflineCorpusProvider.load(corpus_path))


@pytest.fixture
def recorded(tmp_path):
    """Records a scripted FOLK run over 20 synthetic claims; returns (claims, corpus, trace file)."""
    claims = synthetic_claims(20)
    corpus = write_synthetic_corpus(tmp_path / "corpus.jsonl", range(20))
    gateway = scripted_gateway(responder=folk_responder)
    gateway.record_session("synthetic", directory=tmp_path)
    run_batch(claims, Strategy.FOLK, ClaimVerifier(gateway, corpus_grounder(corpus)))
    return claims, corpus, gateway.finalize_session()


def replay_run(claims, corpus, store_path, parallelism=1):
    gateway = LLMGateway(ReplayBackend(TraceStore.load(store_path)))
    verifier = ClaimVerifier(gateway, corpus_grounder(corpus))
    return run_batch(claims, Strategy.FOLK, verifier, parallelism=parallelism,
                     fixtures=fixture_digests([store_path, corpus]))


class TestReplayDeterminism:
    def test_recording_holds_two_calls_per_claim(self, recorded):
        _, _, store_path = recorded
        assert len(TraceStore.load(store_path)) == 40

    def test_replayed_labels(self, recorded, deny_network):
        claims, corpus, store_path = recorded
        run = replay_run(claims, corpus, store_path)
        assert [t.final_label for t in run.traces] == [
            Label.SUPPORTED if n % 2 == 0 else Label.NOT_SUPPORTED for n in range(20)
        ]
        assert all(t.errors == [] for t in run.traces)
        assert deny_network.attempts == []

    def test_identical_across_runs_and_parallelism(self, recorded, tmp_path, deny_network):
        claims, corpus, store_path = recorded
        serial = replay_run(claims, corpus, store_path, parallelism=1)
        again = replay_run(claims, corpus, store_path, parallelism=1)
        parallel = replay_run(claims, corpus, store_path, parallelism=8)

        assert normalized_dump(serial) == normalized_dump(again) == normalized_dump(parallel)
        assert [t.claim.id for t in parallel.traces] == [c.id for c in claims]

        written = []
        for name, run in (("serial", serial), ("parallel", parallel)):
            path = write_traces(tmp_path / f"{name}.ndjson", run.manifest, run.traces)
            manifest, traces = load_traces(path)
            written.append((manifest, [json.dumps(normalize_trace_record(t), sort_keys=True) for t in traces]))
        assert written[0] == written[1]
        assert deny_network.attempts == []

    def test_single_replay_miss_is_isolated(self, recorded, tmp_path):
        claims, corpus, store_path = recorded
        claims = claims[:10]
        clean = replay_run(claims, corpus, store_path)

        holed = tmp_path / "holed.ndjson"
        with open(store_path, "r", encoding="utf-8") as src, open(holed, "w", encoding="utf-8") as dst:
            for line in src:
                if synthetic_claim_number(json.loads(line)["prompt"]) != 3:
                    dst.write(line)
        faulty = replay_run(claims, corpus, holed)

        for i, (a, b) in enumerate(zip(clean.traces, faulty.traces)):
            if i == 3:
                assert b.final_label == Label.UNKNOWN
                assert [(e.stage, e.type) for e in b.errors] == [("decompose", "ReplayMiss")]
            else:
                assert normalize_trace_record(a) == normalize_trace_record(b)


class TestRunBatch:
    def test_empty_batch(self):
        run = run_batch([], Strategy.DIRECT, ClaimVerifier(scripted_gateway()))
        assert run.traces == []
        assert run.manifest.claim_count == 0

    def test_duplicate_ids(self):
        claims = [Claim(id="x", text="one"), Claim(id="x", text="two")]
        with pytest.raises(ConfigError):
            run_batch(claims, Strategy.DIRECT, ClaimVerifier(scripted_gateway()))

    def test_parallelism_must_be_positive(self):
        with pytest.raises(ConfigError):
            run_batch([], Strategy.DIRECT, ClaimVerifier(scripted_gateway()), parallelism=0)

    def test_blank_grounding_text_fails_only_its_claim(self, tmp_path):
        corpus = write_synthetic_corpus(tmp_path / "corpus.jsonl", [0])
        with open(corpus, "a", encoding="utf-8") as f:
            f.write(json.dumps({"question": synthetic_question(1), "answer": "   "}) + "\n")
        run = run_batch(synthetic_claims(2), Strategy.FOLK,
                        ClaimVerifier(scripted_gateway(responder=folk_responder), corpus_grounder(corpus)))
        assert run.traces[0].final_label == Label.SUPPORTED
        assert run.traces[0].errors == []
        assert run.traces[1].final_label == Label.UNKNOWN
        assert [(e.stage, e.type) for e in run.traces[1].errors] == [("ground", "GroundingMiss")]

    def test_manifest_fields(self, tmp_path):
        corpus = write_synthetic_corpus(tmp_path / "corpus.jsonl", range(2))
        run = run_batch(synthetic_claims(2), Strategy.FOLK,
                        ClaimVerifier(scripted_gateway(responder=folk_responder), corpus_grounder(corpus)),
                        config_digest="abc", fixtures=fixture_digests([corpus]), sampling="stratified n=2 seed=0")
        assert run.manifest == RunManifest(
            strategy=Strategy.FOLK,
            config_digest="abc",
            fixture_digests={"corpus.jsonl": file_digest(corpus)},
            claim_count=2,
            sampling="stratified n=2 seed=0",
        )


class TestTraceFiles:
    def test_round_trip(self, tmp_path):
        corpus = write_synthetic_corpus(tmp_path / "corpus.jsonl", range(3))
        run = run_batch(synthetic_claims(3), Strategy.FOLK,
                        ClaimVerifier(scripted_gateway(responder=folk_responder), corpus_grounder(corpus)))
        path = write_traces(tmp_path / "out" / "folk.ndjson", run.manifest, run.traces)
        manifest, traces = load_traces(path)
        assert manifest == run.manifest
        assert traces == run.traces
        first = json.loads(path.read_text(encoding="utf-8").splitlines()[0])
        assert first["record_type"] == "manifest"

    def test_missing_manifest(self, tmp_path):
        path = tmp_path / "t.ndjson"
        path.write_text("", encoding="utf-8")
        with pytest.raises(FormatError):
            load_traces(path)

    def test_bad_line_reports_its_number(self, tmp_path):
        path = write_traces(tmp_path / "t.ndjson", RunManifest(strategy=Strategy.DIRECT), [])
        with open(path, "a", encoding="utf-8") as f:
            f.write("{broken\n")
        with pytest.raises(FormatError) as excinfo:
            load_traces(path)
        assert excinfo.value.line == 2

    def test_unknown_schema_version(self, tmp_path):
        path = write_traces(tmp_path / "t.ndjson", RunManifest(strategy=Strategy.DIRECT, schema_version=99), [])
        with pytest.raises(FormatError):
            load_traces(path)
