"""
Run configuration: precedence, config-file flattening, backend parsing and the config digest.
"""

from pathlib import Path

import pytest

from conftest import ROOT
from config.settings import RunConfig, Settings, load_config_file, resolve_run_config
from utils.errors import ConfigError
from utils.llm_gateway import Backend
from utils.prompts import Strategy
from utils.search import Provider


def write_toml(tmp_path, text: str) -> Path:
    path = tmp_path / "claimcheck.toml"
    path.write_text(text, encoding="utf-8")
    return path


class TestPrecedence:
    def test_defaults(self):
        config = resolve_run_config({})
        assert config.strategy is None
        assert config.backend_kind == Backend.LIVE
        assert config.parallelism == 1
        assert config.site_restriction == "en.wikipedia.org"

    def test_environment_over_default(self, monkeypatch):
        monkeypatch.setenv("CLAIMCHECK_STRATEGY", "CoT")
        monkeypatch.setenv("CLAIMCHECK_PARALLELISM", "4")
        config = resolve_run_config({})
        assert config.strategy == Strategy.COT
        assert config.parallelism == 4

    def test_file_over_environment(self, monkeypatch, tmp_path):
        monkeypatch.setenv("CLAIMCHECK_STRATEGY", "cot")
        config = resolve_run_config({}, write_toml(tmp_path, 'strategy = "folk"\n'))
        assert config.strategy == Strategy.FOLK

    def test_flag_over_file(self, monkeypatch, tmp_path):
        monkeypatch.setenv("CLAIMCHECK_STRATEGY", "cot")
        path = write_toml(tmp_path, 'strategy = "folk"\nseed = 3\n')
        config = resolve_run_config({"strategy": "direct", "seed": None}, path)
        assert config.strategy == Strategy.DIRECT
        assert config.seed == 3

    def test_invalid_value(self):
        with pytest.raises(ConfigError):
            resolve_run_config({"parallelism": 0})


class TestConfigFile:
    def test_sections_are_flattened(self, tmp_path):
        path = write_toml(tmp_path, '[grounding]\nproviders = "offline"\ncorpus = "c.jsonl"\n\n[data]\nseed = 9\n')
        assert load_config_file(path) == {"providers": "offline", "corpus": "c.jsonl", "seed": 9}

    def test_unknown_key(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config_file(write_toml(tmp_path, "temperature = 0.7\n"))

    def test_invalid_toml(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config_file(write_toml(tmp_path, "strategy = \n"))

    def test_shipped_example(self):
        config = resolve_run_config({}, ROOT / "claimcheck.example.toml")
        assert config.strategy == Strategy.FOLK
        assert config.replay_paths == [Path("fixtures/table1.ndjson")]
        assert config.grounding_config().provider_order == (Provider.OFFLINE_CORPUS,)
        assert config.sample_n == 100


class TestRunConfig:
    def test_replay_paths(self):
        config = RunConfig(backend="replay:a.ndjson, b.ndjson")
        assert config.backend_kind == Backend.REPLAY
        assert config.replay_paths == [Path("a.ndjson"), Path("b.ndjson")]

    def test_replay_without_path(self):
        with pytest.raises(ConfigError):
            resolve_run_config({"backend": "replay"})

    def test_unknown_backend(self):
        with pytest.raises(ConfigError):
            resolve_run_config({"backend": "cloud"})

    def test_claim_timeout_defaults_only_for_live(self):
        assert RunConfig().effective_timeout_s == 120.0
        assert RunConfig(backend="scripted").effective_timeout_s is None
        assert RunConfig(backend="scripted", claim_timeout_s=5).effective_timeout_s == 5

    def test_grounding_overrides(self):
        grounding = RunConfig(site_restriction="none").grounding_config(provider_order="self")
        assert grounding.site_restriction is None
        assert grounding.provider_order == (Provider.SELF_ANSWER,)

    def test_digest_ignores_execution_knobs(self):
        base = RunConfig(strategy="folk", seed=1)
        assert base.digest() == RunConfig(strategy="folk", seed=1, parallelism=8, out="x.ndjson").digest()
        assert base.digest() != RunConfig(strategy="folk", seed=2).digest()

    def test_validate_for_replay_and_live(self, tmp_path, test_settings):
        with pytest.raises(ConfigError):
            RunConfig(backend=f"replay:{tmp_path / 'missing.ndjson'}").validate_for(test_settings)
        with pytest.raises(ConfigError):
            RunConfig(backend="live").validate_for(test_settings)
        RunConfig(backend="live").validate_for(Settings(llm_api_key="k", search_api_key="s"))
