import pytest
import yaml

from forge.config import (
    BackendConfig,
    DEFAULT_TOPICS,
    build_backend,
    build_scorer,
    validate_config,
    validate_config_data,
)
from forge.errors import ConfigError
from forge.gateway import HttpChatBackend, MockBackend
from forge.scoring import CachedScorer, HttpNliScorer, LexicalOverlapScorer, SentenceMaxScorer


class TestDefaults:
    def test_empty_data_yields_published_constants(self):
        cfg = validate_config_data({})
        assert cfg.n_per_doc == 8
        assert cfg.chunk_length == 512
        assert cfg.k == 10
        assert cfg.tau_l == 0.5
        assert cfg.tau_k == 0.5
        assert cfg.beta == 0.3
        assert cfg.temperature == 1.0
        assert cfg.steps == 300
        assert cfg.rc_fraction == pytest.approx(1 / 3)
        assert cfg.sweep == [0.5, 0.6, 0.7, 0.8]
        assert list(DEFAULT_TOPICS)[:2] == ["Geography", "Art"]
        assert len(cfg.topics) == 10
        assert cfg.train_per_topic == 100 and cfg.eval_per_topic == 10

    def test_empty_file_is_valid(self, tmp_path):
        path = tmp_path / "empty.yaml"
        path.write_text("")
        cfg = validate_config(path)
        assert cfg.k == 10
        assert set(cfg.backends) == {"instruction_generator", "target_model", "rc_teacher", "judge", "scorer"}

    def test_every_role_defaults_to_mock(self):
        cfg = validate_config_data({})
        assert all(bc.kind in ("mock", "lexical") for bc in cfg.backends.values())


class TestValidationErrors:
    def test_tau_out_of_range(self):
        with pytest.raises(ConfigError, match=r"filter.tau_K must be in \[0, 1\]"):
            validate_config_data({"filter": {"tau_K": 1.5}})

    def test_unbound_role(self):
        with pytest.raises(ConfigError, match="role 'scorer' is unbound"):
            validate_config_data({"backends": {"scorer": None}})

    def test_http_requires_base_url(self):
        with pytest.raises(ConfigError, match="requires base_url"):
            validate_config_data({"backends": {"judge": {"kind": "http", "model": "m"}}})

    def test_unknown_role_and_key(self):
        with pytest.raises(ConfigError, match="unknown backend role 'oracle'"):
            validate_config_data({"backends": {"oracle": {"kind": "mock"}}})
        with pytest.raises(ConfigError, match="unknown config key 'filter.tau_X'"):
            validate_config_data({"filter": {"tau_X": 0.5}})

    def test_problems_aggregated(self):
        data = {
            "filter": {"tau_K": 2.0, "tau_L": -1.0},
            "preferences": {"k": 0},
            "dpo": {"beta": 0},
        }
        with pytest.raises(ConfigError) as excinfo:
            validate_config_data(data)
        assert len(excinfo.value.problems) == 4

    def test_unsorted_sweep(self):
        with pytest.raises(ConfigError, match="ascending"):
            validate_config_data({"filter": {"sweep": [0.8, 0.5]}})

    def test_missing_path(self, tmp_path):
        with pytest.raises(ConfigError, match="does not exist"):
            validate_config_data({"corpus": {"source": "nowhere/void"}}, base_dir=tmp_path)

    def test_scorer_kind_checked(self):
        with pytest.raises(ConfigError, match="backends.scorer.kind"):
            validate_config_data({"backends": {"scorer": {"kind": "mock"}}})

    def test_bad_yaml_reported(self, tmp_path):
        path = tmp_path / "broken.yaml"
        path.write_text("corpus: [unclosed")
        with pytest.raises(ConfigError, match="not valid YAML"):
            validate_config(path)

    def test_missing_file_reported(self, tmp_path):
        with pytest.raises(ConfigError, match="does not exist"):
            validate_config(tmp_path / "ghost.yaml")


class TestOverridesAndPaths:
    def test_overrides_merge(self):
        cfg = validate_config_data(
            {"filter": {"tau_K": 0.6}},
            overrides={"filter.tau_K": 0.7, "preferences.k": 3, "seed": 42},
        )
        assert cfg.tau_k == 0.7 and cfg.k == 3 and cfg.seed == 42

    def test_backend_override(self):
        cfg = validate_config_data({}, overrides={"backends.judge.kind": "mock", "backends.judge.style": "echo"})
        assert cfg.backends["judge"].style == "echo"

    def test_relative_paths_resolved_against_config_dir(self, tmp_path):
        corpus = tmp_path / "data"
        corpus.mkdir()
        path = tmp_path / "cfg.yaml"
        path.write_text(yaml.safe_dump({"corpus": {"source": "data"}, "workdir": "out"}))
        cfg = validate_config(path)
        assert cfg.corpus_source == str(corpus)
        assert cfg.workdir == str(tmp_path / "out")

    def test_workdir_excluded_from_canonical_hash(self):
        a = validate_config_data({"workdir": "x"})
        b = validate_config_data({"workdir": "y"})
        assert a.canonical_dict() == b.canonical_dict()


class TestBackendFactories:
    def test_mock_styles_by_role(self):
        cfg = validate_config_data({})
        judge = build_backend("judge", cfg.backends["judge"])
        target = build_backend("target_model", cfg.backends["target_model"])
        assert isinstance(judge, MockBackend) and "verdict" in judge.backend_id
        assert isinstance(target, MockBackend) and "echo" in target.backend_id

    def test_http_backend(self):
        bc = BackendConfig(kind="http", base_url="http://example.test", model="m1", max_parallel=2)
        backend = build_backend("target_model", bc)
        assert isinstance(backend, HttpChatBackend)
        assert backend.max_parallel == 2
        assert backend.backend_id == "http:m1@http://example.test"

    def test_scripted_mock_from_file(self, tmp_path):
        script = tmp_path / "script.jsonl"
        script.write_text('{"fingerprint": "abc", "texts": ["canned"]}\n')
        backend = build_backend("judge", BackendConfig(kind="mock", script=str(script)))
        assert backend.script == {"abc": ["canned"]}

    def test_lexical_scorer_cached(self, tmp_path):
        scorer = build_scorer(BackendConfig(kind="lexical"), cache_path=tmp_path / "s.jsonl")
        assert isinstance(scorer, CachedScorer)
        assert isinstance(scorer.base, LexicalOverlapScorer)

    def test_sentence_split_wrap(self):
        scorer = build_scorer(BackendConfig(kind="lexical"), sentence_split=True)
        assert isinstance(scorer.base, SentenceMaxScorer)

    def test_http_nli_scorer(self):
        scorer = build_scorer(BackendConfig(kind="http-nli", base_url="http://nli.test", model="xe"))
        assert isinstance(scorer.base, HttpNliScorer)
        assert scorer.scorer_id == "nli-http:xe@http://nli.test"
