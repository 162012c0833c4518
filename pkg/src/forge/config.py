"""Pipeline configuration: one YAML file, defaults for every knob.

An empty (or missing) file yields a fully defaulted configuration with every
backend role bound to the deterministic mock, so the pipeline is runnable
hermetically out of the box.  Validation checks every invariant and reports
all problems at once.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .errors import ConfigError
from .filtering import DEFAULT_SWEEP, DEFAULT_TAU_K, DEFAULT_TAU_L
from .gateway import FALLBACK_STYLES, HttpChatBackend, MockBackend, load_script
from .scoring import CachedScorer, DEFAULT_NLI_MODEL, HttpNliScorer, LexicalOverlapScorer, SentenceMaxScorer

DEFAULT_TOPICS = (
    "Geography",
    "Art",
    "Medical",
    "History",
    "Biology",
    "Science",
    "Musician",
    "Actor",
    "Economics",
    "Astronomy",
)

GENERATION_ROLES = ("instruction_generator", "target_model", "rc_teacher", "judge")
SCORER_ROLE = "scorer"
ALL_ROLES = GENERATION_ROLES + (SCORER_ROLE,)

_GEN_KINDS = ("mock", "http")
_SCORER_KINDS = ("lexical", "http-nli")


@dataclass
class BackendConfig:
    kind: str = "mock"
    base_url: str | None = None
    model: str | None = None
    auth_env: str = "FORGE_API_TOKEN"
    max_parallel: int = 4
    max_retries: int = 5
    style: str | None = None  # mock backends: echo | verdict
    script: str | None = None  # mock backends: path to canned outputs


@dataclass
class PipelineConfig:
    seed: int = 0
    workdir: str = "artifacts"
    # corpus
    corpus_source: str | None = None
    topics: list[str] = field(default_factory=lambda: list(DEFAULT_TOPICS))
    train_per_topic: int = 100
    eval_per_topic: int = 10
    chunk_length: int = 512
    tokenizer: str = "whitespace"
    # instruction generation
    n_per_doc: int = 8
    eval_questions_per_doc: int = 2
    max_attempts: int = 3
    instruction_few_shot: str | None = None
    # sft assembly
    rc_fraction: float = 1.0 / 3.0
    answer_few_shot: str | None = None
    # preference bundles
    k: int = 10
    temperature: float = 1.0
    max_tokens: int = 512
    ablation: bool = False
    # filtering
    tau_l: float = DEFAULT_TAU_L
    tau_k: float = DEFAULT_TAU_K
    sweep: list[float] = field(default_factory=lambda: list(DEFAULT_SWEEP))
    sentence_split: bool = False
    known_sample_n: int = 200
    # toy preference-optimization verification
    beta: float = 0.3
    steps: int = 300
    learning_rate: float = 0.5
    # judging
    judge_response_a: str | None = None
    judge_response_b: str | None = None
    # backend bindings per role
    backends: dict[str, BackendConfig] = field(default_factory=dict)

    def __post_init__(self):
        for role in GENERATION_ROLES:
            self.backends.setdefault(role, BackendConfig())
        self.backends.setdefault(SCORER_ROLE, BackendConfig(kind="lexical"))

    def canonical_dict(self) -> dict:
        """Stable dict for config hashing.

        The workdir is excluded: it names where artifacts land, not what they
        contain, and stage input/artifact hashes already pin content.
        """
        out = {}
        for f in fields(self):
            if f.name == "workdir":
                continue
            value = getattr(self, f.name)
            if f.name == "backends":
                value = {role: vars(cfg).copy() for role, cfg in sorted(value.items())}
            out[f.name] = copy.deepcopy(value)
        return out


# (config section, key) -> PipelineConfig field
_KEY_MAP = {
    ("", "seed"): "seed",
    ("", "workdir"): "workdir",
    ("corpus", "source"): "corpus_source",
    ("corpus", "topics"): "topics",
    ("corpus", "train_per_topic"): "train_per_topic",
    ("corpus", "eval_per_topic"): "eval_per_topic",
    ("corpus", "chunk_length"): "chunk_length",
    ("corpus", "tokenizer"): "tokenizer",
    ("instructions", "n_per_doc"): "n_per_doc",
    ("instructions", "eval_questions_per_doc"): "eval_questions_per_doc",
    ("instructions", "max_attempts"): "max_attempts",
    ("instructions", "few_shot"): "instruction_few_shot",
    ("sft", "rc_fraction"): "rc_fraction",
    ("sft", "few_shot"): "answer_few_shot",
    ("preferences", "k"): "k",
    ("preferences", "temperature"): "temperature",
    ("preferences", "max_tokens"): "max_tokens",
    ("preferences", "ablation"): "ablation",
    ("filter", "tau_L"): "tau_l",
    ("filter", "tau_K"): "tau_k",
    ("filter", "sweep"): "sweep",
    ("filter", "sentence_split"): "sentence_split",
    ("filter", "known_sample_n"): "known_sample_n",
    ("dpo", "beta"): "beta",
    ("dpo", "steps"): "steps",
    ("dpo", "learning_rate"): "learning_rate",
    ("judge", "response_a"): "judge_response_a",
    ("judge", "response_b"): "judge_response_b",
}

_SECTIONS = {section for section, _ in _KEY_MAP if section} | {"backends"}

_PATH_FIELDS = (
    "corpus_source",
    "instruction_few_shot",
    "answer_few_shot",
    "judge_response_a",
    "judge_response_b",
)


def _apply_overrides(data: dict, overrides: dict[str, object]) -> dict:
    """Merge dotted-key overrides (e.g. ``filter.tau_K``) into raw config data."""
    data = copy.deepcopy(data)
    for dotted, value in overrides.items():
        node = data
        parts = dotted.split(".")
        for part in parts[:-1]:
            nxt = node.get(part)
            if not isinstance(nxt, dict):
                nxt = {}
                node[part] = nxt
            node = nxt
        node[parts[-1]] = value
    return data


def validate_config_data(data: dict | None, base_dir: Path | None = None, overrides: dict | None = None) -> PipelineConfig:
    """Build and validate a PipelineConfig from raw (parsed) config data.

    All detected problems are raised together in one ConfigError.
    """
    problems: list[str] = []
    data = copy.deepcopy(data) if data else {}
    if overrides:
        data = _apply_overrides(data, overrides)
    if not isinstance(data, dict):
        raise ConfigError(["config root must be a mapping"])
    base_dir = Path(base_dir) if base_dir is not None else Path.cwd()

    known_keys = {(s, k) for s, k in _KEY_MAP}
    cfg = PipelineConfig()

    for key, value in data.items():
        if key == "backends":
            continue
        if key in _SECTIONS:
            if value is None:
                continue
            if not isinstance(value, dict):
                problems.append(f"section '{key}' must be a mapping")
                continue
            for sub, sub_value in value.items():
                if (key, sub) not in known_keys:
                    problems.append(f"unknown config key '{key}.{sub}'")
                    continue
                setattr(cfg, _KEY_MAP[(key, sub)], sub_value)
        elif ("", key) in known_keys:
            setattr(cfg, _KEY_MAP[("", key)], value)
        else:
            problems.append(f"unknown config key '{key}'")

    problems.extend(_parse_backends(cfg, data.get("backends")))
    problems.extend(_check_values(cfg))
    problems.extend(_resolve_paths(cfg, base_dir))
    if problems:
        raise ConfigError(problems)
    if not Path(cfg.workdir).is_absolute():
        cfg.workdir = str(base_dir / cfg.workdir)
    return cfg


def _parse_backends(cfg: PipelineConfig, raw) -> list[str]:
    problems = []
    if raw is not None and not isinstance(raw, dict):
        return ["section 'backends' must be a mapping"]
    for role, entry in (raw or {}).items():
        if role not in ALL_ROLES:
            problems.append(f"unknown backend role '{role}' (known roles: {', '.join(ALL_ROLES)})")
            continue
        if entry is None:
            problems.append(f"backend role '{role}' is unbound; every role needs a backend")
            continue
        if not isinstance(entry, dict):
            problems.append(f"backends.{role} must be a mapping")
            continue
        bc = BackendConfig(kind="lexical") if role == SCORER_ROLE else BackendConfig()
        for key, value in entry.items():
            if not hasattr(bc, key):
                problems.append(f"unknown key 'backends.{role}.{key}'")
                continue
            setattr(bc, key, value)
        cfg.backends[role] = bc
    for role, bc in cfg.backends.items():
        kinds = _SCORER_KINDS if role == SCORER_ROLE else _GEN_KINDS
        if bc.kind not in kinds:
            problems.append(f"backends.{role}.kind must be one of {kinds}, got '{bc.kind}'")
            continue
        if bc.kind in ("http", "http-nli") and not bc.base_url:
            problems.append(f"backends.{role}: kind '{bc.kind}' requires base_url")
        if bc.kind == "http" and not bc.model:
            problems.append(f"backends.{role}: kind 'http' requires model")
        if bc.style is not None and bc.style not in FALLBACK_STYLES:
            problems.append(f"backends.{role}.style must be one of {sorted(FALLBACK_STYLES)}, got '{bc.style}'")
        if bc.max_parallel < 1:
            problems.append(f"backends.{role}.max_parallel must be >= 1")
        if bc.max_retries < 1:
            problems.append(f"backends.{role}.max_retries must be >= 1")
    return problems


def _check_values(cfg: PipelineConfig) -> list[str]:
    problems = []

    def check(cond: bool, message: str):
        if not cond:
            problems.append(message)

    check(isinstance(cfg.topics, list) and all(isinstance(t, str) for t in cfg.topics), "corpus.topics must be a list of strings")
    check(cfg.train_per_topic >= 0, f"corpus.train_per_topic must be >= 0, got {cfg.train_per_topic}")
    check(cfg.eval_per_topic >= 0, f"corpus.eval_per_topic must be >= 0, got {cfg.eval_per_topic}")
    check(cfg.chunk_length >= 1, f"corpus.chunk_length must be >= 1, got {cfg.chunk_length}")
    check(cfg.tokenizer in ("whitespace", "character"), f"corpus.tokenizer must be 'whitespace' or 'character', got '{cfg.tokenizer}'")
    check(cfg.n_per_doc >= 1, f"instructions.n_per_doc must be >= 1, got {cfg.n_per_doc}")
    check(cfg.eval_questions_per_doc >= 1, f"instructions.eval_questions_per_doc must be >= 1, got {cfg.eval_questions_per_doc}")
    check(cfg.max_attempts >= 1, f"instructions.max_attempts must be >= 1, got {cfg.max_attempts}")
    check(0.0 <= cfg.rc_fraction <= 1.0, f"sft.rc_fraction must be in [0, 1], got {cfg.rc_fraction}")
    check(cfg.k >= 1, f"preferences.k must be >= 1, got {cfg.k}")
    check(cfg.temperature >= 0.0, f"preferences.temperature must be >= 0, got {cfg.temperature}")
    check(cfg.max_tokens >= 1, f"preferences.max_tokens must be >= 1, got {cfg.max_tokens}")
    check(0.0 <= cfg.tau_l <= 1.0, f"filter.tau_L must be in [0, 1], got {cfg.tau_l}")
    check(0.0 <= cfg.tau_k <= 1.0, f"filter.tau_K must be in [0, 1], got {cfg.tau_k}")
    if not isinstance(cfg.sweep, list) or not all(isinstance(v, (int, float)) for v in cfg.sweep):
        problems.append("filter.sweep must be a list of numbers")
    else:
        check(all(0.0 <= v <= 1.0 for v in cfg.sweep), f"filter.sweep values must be in [0, 1], got {cfg.sweep}")
        check(list(cfg.sweep) == sorted(cfg.sweep), f"filter.sweep values must be ascending, got {cfg.sweep}")
    check(cfg.known_sample_n >= 0, f"filter.known_sample_n must be >= 0, got {cfg.known_sample_n}")
    check(cfg.beta > 0, f"dpo.beta must be > 0, got {cfg.beta}")
    check(cfg.steps >= 1, f"dpo.steps must be >= 1, got {cfg.steps}")
    check(cfg.learning_rate >= 0, f"dpo.learning_rate must be >= 0, got {cfg.learning_rate}")
    check(cfg.seed == int(cfg.seed), f"seed must be an integer, got {cfg.seed}")
    return problems


def _resolve_paths(cfg: PipelineConfig, base_dir: Path) -> list[str]:
    problems = []
    for name in _PATH_FIELDS:
        value = getattr(cfg, name)
        if value is None:
            continue
        path = Path(value)
        if not path.is_absolute():
            path = base_dir / path
        if not path.exists():
            problems.append(f"{name}: path '{value}' does not exist")
        else:
            setattr(cfg, name, str(path))
    for role, bc in cfg.backends.items():
        if bc.script is not None:
            path = Path(bc.script)
            if not path.is_absolute():
                path = base_dir / path
            if not path.exists():
                problems.append(f"backends.{role}.script: path '{bc.script}' does not exist")
            else:
                bc.script = str(path)
    return problems


def validate_config(path=None, overrides: dict | None = None) -> PipelineConfig:
    """Load and validate a YAML config file (absent or empty file = defaults)."""
    if path is None:
        return validate_config_data({}, base_dir=Path.cwd(), overrides=overrides)
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError([f"config file '{path}' does not exist"]) from None
    except yaml.YAMLError as exc:
        raise ConfigError([f"config file '{path}' is not valid YAML: {exc}"]) from exc
    return validate_config_data(raw or {}, base_dir=path.resolve().parent, overrides=overrides)


# ---------------------------------------------------------------------------
# Backend construction
# ---------------------------------------------------------------------------

_DEFAULT_MOCK_STYLE = {role: "echo" for role in GENERATION_ROLES}
_DEFAULT_MOCK_STYLE["judge"] = "verdict"


def build_backend(role: str, bc: BackendConfig):
    """Instantiate the generation backend bound to ``role``."""
    if bc.kind == "http":
        return HttpChatBackend(
            base_url=bc.base_url,
            model=bc.model,
            auth_env=bc.auth_env,
            max_parallel=bc.max_parallel,
            max_retries=bc.max_retries,
        )
    style = bc.style or _DEFAULT_MOCK_STYLE.get(role, "echo")
    script = load_script(bc.script) if bc.script else {}
    return MockBackend(
        script=script,
        fallback=FALLBACK_STYLES[style],
        backend_id=f"mock:{style}:{role}",
        max_parallel=bc.max_parallel,
    )


def build_scorer(bc: BackendConfig, *, sentence_split: bool = False, cache_path=None):
    """Instantiate the contradiction scorer, cached and optionally sentence-split."""
    if bc.kind == "http-nli":
        scorer = HttpNliScorer(base_url=bc.base_url, model=bc.model or DEFAULT_NLI_MODEL, max_retries=bc.max_retries)
    else:
        scorer = LexicalOverlapScorer()
    if sentence_split:
        scorer = SentenceMaxScorer(scorer)
    return CachedScorer(scorer, path=cache_path)
