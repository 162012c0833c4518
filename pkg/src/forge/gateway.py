"""Uniform access to text-generation backends.

Two backend families share one interface: a remote chat-completion-style
HTTP service and a deterministic local mock for hermetic runs.  Every
completed request is committed to an append-only response cache keyed by a
hash of the canonical request encoding, so downstream stages are
reproducible from the cache snapshot even when the remote backend samples
stochastically.
"""

from __future__ import annotations

import hashlib
import logging
import os
import random
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Protocol

import requests

from .cache import AppendOnlyCache
from .errors import BackendError, ContentError, ForgeError, TransportError
from .records import canonical_json

logger = logging.getLogger(__name__)

GREEDY = "greedy"
SAMPLE = "sample"

DEFAULT_TEMPERATURE = 1.0
DEFAULT_MAX_RETRIES = 5
DEFAULT_MAX_PARALLEL = 4


@dataclass(frozen=True)
class GenerationRequest:
    system_prompt: str
    user_prompt: str
    temperature: float = DEFAULT_TEMPERATURE
    max_tokens: int = 512
    n_samples: int = 1
    decoding: str = SAMPLE
    request_tag: str = ""  # opaque; differentiates otherwise-identical cache keys

    def __post_init__(self):
        if self.decoding not in (GREEDY, SAMPLE):
            raise ValueError(f"unknown decoding '{self.decoding}'")
        if self.n_samples < 1:
            raise ValueError(f"n_samples must be >= 1, got {self.n_samples}")
        if self.decoding == GREEDY and self.n_samples != 1:
            raise ValueError("greedy decoding yields a single completion; use n_samples=1")
        if self.temperature < 0:
            raise ValueError(f"temperature must be >= 0, got {self.temperature}")
        if self.max_tokens < 1:
            raise ValueError(f"max_tokens must be >= 1, got {self.max_tokens}")


@dataclass(frozen=True)
class GenerationResult:
    texts: tuple[str, ...]
    backend_id: str
    cached: bool


class Backend(Protocol):
    backend_id: str
    max_parallel: int

    def complete(self, req: GenerationRequest) -> list[str]: ...


def cache_key(backend_id: str, req: GenerationRequest) -> str:
    """Hash of the canonical request encoding; temperature is ignored for greedy."""
    payload = {
        "backend": backend_id,
        "system": req.system_prompt,
        "user": req.user_prompt,
        "decoding": req.decoding,
        "n": req.n_samples,
        "max_tokens": req.max_tokens,
        "tag": req.request_tag,
    }
    if req.decoding == SAMPLE:
        payload["temperature"] = req.temperature
    return hashlib.sha256(canonical_json(payload).encode("utf-8")).hexdigest()


def response_cache(path=None) -> AppendOnlyCache:
    return AppendOnlyCache(path, format_name="forge-response-cache")


def generate(backend: Backend, req: GenerationRequest, cache: AppendOnlyCache | None = None) -> GenerationResult:
    """Run one request through ``backend``, consulting/committing the cache.

    Repeated identical calls return the cached texts without touching the
    backend.  The cache commit is first-write-wins, so a retried request can
    never overwrite an earlier completion.
    """
    key = cache_key(backend.backend_id, req)
    if cache is not None:
        hit = cache.get(key)
        if hit is not None:
            return GenerationResult(texts=tuple(hit["texts"]), backend_id=hit["backend_id"], cached=True)
    texts = list(backend.complete(req))
    if len(texts) != req.n_samples:
        raise ContentError(
            f"backend '{backend.backend_id}' returned {len(texts)} completions, expected {req.n_samples}",
            raw_response=texts,
        )
    if any(not t for t in texts):
        raise ContentError(f"backend '{backend.backend_id}' returned an empty completion", raw_response=texts)
    if cache is not None:
        committed = cache.put(key, {"texts": texts, "backend_id": backend.backend_id})
        texts = committed["texts"]
    return GenerationResult(texts=tuple(texts), backend_id=backend.backend_id, cached=False)


def generate_map(
    backend: Backend,
    requests_by_key: Mapping,
    cache: AppendOnlyCache | None = None,
) -> dict:
    """Run many requests concurrently, bounded by the backend's pool size.

    Results are returned keyed like the input, so completion order can never
    leak into dataset order.  The first backend failure propagates; use
    :func:`generate_settled` where per-item failures must be tolerated.
    """
    if not requests_by_key:
        return {}
    workers = max(1, int(getattr(backend, "max_parallel", 1)))
    results = {}
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = {k: pool.submit(generate, backend, req, cache) for k, req in requests_by_key.items()}
        for k, fut in futures.items():
            results[k] = fut.result()
    return results


def generate_settled(
    backend: Backend,
    requests_by_key: Mapping,
    cache: AppendOnlyCache | None = None,
) -> dict:
    """Like :func:`generate_map`, but each value is a GenerationResult or the
    BackendError that request raised, so one bad item cannot sink a batch."""
    if not requests_by_key:
        return {}
    workers = max(1, int(getattr(backend, "max_parallel", 1)))
    results = {}
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = {k: pool.submit(generate, backend, req, cache) for k, req in requests_by_key.items()}
        for k, fut in futures.items():
            try:
                results[k] = fut.result()
            except BackendError as exc:
                results[k] = exc
    return results


# ---------------------------------------------------------------------------
# Deterministic mock backend
# ---------------------------------------------------------------------------

_WORD_RE = re.compile(r"[a-z0-9']+")


def prompt_fingerprint(system_prompt: str, user_prompt: str) -> str:
    """Short stable id for scripting mock outputs against specific prompts."""
    return hashlib.sha256(f"{system_prompt}\x1e{user_prompt}".encode("utf-8")).hexdigest()[:16]


def _unit_hash(tag: str, text: str) -> float:
    """Deterministic pseudo-uniform draw in [0, 1) from (tag, text)."""
    digest = hashlib.sha256(f"{tag}|{text}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") / 2**64


def _distinct_words(text: str) -> list[str]:
    seen = []
    known = set()
    for w in _WORD_RE.findall(text.lower()):
        if w not in known:
            known.add(w)
            seen.append(w)
    return seen


def echo_fallback(prompt: str, sample_index: int) -> str:
    """Simulated answer built from words of the prompt itself.

    Behaves like a small language model for pipeline exercises: answers echo
    the question (plus a few document words when a document block is
    present), greedy decodes are stable, and sampled decodes perturb a
    question-dependent fraction of words.  Questions hash to a fixed
    "difficulty" and "familiarity", so grounded and ungrounded prompts for
    the same question stay behaviorally correlated.
    """
    lower = prompt.lower()
    q_pos = lower.rfind("question:")
    d_pos = lower.rfind("document:")
    if q_pos >= 0:
        question_text = prompt[q_pos + len("question:"):]
    else:
        question_text = prompt
    a_pos = question_text.lower().rfind("answer:")
    if a_pos >= 0:
        question_text = question_text[:a_pos]
    question_text = question_text.strip()

    q_words = _distinct_words(question_text)[:8]
    base = list(q_words)
    grounded = 0 <= d_pos < q_pos
    if grounded:
        doc_text = prompt[d_pos + len("document:") : q_pos]
        doc_words = [w for w in _distinct_words(doc_text) if w not in set(q_words)]
        take = 8 if not q_words else 4
        base.extend(doc_words[:: max(1, len(doc_words) // take)][:take])
    if not base:
        base = ["blank"]

    difficulty = _unit_hash("difficulty", question_text)
    familiarity = _unit_hash("familiarity", question_text)
    if grounded:
        noise = 0.05 + 0.65 * difficulty
    else:
        noise = 0.05 + 0.95 * (1.0 - familiarity)

    if sample_index < 0 and grounded:
        jitter = 0.0  # grounded greedy decode is the clean reference answer
    else:
        rng = random.Random(f"{sample_index}|{prompt}")
        jitter = noise * (0.3 + 0.7 * rng.random())
        n_swap = round(jitter * len(base))
        if n_swap:
            positions = rng.sample(range(len(base)), n_swap)
            for p in positions:
                base[p] = f"x{rng.getrandbits(24):06x}"
    return " ".join(base)


def verdict_fallback(prompt: str, sample_index: int) -> str:
    """Deterministic one-token comparison verdict for judge-style prompts.

    Biased toward first-position wins so double-pass runs on mock data yield
    a mix of agreements and disagreements rather than near-constant ties.
    """
    return ("A", "A", "B", "tie")[int(_unit_hash("verdict", prompt) * 4)]


FALLBACK_STYLES: dict[str, Callable[[str, int], str]] = {
    "echo": echo_fallback,
    "verdict": verdict_fallback,
}


@dataclass
class MockBackend:
    """Backend whose outputs are a pure function of the request.

    ``script`` maps :func:`prompt_fingerprint` values to canned output lists;
    unscripted prompts fall through to ``fallback(prompt, sample_index)``
    (sample_index is -1 for greedy decodes).
    """

    script: dict[str, list[str]] = field(default_factory=dict)
    fallback: Callable[[str, int], str] = echo_fallback
    backend_id: str = "mock"
    max_parallel: int = DEFAULT_MAX_PARALLEL

    def complete(self, req: GenerationRequest) -> list[str]:
        fp = prompt_fingerprint(req.system_prompt, req.user_prompt)
        canned = self.script.get(fp)
        if canned:
            return [canned[i % len(canned)] for i in range(req.n_samples)]
        prompt = f"{req.system_prompt}\n{req.user_prompt}" if req.system_prompt else req.user_prompt
        if req.decoding == GREEDY:
            return [self.fallback(prompt, -1)]
        return [self.fallback(prompt, i) for i in range(req.n_samples)]


# ---------------------------------------------------------------------------
# Remote chat-completion backend
# ---------------------------------------------------------------------------


class HttpChatBackend:
    """Client for a chat-completion-style HTTP endpoint.

    POSTs ``{base_url}/chat/completions`` with
    ``{"model", "messages", "max_tokens", "n", "temperature"}`` and expects
    OpenAI-style ``{"choices": [{"message": {"content": ...}}, ...]}``.
    Greedy decoding is requested as temperature 0.  Transport errors and
    5xx responses are retried with exponential backoff; other failures
    surface immediately as content errors.
    """

    def __init__(
        self,
        base_url: str,
        model: str,
        *,
        auth_env: str = "FORGE_API_TOKEN",
        max_parallel: int = DEFAULT_MAX_PARALLEL,
        max_retries: int = DEFAULT_MAX_RETRIES,
        timeout: float = 120.0,
        backoff_base: float = 0.5,
        session: requests.Session | None = None,
    ):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.auth_env = auth_env
        self.max_parallel = max_parallel
        self.max_retries = max_retries
        self.timeout = timeout
        self.backoff_base = backoff_base
        self._session = session or requests.Session()
        self.backend_id = f"http:{model}@{self.base_url}"

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.auth_env, "")
        if token:
            headers["Authorization"] = f"Bearer {token}"
        return headers

    def complete(self, req: GenerationRequest) -> list[str]:
        messages = []
        if req.system_prompt:
            messages.append({"role": "system", "content": req.system_prompt})
        messages.append({"role": "user", "content": req.user_prompt})
        payload = {
            "model": self.model,
            "messages": messages,
            "max_tokens": req.max_tokens,
            "n": req.n_samples,
            "temperature": 0.0 if req.decoding == GREEDY else req.temperature,
        }
        url = f"{self.base_url}/chat/completions"
        last_error: Exception | None = None
        for attempt in range(self.max_retries):
            if attempt:
                time.sleep(min(self.backoff_base * 2 ** (attempt - 1), 8.0))
            try:
                resp = self._session.post(url, json=payload, headers=self._headers(), timeout=self.timeout)
            except requests.RequestException as exc:
                last_error = exc
                logger.warning("transport failure from %s (attempt %d): %s", url, attempt + 1, exc)
                continue
            if resp.status_code >= 500:
                last_error = TransportError(f"{url} answered {resp.status_code}")
                logger.warning("server failure from %s (attempt %d): %s", url, attempt + 1, resp.status_code)
                continue
            if resp.status_code != 200:
                raise ContentError(
                    f"{url} refused the request with status {resp.status_code}", raw_response=resp.text
                )
            return self._parse(resp, req)
        raise TransportError(
            f"{url} unreachable after {self.max_retries} attempts: {last_error}"
        ) from last_error

    def _parse(self, resp, req: GenerationRequest) -> list[str]:
        try:
            body = resp.json()
            texts = [choice["message"]["content"] for choice in body["choices"]]
        except (ValueError, KeyError, TypeError) as exc:
            raise ContentError(f"malformed completion payload: {exc}", raw_response=resp.text) from exc
        if len(texts) != req.n_samples or any(not isinstance(t, str) or not t.strip() for t in texts):
            raise ContentError("backend returned empty or missing completions", raw_response=body)
        return texts


def load_script(path) -> dict[str, list[str]]:
    """Load a mock-backend script file: JSONL of {fingerprint, texts}."""
    import json

    script: dict[str, list[str]] = {}
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            script[rec["fingerprint"]] = list(rec["texts"])
    if not script:
        raise ForgeError(f"mock script {path} is empty")
    return script
