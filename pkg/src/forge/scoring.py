"""Contradiction scorers: the pairwise primitive behind both filters.

A scorer maps a (premise, hypothesis) pair to the probability that the
hypothesis contradicts the premise, in [0, 1].  NLI contradiction is
asymmetric, so callers fix the direction: the premise is always the
reference answer, the hypothesis the answer being compared against it.
"""

from __future__ import annotations

import hashlib
import re
import time
from typing import Protocol

import requests

from .cache import AppendOnlyCache
from .errors import ScorerError

_WORD_RE = re.compile(r"[\w']+")

DEFAULT_NLI_MODEL = "deberta-v3-large-mnli"


class ContradictionScorer(Protocol):
    scorer_id: str

    def score(self, premise: str, hypothesis: str) -> float: ...


class LexicalOverlapScorer:
    """Deterministic test-double scorer: one minus token-set Jaccard overlap.

    Identical texts score 0, disjoint texts 1.  Good enough to exercise the
    filtering machinery hermetically; not a semantic judgment.
    """

    scorer_id = "lexical-jaccard"

    def score(self, premise: str, hypothesis: str) -> float:
        a = set(_WORD_RE.findall(premise.lower()))
        b = set(_WORD_RE.findall(hypothesis.lower()))
        if not a and not b:
            return 0.0
        union = len(a | b)
        jaccard = len(a & b) / union if union else 0.0
        return min(1.0, max(0.0, 1.0 - jaccard))


class HttpNliScorer:
    """Client for a scoring service wrapping an MNLI-trained cross-encoder.

    POSTs ``{base_url}/score`` with ``{"model": ..., "pairs": [[premise,
    hypothesis], ...]}`` and expects ``{"contradiction": [p, ...]}`` with
    each p in [0, 1].  Transport failures and 5xx responses are retried with
    exponential backoff.
    """

    def __init__(
        self,
        base_url: str,
        model: str = DEFAULT_NLI_MODEL,
        *,
        max_retries: int = 5,
        timeout: float = 60.0,
        backoff_base: float = 0.5,
        session: requests.Session | None = None,
    ):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.max_retries = max_retries
        self.timeout = timeout
        self.backoff_base = backoff_base
        self._session = session or requests.Session()
        self.scorer_id = f"nli-http:{model}@{self.base_url}"

    def score(self, premise: str, hypothesis: str) -> float:
        url = f"{self.base_url}/score"
        payload = {"model": self.model, "pairs": [[premise, hypothesis]]}
        last_error = None
        for attempt in range(self.max_retries):
            if attempt:
                time.sleep(min(self.backoff_base * 2 ** (attempt - 1), 8.0))
            try:
                resp = self._session.post(url, json=payload, timeout=self.timeout)
            except requests.RequestException as exc:
                last_error = exc
                continue
            if resp.status_code >= 500:
                last_error = ScorerError(f"{url} answered {resp.status_code}")
                continue
            if resp.status_code != 200:
                raise ScorerError(f"{url} refused the request with status {resp.status_code}: {resp.text}")
            return self._parse(resp)
        raise ScorerError(f"{url} unreachable after {self.max_retries} attempts: {last_error}")

    def _parse(self, resp) -> float:
        try:
            value = float(resp.json()["contradiction"][0])
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise ScorerError(f"malformed scorer payload: {exc}") from exc
        if not 0.0 <= value <= 1.0:
            raise ScorerError(f"scorer returned {value}, outside [0, 1]")
        return value


class CachedScorer:
    """Memoizes a scorer per (scorer_id, premise hash, hypothesis hash).

    With a path, entries persist to an append-only log so repeated pipeline
    runs never re-score a pair.
    """

    def __init__(self, base: ContradictionScorer, path=None):
        self.base = base
        self.scorer_id = base.scorer_id
        self._cache = AppendOnlyCache(path, format_name="forge-score-cache")

    def _key(self, premise: str, hypothesis: str) -> str:
        ph = hashlib.sha256(premise.encode("utf-8")).hexdigest()
        hh = hashlib.sha256(hypothesis.encode("utf-8")).hexdigest()
        return hashlib.sha256(f"{self.scorer_id}\x1e{ph}\x1e{hh}".encode("utf-8")).hexdigest()

    def score(self, premise: str, hypothesis: str) -> float:
        key = self._key(premise, hypothesis)
        hit = self._cache.get(key)
        if hit is not None:
            return float(hit)
        value = self.base.score(premise, hypothesis)
        return float(self._cache.put(key, float(value)))


_SENTENCE_RE = re.compile(r"(?<=[.!?])\s+")


class SentenceMaxScorer:
    """Optional finer granularity: split the hypothesis into sentences, score
    each against the premise, and report the maximum contradiction."""

    def __init__(self, base: ContradictionScorer):
        self.base = base
        self.scorer_id = f"{base.scorer_id}+sentmax"

    def score(self, premise: str, hypothesis: str) -> float:
        sentences = [s for s in _SENTENCE_RE.split(hypothesis.strip()) if s]
        if not sentences:
            return self.base.score(premise, hypothesis)
        return max(self.base.score(premise, s) for s in sentences)
