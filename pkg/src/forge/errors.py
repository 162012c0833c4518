"""Exception types shared across the pipeline."""

from __future__ import annotations


class ForgeError(Exception):
    """Base class for all pipeline errors."""


class ConfigError(ForgeError):
    """Invalid or incomplete pipeline configuration.

    Carries the full list of problems so callers can report them all at once.
    """

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class CorpusError(ForgeError):
    """Corpus cannot be ingested as requested."""


class BackendError(ForgeError):
    """A text-generation or scoring backend failed."""


class TransportError(BackendError):
    """Transport-level failure (network, 5xx); retried before surfacing."""


class ContentError(BackendError):
    """The backend answered but the content is unusable (refusal, empty output)."""

    def __init__(self, message, raw_response=None):
        super().__init__(message)
        self.raw_response = raw_response


class ScorerError(ForgeError):
    """Contradiction scorer failed on a pair."""


class PrerequisiteError(ForgeError):
    """A pipeline stage was invoked before its input artifacts exist."""
