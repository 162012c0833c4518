"""Self-training data curation toolkit.

Turns a topic-organized document corpus into a filtered preference dataset:
instruction generation from document chunks, SFT mixture assembly,
preference-candidate bundling, consistency/knowledge filtering, a desk-scale
verification of the preference-optimization numerics, and a pairwise
LLM-judge evaluation harness.
"""

from .errors import (
    BackendError,
    ConfigError,
    ContentError,
    CorpusError,
    ForgeError,
    PrerequisiteError,
    ScorerError,
    TransportError,
)

__version__ = "0.1.0"

__all__ = [
    "BackendError",
    "ConfigError",
    "ContentError",
    "CorpusError",
    "ForgeError",
    "PrerequisiteError",
    "ScorerError",
    "TransportError",
    "__version__",
]
