"""Instruction generation, validation, and per-document de-duplication."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field

from . import prompts
from .corpus import DocumentChunk, SourceDocument
from .errors import BackendError
from .gateway import GenerationRequest, SAMPLE, generate_settled

logger = logging.getLogger(__name__)

FORBIDDEN_MENTIONS = ("the document", "the passage", "the text above", "provided document")

DEFAULT_MAX_ATTEMPTS = 3


@dataclass(frozen=True)
class InstructionRecord:
    instr_id: str
    doc_id: str
    chunk_index: int
    topic: str
    text: str
    attempts_used: int = 1

    def to_record(self) -> dict:
        return {
            "instr_id": self.instr_id,
            "doc_id": self.doc_id,
            "chunk_index": self.chunk_index,
            "topic": self.topic,
            "text": self.text,
            "attempts_used": self.attempts_used,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "InstructionRecord":
        return cls(
            rec["instr_id"],
            rec["doc_id"],
            rec["chunk_index"],
            rec["topic"],
            rec["text"],
            rec.get("attempts_used", 1),
        )


@dataclass
class YieldStats:
    attempted: int = 0
    accepted: int = 0
    rejected_validation: int = 0
    duplicates_removed: int = 0
    backend_failures: int = 0
    topic_warnings: int = 0

    @property
    def yield_rate(self) -> float:
        return self.accepted / self.attempted if self.attempted else 0.0

    def to_record(self) -> dict:
        return {
            "attempted": self.attempted,
            "accepted": self.accepted,
            "rejected_validation": self.rejected_validation,
            "duplicates_removed": self.duplicates_removed,
            "backend_failures": self.backend_failures,
            "topic_warnings": self.topic_warnings,
            "yield_rate": self.yield_rate,
        }


def validate_instruction(text: str, topic: str) -> tuple[bool, str | None]:
    """Pure validity predicate plus an optional non-fatal warning.

    Rejects blank candidates, candidates holding more than one question, and
    candidates that mention the source document.  A missing topic word is
    only a warning: rejecting on it would over-filter.
    """
    if not text.strip():
        return False, None
    if text.count("?") > 1:
        return False, None
    lowered = text.lower()
    if any(m in lowered for m in FORBIDDEN_MENTIONS):
        return False, None
    warning = None
    if topic.lower() not in lowered:
        warning = "topic-missing"
    return True, warning


def normalize_instruction(text: str) -> str:
    """Canonical form for exact-match de-duplication."""
    collapsed = re.sub(r"\s+", " ", text.strip().lower())
    return collapsed.rstrip(".?! ")


def dedup_instructions(records: list[InstructionRecord]) -> list[InstructionRecord]:
    """Keep the first record per (doc_id, normalized text); idempotent.

    The same question appearing under two different documents is kept twice:
    duplicates are only removed within a document.
    """
    seen: set[tuple[str, str]] = set()
    out = []
    for rec in records:
        key = (rec.doc_id, normalize_instruction(rec.text))
        if key in seen:
            continue
        seen.add(key)
        out.append(rec)
    return out


def _round_robin_chunk(chunks: list[DocumentChunk], slot: int) -> DocumentChunk:
    return chunks[slot % len(chunks)]


def generate_instructions(
    documents: list[SourceDocument],
    chunks: list[DocumentChunk],
    backend,
    n_per_doc: int,
    *,
    max_attempts: int = DEFAULT_MAX_ATTEMPTS,
    few_shot=(),
    temperature: float = 1.0,
    max_tokens: int = 128,
    cache=None,
    id_prefix: str = "",
) -> tuple[list[InstructionRecord], YieldStats]:
    """Generate up to ``n_per_doc`` validated instructions per document.

    Question slots are assigned round-robin over a document's chunks; each
    slot is retried up to ``max_attempts`` times before being dropped.
    Retries run in waves so slots share the gateway's bounded pool.  Backend
    failures are counted per slot and never abort the run.  Output is
    de-duplicated per document and sorted by instr_id.
    """
    if n_per_doc < 1:
        raise ValueError(f"n_per_doc must be >= 1, got {n_per_doc}")
    few_shot = tuple(few_shot)
    stats = YieldStats()
    chunks_by_doc: dict[str, list[DocumentChunk]] = {}
    for chunk in chunks:
        chunks_by_doc.setdefault(chunk.doc_id, []).append(chunk)
    for doc_chunks in chunks_by_doc.values():
        doc_chunks.sort(key=lambda c: c.chunk_index)

    # (doc_id, slot) -> pending chunk; resolved slots drop out of later waves
    pending: dict[tuple[str, int], tuple[SourceDocument, DocumentChunk]] = {}
    for doc in documents:
        doc_chunks = chunks_by_doc.get(doc.doc_id, [])
        if not doc_chunks:
            logger.warning("document %s has no chunks; skipping", doc.doc_id)
            continue
        for slot in range(n_per_doc):
            pending[(doc.doc_id, slot)] = (doc, _round_robin_chunk(doc_chunks, slot))

    accepted: dict[tuple[str, int], InstructionRecord] = {}
    for attempt in range(max_attempts):
        if not pending:
            break
        reqs = {}
        for (doc_id, slot), (doc, chunk) in pending.items():
            system, user = prompts.instruction_prompt(doc.topic, chunk.text, few_shot)
            reqs[(doc_id, slot)] = GenerationRequest(
                system_prompt=system,
                user_prompt=user,
                temperature=temperature,
                max_tokens=max_tokens,
                n_samples=1,
                decoding=SAMPLE,
                request_tag=f"instr:{doc_id}:{chunk.chunk_index}:slot{slot}:try{attempt}",
            )
        generated = generate_settled(backend, reqs, cache)
        for key, result in generated.items():
            doc, chunk = pending[key]
            if isinstance(result, BackendError):
                logger.warning("instruction generation failed for %s: %s", key, result)
                stats.backend_failures += 1
                del pending[key]
                continue
            text = result.texts[0].strip()
            stats.attempted += 1
            ok, warning = validate_instruction(text, doc.topic)
            if warning:
                stats.topic_warnings += 1
            if ok:
                doc_id, slot = key
                accepted[key] = InstructionRecord(
                    instr_id=f"{id_prefix}{doc_id}:q{slot:02d}",
                    doc_id=doc_id,
                    chunk_index=chunk.chunk_index,
                    topic=doc.topic,
                    text=text,
                    attempts_used=attempt + 1,
                )
                del pending[key]
            else:
                stats.rejected_validation += 1
                if attempt == max_attempts - 1:
                    del pending[key]

    records = [accepted[key] for key in sorted(accepted)]
    deduped = dedup_instructions(records)
    stats.duplicates_removed = len(records) - len(deduped)
    stats.accepted = len(deduped)
    return deduped, stats
