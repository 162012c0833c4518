"""Assembly of the SFT training mixture: self-annotated answers plus
teacher-labeled reading-comprehension answers with the source chunk in the
prompt."""

from __future__ import annotations

import logging
import random
from dataclasses import dataclass

from . import prompts
from .corpus import DocumentChunk
from .errors import BackendError, ForgeError
from .gateway import GenerationRequest, GREEDY, generate_settled
from .instructions import FORBIDDEN_MENTIONS, InstructionRecord

logger = logging.getLogger(__name__)

SOURCE_SELF = "self_annotated"
SOURCE_RC = "teacher_rc"

DEFAULT_RC_FRACTION = 1.0 / 3.0


@dataclass(frozen=True)
class SftExample:
    instr_id: str
    instruction: str
    response: str
    source: str  # SOURCE_SELF or SOURCE_RC
    document: str | None = None

    def __post_init__(self):
        if not self.response:
            raise ValueError(f"{self.instr_id}: empty response")
        if (self.source == SOURCE_RC) != (self.document is not None):
            raise ValueError(f"{self.instr_id}: document must be present exactly for {SOURCE_RC}")

    def to_record(self) -> dict:
        rec = {
            "instr_id": self.instr_id,
            "instruction": self.instruction,
            "response": self.response,
            "source": self.source,
        }
        if self.document is not None:
            rec["document"] = self.document
        return rec


@dataclass
class AnnotateStats:
    requested: int = 0
    annotated: int = 0
    skipped_backend_failures: int = 0
    document_mentions: int = 0

    def to_record(self) -> dict:
        return {
            "requested": self.requested,
            "annotated": self.annotated,
            "skipped_backend_failures": self.skipped_backend_failures,
            "document_mentions": self.document_mentions,
        }


def split_for_rc(
    instructions: list[InstructionRecord], rc_fraction: float, seed: int
) -> tuple[list[InstructionRecord], list[InstructionRecord]]:
    """Seeded disjoint partition into (reading-comprehension set, self-annotation set).

    The RC side gets ``round(rc_fraction * len(instructions))`` items; both
    sides keep the input's relative order.
    """
    if not 0.0 <= rc_fraction <= 1.0:
        raise ValueError(f"rc_fraction must be in [0, 1], got {rc_fraction}")
    n_rc = round(rc_fraction * len(instructions))
    indices = list(range(len(instructions)))
    random.Random(f"{seed}:rc-split").shuffle(indices)
    rc_indices = set(indices[:n_rc])
    rc_set = [rec for i, rec in enumerate(instructions) if i in rc_indices]
    sft_set = [rec for i, rec in enumerate(instructions) if i not in rc_indices]
    return rc_set, sft_set


def self_annotate(
    sft_set: list[InstructionRecord],
    backend,
    few_shot,
    *,
    max_tokens: int = 512,
    cache=None,
) -> tuple[list[SftExample], AnnotateStats]:
    """Greedy-decode one answer per instruction from the model being trained.

    No document is shown: answers reflect only pre-training knowledge.
    ``few_shot`` must be non-empty — without format examples a raw
    pre-trained model degenerates.  Per-item backend failures are logged and
    skipped; output is sorted by instr_id.
    """
    few_shot = tuple(few_shot)
    if not few_shot:
        raise ValueError("self-annotation requires at least one few-shot example")
    stats = AnnotateStats(requested=len(sft_set))
    reqs = {}
    for rec in sft_set:
        system, user = prompts.plain_answer_prompt(rec.text, few_shot)
        reqs[rec.instr_id] = GenerationRequest(
            system_prompt=system,
            user_prompt=user,
            max_tokens=max_tokens,
            decoding=GREEDY,
            request_tag=f"sft-self:{rec.instr_id}",
        )
    results = generate_settled(backend, reqs, cache)
    examples = []
    for rec in sft_set:
        result = results[rec.instr_id]
        if isinstance(result, BackendError):
            logger.warning("self-annotation failed for %s: %s", rec.instr_id, result)
            stats.skipped_backend_failures += 1
            continue
        examples.append(
            SftExample(
                instr_id=rec.instr_id,
                instruction=rec.text,
                response=result.texts[0].strip(),
                source=SOURCE_SELF,
            )
        )
    stats.annotated = len(examples)
    examples.sort(key=lambda ex: ex.instr_id)
    return examples, stats


def chunk_index_map(chunks: list[DocumentChunk]) -> dict[tuple[str, int], DocumentChunk]:
    return {(c.doc_id, c.chunk_index): c for c in chunks}


def teacher_rc_annotate(
    rc_set: list[InstructionRecord],
    backend,
    chunks: list[DocumentChunk],
    *,
    max_tokens: int = 512,
    cache=None,
) -> tuple[list[SftExample], AnnotateStats]:
    """Label the RC split with a teacher backend, document chunk in the prompt.

    A missing source chunk is a hard referential-integrity error naming the
    instruction.  Teacher answers that mention the document are counted in
    the stats but retained.
    """
    lookup = chunk_index_map(chunks)
    stats = AnnotateStats(requested=len(rc_set))
    reqs = {}
    docs = {}
    for rec in rc_set:
        chunk = lookup.get((rec.doc_id, rec.chunk_index))
        if chunk is None:
            raise ForgeError(
                f"instruction {rec.instr_id}: source chunk ({rec.doc_id}, {rec.chunk_index}) not found"
            )
        docs[rec.instr_id] = chunk.text
        system, user = prompts.grounded_answer_prompt(chunk.text, rec.text)
        reqs[rec.instr_id] = GenerationRequest(
            system_prompt=system,
            user_prompt=user,
            max_tokens=max_tokens,
            decoding=GREEDY,
            request_tag=f"sft-rc:{rec.instr_id}",
        )
    results = generate_settled(backend, reqs, cache)
    examples = []
    for rec in rc_set:
        result = results[rec.instr_id]
        if isinstance(result, BackendError):
            logger.warning("teacher annotation failed for %s: %s", rec.instr_id, result)
            stats.skipped_backend_failures += 1
            continue
        response = result.texts[0].strip()
        if any(m in response.lower() for m in FORBIDDEN_MENTIONS):
            stats.document_mentions += 1
        examples.append(
            SftExample(
                instr_id=rec.instr_id,
                instruction=rec.text,
                response=response,
                source=SOURCE_RC,
                document=docs[rec.instr_id],
            )
        )
    stats.annotated = len(examples)
    examples.sort(key=lambda ex: ex.instr_id)
    return examples, stats


# Hyperparameters recommended for the exported datasets when an external
# trainer consumes them; keyed by model-scale bucket.
RECOMMENDED_HPARAMS = {
    "sft": {
        "learning_rate": {"~1B": 2e-5, "7B-13B": 1e-5},
        "early_stopping": True,
    },
    "preference_tuning": {
        "method": "dpo",
        "beta": 0.3,
        "total_steps": 300,
        "batch_size": 32,
        "learning_rate": {"~1B": 1e-6, "7B-13B": 5e-7},
    },
}
