"""Per-instruction candidate bundles for preference tuning.

For every instruction the tuned model produces one greedy document-grounded
reference answer, K sampled document-grounded answers, and K sampled answers
without the document.  The no-context mode builds a single set of K
ungrounded samples instead.  No few-shot examples are included at this
stage.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

from . import prompts
from .corpus import DocumentChunk
from .errors import BackendError, ForgeError
from .gateway import GenerationRequest, GREEDY, SAMPLE, generate_settled
from .instructions import InstructionRecord
from .sft import chunk_index_map

logger = logging.getLogger(__name__)

DEFAULT_K = 10
DEFAULT_MAX_TOKENS = 512


@dataclass(frozen=True)
class PreferenceCandidate:
    """Bundle of candidate answers awaiting filtering.

    ``grounded_reference`` is the greedy decode with the chunk in the prompt;
    ``grounded_samples`` / ``ungrounded_samples`` are the K sampled decodes
    with and without it.
    """

    instr_id: str
    instruction: str
    chunk: str
    grounded_reference: str
    grounded_samples: tuple[str, ...]
    ungrounded_samples: tuple[str, ...]

    def __post_init__(self):
        if not self.grounded_reference:
            raise ValueError(f"{self.instr_id}: empty grounded reference")
        if len(self.grounded_samples) != len(self.ungrounded_samples):
            raise ValueError(
                f"{self.instr_id}: sample sets differ in size "
                f"({len(self.grounded_samples)} vs {len(self.ungrounded_samples)})"
            )

    @property
    def k(self) -> int:
        return len(self.grounded_samples)

    def to_record(self) -> dict:
        return {
            "instr_id": self.instr_id,
            "instruction": self.instruction,
            "chunk": self.chunk,
            "y_c_star": self.grounded_reference,
            "Y_c": list(self.grounded_samples),
            "Y_r": list(self.ungrounded_samples),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "PreferenceCandidate":
        return cls(
            instr_id=rec["instr_id"],
            instruction=rec["instruction"],
            chunk=rec["chunk"],
            grounded_reference=rec["y_c_star"],
            grounded_samples=tuple(rec["Y_c"]),
            ungrounded_samples=tuple(rec["Y_r"]),
        )


@dataclass(frozen=True)
class AblationCandidate:
    """No-context bundle: a single set of K ungrounded samples."""

    instr_id: str
    instruction: str
    samples: tuple[str, ...]

    @property
    def k(self) -> int:
        return len(self.samples)

    def to_record(self) -> dict:
        return {"instr_id": self.instr_id, "instruction": self.instruction, "Y": list(self.samples)}

    @classmethod
    def from_record(cls, rec: dict) -> "AblationCandidate":
        return cls(rec["instr_id"], rec["instruction"], tuple(rec["Y"]))


def build_candidates(
    instructions: list[InstructionRecord],
    chunks: list[DocumentChunk],
    backend,
    k: int = DEFAULT_K,
    temperature: float = 1.0,
    *,
    max_tokens: int = DEFAULT_MAX_TOKENS,
    cache=None,
) -> tuple[list[PreferenceCandidate], dict]:
    """Build the 1 + K + K answer bundle per instruction.

    All requests for an instruction go through the gateway pool together;
    items whose backend calls fail are dropped with a logged reason.  A
    missing source chunk violates referential integrity and raises.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    lookup = chunk_index_map(chunks)
    reqs = {}
    chunk_texts = {}
    for rec in instructions:
        chunk = lookup.get((rec.doc_id, rec.chunk_index))
        if chunk is None:
            raise ForgeError(
                f"instruction {rec.instr_id}: source chunk ({rec.doc_id}, {rec.chunk_index}) not found"
            )
        chunk_texts[rec.instr_id] = chunk.text
        g_system, g_user = prompts.grounded_answer_prompt(chunk.text, rec.text)
        p_system, p_user = prompts.plain_answer_prompt(rec.text)
        reqs[(rec.instr_id, "ref")] = GenerationRequest(
            system_prompt=g_system,
            user_prompt=g_user,
            max_tokens=max_tokens,
            decoding=GREEDY,
            request_tag=f"pref:{rec.instr_id}:ref",
        )
        reqs[(rec.instr_id, "ctx")] = GenerationRequest(
            system_prompt=g_system,
            user_prompt=g_user,
            temperature=temperature,
            max_tokens=max_tokens,
            n_samples=k,
            decoding=SAMPLE,
            request_tag=f"pref:{rec.instr_id}:ctx",
        )
        reqs[(rec.instr_id, "noctx")] = GenerationRequest(
            system_prompt=p_system,
            user_prompt=p_user,
            temperature=temperature,
            max_tokens=max_tokens,
            n_samples=k,
            decoding=SAMPLE,
            request_tag=f"pref:{rec.instr_id}:noctx",
        )
    results = generate_settled(backend, reqs, cache)

    candidates = []
    dropped = 0
    for rec in instructions:
        parts = {role: results[(rec.instr_id, role)] for role in ("ref", "ctx", "noctx")}
        bad = {role: r for role, r in parts.items() if isinstance(r, BackendError)}
        if bad:
            logger.warning("dropping %s: backend failure on %s", rec.instr_id, sorted(bad))
            dropped += 1
            continue
        candidates.append(
            PreferenceCandidate(
                instr_id=rec.instr_id,
                instruction=rec.text,
                chunk=chunk_texts[rec.instr_id],
                grounded_reference=parts["ref"].texts[0].strip(),
                grounded_samples=tuple(t.strip() for t in parts["ctx"].texts),
                ungrounded_samples=tuple(t.strip() for t in parts["noctx"].texts),
            )
        )
    candidates.sort(key=lambda c: c.instr_id)
    return candidates, {"requested": len(instructions), "built": len(candidates), "dropped": dropped}


def build_ablation_candidates(
    instructions: list[InstructionRecord],
    backend,
    k: int = DEFAULT_K,
    temperature: float = 1.0,
    *,
    max_tokens: int = DEFAULT_MAX_TOKENS,
    cache=None,
) -> tuple[list[AblationCandidate], dict]:
    """Build K ungrounded samples per instruction (no-context mode).

    Requires ``k >= 2``: a most- and least-consistent sample must be
    distinguishable downstream.
    """
    if k < 2:
        raise ValueError(f"no-context bundles need k >= 2 to pick a preferred and dispreferred sample, got {k}")
    reqs = {}
    for rec in instructions:
        system, user = prompts.plain_answer_prompt(rec.text)
        reqs[rec.instr_id] = GenerationRequest(
            system_prompt=system,
            user_prompt=user,
            temperature=temperature,
            max_tokens=max_tokens,
            n_samples=k,
            decoding=SAMPLE,
            request_tag=f"pref-ablation:{rec.instr_id}",
        )
    results = generate_settled(backend, reqs, cache)
    candidates = []
    dropped = 0
    for rec in instructions:
        result = results[rec.instr_id]
        if isinstance(result, BackendError):
            logger.warning("dropping %s: %s", rec.instr_id, result)
            dropped += 1
            continue
        candidates.append(
            AblationCandidate(
                instr_id=rec.instr_id,
                instruction=rec.text,
                samples=tuple(t.strip() for t in result.texts),
            )
        )
    candidates.sort(key=lambda c: c.instr_id)
    return candidates, {"requested": len(instructions), "built": len(candidates), "dropped": dropped}
