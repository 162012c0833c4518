"""Prompt templates for generation, annotation, and judging.

Placeholders are filled by literal splicing, never by ``str.format``, so
embedded document text cannot inject or break template structure (braces and
placeholder-lookalikes in values pass through verbatim).
"""

from __future__ import annotations

import re

from .records import sha256_hex

_PLACEHOLDER_RE = re.compile(r"\{(\w+)\}")


def _fill(template: str, values: dict[str, str]) -> str:
    out = []
    last = 0
    for m in _PLACEHOLDER_RE.finditer(template):
        out.append(template[last : m.start()])
        out.append(values[m.group(1)])
        last = m.end()
    out.append(template[last:])
    return "".join(out)


INSTRUCTION_TEMPLATE = (
    "Propose a single question regarding the topic of {topic}, whose corresponding answer "
    "can be found in the given document.\n"
    "The question must be detailed and objective, whose corresponding answer should be "
    "non-debatable and be found in the given document.\n"
    "The proposed question must not mention the existence of the document, but should "
    "mention the topic, {topic}.\n"
    "Document: {document}\n"
    "Proposed question:"
)

GROUNDED_ANSWER_TEMPLATE = (
    "Read the document provided and use the relevant information to answer the question carefully.\n"
    "It is important that you must not explicitly mention the document's existence, while "
    "ensuring that your response is factual and relevant according to the document.\n"
    "Ensure your answer is well-structured according to the question.\n"
    "Document: {document}\n"
    "Question: {instruction}\n"
    "Answer:"
)

PLAIN_ANSWER_TEMPLATE = "Question: {instruction}\nAnswer:"

JUDGE_SYSTEM_PROMPT = "You are a careful evaluator comparing two responses for truthfulness."

JUDGE_TEMPLATE = (
    "Compare the two responses to the question based on their truthfulness with respect "
    "to the document.\n"
    "\n"
    "Document: {document}\n"
    "Question: {instruction}\n"
    "Response A: {first}\n"
    "Response B: {second}\n"
    "\n"
    "Which response is more truthful with respect to the document? "
    "Reply with exactly one token: A, B, or tie."
)

JUDGE_STRICT_SUFFIX = "\nYour entire reply must be exactly one of: A, B, tie. Do not explain."


def instruction_prompt(topic: str, document: str, few_shot=()) -> tuple[str, str]:
    """(system, user) prompt asking for a single document-grounded question.

    ``few_shot`` holds {chunk, question} example pairs, prepended as
    document/question blocks.
    """
    blocks = [
        _fill("Document: {chunk}\nProposed question: {question}", dict(ex))
        for ex in few_shot
    ]
    blocks.append(_fill(INSTRUCTION_TEMPLATE, {"topic": topic, "document": document}))
    return "", "\n\n".join(blocks)


def grounded_answer_prompt(document: str, instruction: str) -> tuple[str, str]:
    """(system, user) prompt answering with the document as context."""
    return "", _fill(GROUNDED_ANSWER_TEMPLATE, {"document": document, "instruction": instruction})


def plain_answer_prompt(instruction: str, few_shot=()) -> tuple[str, str]:
    """(system, user) prompt answering from model knowledge alone.

    ``few_shot`` holds {question, answer} example pairs.
    """
    blocks = [
        _fill("Question: {question}\nAnswer: {answer}", dict(ex))
        for ex in few_shot
    ]
    blocks.append(_fill(PLAIN_ANSWER_TEMPLATE, {"instruction": instruction}))
    return "", "\n\n".join(blocks)


def judge_prompt(document: str, instruction: str, first: str, second: str, attempt: int = 0) -> tuple[str, str]:
    """(system, user) pairwise comparison prompt; retries append a stricter suffix."""
    user = _fill(
        JUDGE_TEMPLATE,
        {"document": document, "instruction": instruction, "first": first, "second": second},
    )
    if attempt > 0:
        user += JUDGE_STRICT_SUFFIX * attempt
    return JUDGE_SYSTEM_PROMPT, user


# Built-in few-shot examples, used when the config names no example file.
# Instruction generation needs {chunk, question} pairs; self-annotation needs
# {question, answer} pairs to anchor the output format.
DEFAULT_INSTRUCTION_EXAMPLES = (
    {
        "chunk": (
            "Mount Kilimanjaro is the highest mountain in Africa, rising about 5,895 "
            "metres above sea level. It is a dormant volcano in Tanzania whose last "
            "major eruption happened around 360,000 years ago."
        ),
        "question": "How tall is Mount Kilimanjaro, the highest mountain in Africa?",
    },
    {
        "chunk": (
            "The Baroque composer Antonio Vivaldi wrote The Four Seasons, a set of "
            "four violin concertos first published in 1725, each paired with a sonnet "
            "describing its season."
        ),
        "question": "In which year was Antonio Vivaldi's The Four Seasons first published?",
    },
)

DEFAULT_ANSWER_EXAMPLES = (
    {
        "question": "What is the boiling point of water at sea level?",
        "answer": "Water boils at 100 degrees Celsius (212 degrees Fahrenheit) at sea level.",
    },
    {
        "question": "Who wrote the novel Moby-Dick?",
        "answer": "Moby-Dick was written by the American author Herman Melville and published in 1851.",
    },
)


def template_fingerprints() -> dict[str, str]:
    """Stable hashes of every template, recorded in dataset sidecars."""
    return {
        "instruction": sha256_hex(INSTRUCTION_TEMPLATE),
        "grounded_answer": sha256_hex(GROUNDED_ANSWER_TEMPLATE),
        "plain_answer": sha256_hex(PLAIN_ANSWER_TEMPLATE),
        "judge": sha256_hex(JUDGE_SYSTEM_PROMPT + "\n" + JUDGE_TEMPLATE),
    }
