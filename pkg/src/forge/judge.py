"""Pairwise truthfulness evaluation with a double-pass tie rule.

Every item is judged twice: the second pass presents the responses in
swapped positions as a positional-bias control, and its parsed verdict is
mapped back to the original roles.  A final winner is declared only when
both passes agree; any disagreement is a tie.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

from . import prompts
from .errors import BackendError
from .gateway import GenerationRequest, GREEDY, generate

logger = logging.getLogger(__name__)

VERDICT_A = "A"
VERDICT_B = "B"
VERDICT_TIE = "tie"
_VERDICTS = (VERDICT_A, VERDICT_B, VERDICT_TIE)

FINAL_A = "A_wins"
FINAL_B = "B_wins"
FINAL_TIE = "tie"

PARSE_RETRIES = 2  # re-prompts after the first unparseable reply


@dataclass(frozen=True)
class JudgeVerdict:
    instr_id: str
    first_pass: str
    second_pass: str
    final: str
    parse_failed: bool = False

    def to_record(self) -> dict:
        return {
            "instr_id": self.instr_id,
            "first_pass": self.first_pass,
            "second_pass": self.second_pass,
            "final": self.final,
            "parse_failed": self.parse_failed,
        }


@dataclass(frozen=True)
class WtlSummary:
    win: int
    tie: int
    lose: int

    @property
    def total(self) -> int:
        return self.win + self.tie + self.lose

    @property
    def win_rate(self) -> float:
        return self.win / self.total

    @property
    def tie_rate(self) -> float:
        return self.tie / self.total

    @property
    def lose_rate(self) -> float:
        return self.lose / self.total

    def to_record(self) -> dict:
        return {
            "win": self.win,
            "tie": self.tie,
            "lose": self.lose,
            "total": self.total,
            "win_rate": self.win_rate,
            "tie_rate": self.tie_rate,
            "lose_rate": self.lose_rate,
        }


@dataclass(frozen=True)
class JudgeItem:
    instr_id: str
    instruction: str
    document: str
    response_a: str
    response_b: str


def parse_verdict(text: str) -> str | None:
    """Strict final-token parse; None when the reply is not a clean verdict."""
    tokens = text.split()
    if not tokens:
        return None
    last = tokens[-1].strip(".,!:;\"'")
    if last in (VERDICT_A, VERDICT_B):
        return last
    if last.lower() == VERDICT_TIE:
        return VERDICT_TIE
    return None


def _unswap(verdict: str) -> str:
    if verdict == VERDICT_A:
        return VERDICT_B
    if verdict == VERDICT_B:
        return VERDICT_A
    return VERDICT_TIE


def combine_passes(first_pass: str, second_pass: str) -> str:
    """Final verdict from two single-pass verdicts: a winner needs agreement."""
    for v in (first_pass, second_pass):
        if v not in _VERDICTS:
            raise ValueError(f"unknown verdict '{v}'")
    if first_pass == second_pass == VERDICT_A:
        return FINAL_A
    if first_pass == second_pass == VERDICT_B:
        return FINAL_B
    return FINAL_TIE


def judge_pair(
    instruction: str,
    document: str,
    resp_a: str,
    resp_b: str,
    judge_backend,
    order_swap: bool = False,
    *,
    cache=None,
    max_tokens: int = 16,
    request_tag: str = "",
) -> tuple[str, bool]:
    """One judging pass; returns (verdict, parse_failed).

    With ``order_swap`` the responses are presented in reversed positions and
    the parsed verdict is mapped back.  An unparseable reply is re-prompted
    with a stricter suffix up to twice, then recorded as a flagged tie.
    """
    for name, text in (("instruction", instruction), ("document", document), ("response A", resp_a), ("response B", resp_b)):
        if not text.strip():
            raise ValueError(f"{name} must be non-empty")
    first, second = (resp_b, resp_a) if order_swap else (resp_a, resp_b)
    for attempt in range(PARSE_RETRIES + 1):
        system, user = prompts.judge_prompt(document, instruction, first, second, attempt=attempt)
        req = GenerationRequest(
            system_prompt=system,
            user_prompt=user,
            max_tokens=max_tokens,
            decoding=GREEDY,
            request_tag=f"{request_tag}:swap{int(order_swap)}:try{attempt}",
        )
        try:
            result = generate(judge_backend, req, cache)
        except BackendError as exc:
            logger.warning("judge backend failed (%s): %s", request_tag, exc)
            return VERDICT_TIE, True
        verdict = parse_verdict(result.texts[0])
        if verdict is not None:
            return (_unswap(verdict) if order_swap else verdict), False
    logger.warning("judge output unparseable after %d retries (%s)", PARSE_RETRIES, request_tag)
    return VERDICT_TIE, True


def judge_all(items: list[JudgeItem], judge_backend, *, cache=None) -> tuple[list[JudgeVerdict], WtlSummary]:
    """Two judging passes per item plus the win/tie/lose aggregate."""
    if not items:
        raise ValueError("no items to judge")

    def _judge(item: JudgeItem) -> JudgeVerdict:
        first, failed1 = judge_pair(
            item.instruction,
            item.document,
            item.response_a,
            item.response_b,
            judge_backend,
            order_swap=False,
            cache=cache,
            request_tag=f"judge:{item.instr_id}",
        )
        second, failed2 = judge_pair(
            item.instruction,
            item.document,
            item.response_a,
            item.response_b,
            judge_backend,
            order_swap=True,
            cache=cache,
            request_tag=f"judge:{item.instr_id}",
        )
        return JudgeVerdict(
            instr_id=item.instr_id,
            first_pass=first,
            second_pass=second,
            final=combine_passes(first, second),
            parse_failed=failed1 or failed2,
        )

    workers = max(1, int(getattr(judge_backend, "max_parallel", 1)))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        verdicts = list(pool.map(_judge, items))
    verdicts.sort(key=lambda v: v.instr_id)
    counts = {FINAL_A: 0, FINAL_B: 0, FINAL_TIE: 0}
    for v in verdicts:
        counts[v.final] += 1
    summary = WtlSummary(win=counts[FINAL_A], tie=counts[FINAL_TIE], lose=counts[FINAL_B])
    return verdicts, summary
