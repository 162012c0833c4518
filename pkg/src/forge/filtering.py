"""Two-stage consistency/knowledge filtering of preference candidates.

Per candidate, the consistency score is the mean contradiction between the
grounded reference answer and the K grounded samples; the knowledge score is
the mean contradiction against the K ungrounded samples.  A candidate
survives only with consistency strictly below its threshold (a trustworthy
reference) and knowledge strictly above its threshold (the model does not
already know the answer).  Both comparisons are strict, so sitting exactly
on a threshold excludes.  The knowledge score is only computed once the
consistency test has passed.

Kept candidates become preference pairs: chosen = the grounded reference,
rejected = the ungrounded sample with the highest contradiction against it.
"""

from __future__ import annotations

import logging
import math
import random
from dataclasses import dataclass, field

from .errors import ScorerError
from .preferences import AblationCandidate, PreferenceCandidate
from .scoring import ContradictionScorer

logger = logging.getLogger(__name__)

LABEL_KEPT = "unknown_kept"
LABEL_KNOWN = "known_excluded"
LABEL_INCONSISTENT = "inconsistent_excluded"

DEFAULT_TAU_L = 0.5
DEFAULT_TAU_K = 0.5
DEFAULT_SWEEP = (0.5, 0.6, 0.7, 0.8)


@dataclass(frozen=True)
class FilterThresholds:
    tau_l: float = DEFAULT_TAU_L
    tau_k: float = DEFAULT_TAU_K

    def __post_init__(self):
        for name, value in (("tau_L", self.tau_l), ("tau_K", self.tau_k)):
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {value}")


@dataclass(frozen=True)
class ScoredCandidate:
    candidate: PreferenceCandidate
    consistency_score: float
    knowledge_score: float
    grounded_pair_scores: tuple[float, ...]
    ungrounded_pair_scores: tuple[float, ...]


@dataclass(frozen=True)
class FilteredPreferencePair:
    instr_id: str
    instruction: str
    chosen: str
    rejected: str
    consistency_score: float
    knowledge_score: float
    label: str = LABEL_KEPT

    def to_record(self) -> dict:
        return {
            "instr_id": self.instr_id,
            "instruction": self.instruction,
            "y_w": self.chosen,
            "y_l": self.rejected,
            "S_L": self.consistency_score,
            "S_K": self.knowledge_score,
            "label": self.label,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "FilteredPreferencePair":
        return cls(
            instr_id=rec["instr_id"],
            instruction=rec["instruction"],
            chosen=rec["y_w"],
            rejected=rec["y_l"],
            consistency_score=rec["S_L"],
            knowledge_score=rec["S_K"],
            label=rec.get("label", LABEL_KEPT),
        )


@dataclass
class FilterStats:
    kept: int = 0
    inconsistent_excluded: int = 0
    known_excluded: int = 0
    unscored: int = 0
    degenerate_dropped: int = 0
    scorer_id: str = ""
    tau_l: float = DEFAULT_TAU_L
    tau_k: float = DEFAULT_TAU_K

    def to_record(self) -> dict:
        return {
            "kept": self.kept,
            "inconsistent_excluded": self.inconsistent_excluded,
            "known_excluded": self.known_excluded,
            "unscored": self.unscored,
            "degenerate_dropped": self.degenerate_dropped,
            "scorer_id": self.scorer_id,
            "tau_L": self.tau_l,
            "tau_K": self.tau_k,
        }


def _mean(values) -> float:
    values = list(values)
    return math.fsum(values) / len(values)


def _pair_scores(scorer: ContradictionScorer, reference: str, others) -> list[float]:
    scores = []
    for text in others:
        value = float(scorer.score(reference, text))
        if not 0.0 <= value <= 1.0:
            raise ScorerError(f"scorer '{scorer.scorer_id}' returned {value}, outside [0, 1]")
        scores.append(value)
    return scores


def consistency_score(cand: PreferenceCandidate, scorer: ContradictionScorer) -> tuple[float, list[float]]:
    """Mean contradiction of the grounded reference against the grounded samples.

    The reference is the premise in every pair.
    """
    scores = _pair_scores(scorer, cand.grounded_reference, cand.grounded_samples)
    return _mean(scores), scores


def knowledge_score(cand: PreferenceCandidate, scorer: ContradictionScorer) -> tuple[float, list[float]]:
    """Mean contradiction of the grounded reference against the ungrounded samples."""
    scores = _pair_scores(scorer, cand.grounded_reference, cand.ungrounded_samples)
    return _mean(scores), scores


def select_rejected(cand: PreferenceCandidate, ungrounded_pair_scores) -> str:
    """The ungrounded sample with maximal contradiction; ties break to the
    lowest sample index."""
    scores = list(ungrounded_pair_scores)
    if len(scores) != len(cand.ungrounded_samples):
        raise ValueError("per-sample scores do not match the sample count")
    best = max(range(len(scores)), key=lambda i: (scores[i], -i))
    return cand.ungrounded_samples[best]


def score_candidate(cand: PreferenceCandidate, scorer: ContradictionScorer) -> ScoredCandidate:
    """Full scoring (both filters) of one candidate, no short-circuit."""
    s_l, c_scores = consistency_score(cand, scorer)
    s_k, r_scores = knowledge_score(cand, scorer)
    return ScoredCandidate(
        candidate=cand,
        consistency_score=s_l,
        knowledge_score=s_k,
        grounded_pair_scores=tuple(c_scores),
        ungrounded_pair_scores=tuple(r_scores),
    )


def filter_candidates(
    candidates: list[PreferenceCandidate],
    scorer: ContradictionScorer,
    thresholds: FilterThresholds = FilterThresholds(),
) -> tuple[list[FilteredPreferencePair], FilterStats]:
    """Run the two-stage filter and assemble the surviving preference pairs.

    Scorer failures mark the item unscored and it is excluded; a kept pair
    whose chosen and rejected texts are string-identical is degenerate for
    preference tuning and dropped.  Output is ordered by instr_id.
    """
    stats = FilterStats(scorer_id=scorer.scorer_id, tau_l=thresholds.tau_l, tau_k=thresholds.tau_k)
    kept: list[FilteredPreferencePair] = []
    for cand in candidates:
        try:
            s_l, _ = consistency_score(cand, scorer)
            if not (s_l < thresholds.tau_l):
                stats.inconsistent_excluded += 1
                continue
            s_k, r_scores = knowledge_score(cand, scorer)
        except ScorerError as exc:
            logger.warning("unscored %s: %s", cand.instr_id, exc)
            stats.unscored += 1
            continue
        if not (s_k > thresholds.tau_k):
            stats.known_excluded += 1
            continue
        rejected = select_rejected(cand, r_scores)
        if rejected == cand.grounded_reference:
            logger.warning("dropping %s: chosen and rejected responses are identical", cand.instr_id)
            stats.degenerate_dropped += 1
            continue
        kept.append(
            FilteredPreferencePair(
                instr_id=cand.instr_id,
                instruction=cand.instruction,
                chosen=cand.grounded_reference,
                rejected=rejected,
                consistency_score=s_l,
                knowledge_score=s_k,
            )
        )
    stats.kept = len(kept)
    kept.sort(key=lambda p: p.instr_id)
    return kept, stats


@dataclass
class SweepPoint:
    tau_k: float
    size: int
    pairs: list[FilteredPreferencePair] = field(repr=False, default_factory=list)
    stats: FilterStats | None = None


def sweep_tau_k(
    candidates: list[PreferenceCandidate],
    scorer: ContradictionScorer,
    tau_l: float,
    tau_k_values,
) -> list[SweepPoint]:
    """Filter once per knowledge threshold; sizes are non-increasing.

    Values must be sorted ascending.  Each point is exactly the output of a
    direct filter call at that threshold (wrap the scorer in a cache to avoid
    re-scoring).
    """
    values = list(tau_k_values)
    if values != sorted(values):
        raise ValueError(f"tau_K sweep values must be sorted ascending, got {values}")
    points = []
    for tau_k in values:
        pairs, stats = filter_candidates(candidates, scorer, FilterThresholds(tau_l=tau_l, tau_k=tau_k))
        points.append(SweepPoint(tau_k=tau_k, size=len(pairs), pairs=pairs, stats=stats))
    return points


def extract_known_split(
    candidates: list[PreferenceCandidate],
    scorer: ContradictionScorer,
    thresholds: FilterThresholds,
    sample_n: int,
    seed: int,
) -> list[PreferenceCandidate]:
    """Seeded uniform sample of candidates labeled known.

    Known means the consistency test passed but the knowledge test did not
    (the model already answers consistently without the document); these are
    the items excluded from training and probed later for forgetting.
    """
    if sample_n < 0:
        raise ValueError(f"sample_n must be >= 0, got {sample_n}")
    known = []
    for cand in candidates:
        try:
            s_l, _ = consistency_score(cand, scorer)
            if not (s_l < thresholds.tau_l):
                continue
            s_k, _ = knowledge_score(cand, scorer)
        except ScorerError:
            continue
        if s_k <= thresholds.tau_k:
            known.append(cand)
    known.sort(key=lambda c: c.instr_id)
    if len(known) > sample_n:
        rng = random.Random(f"{seed}:known-split")
        known = sorted(rng.sample(known, sample_n), key=lambda c: c.instr_id)
    return known


def ablation_select(cand: AblationCandidate, scorer: ContradictionScorer) -> tuple[str, str] | None:
    """Pick (preferred, dispreferred) inside a no-context bundle.

    Each sample serves as the reference in turn: its score is the mean
    contradiction against the other K-1 samples.  The minimum-score sample is
    preferred, the maximum dispreferred; ties break to the lowest index.
    Returns None when minimum and maximum coincide (all scores equal), which
    leaves nothing to separate.
    """
    if cand.k < 2:
        raise ValueError(f"{cand.instr_id}: need at least 2 samples, got {cand.k}")
    means = []
    for i, sample in enumerate(cand.samples):
        others = [s for j, s in enumerate(cand.samples) if j != i]
        means.append(_mean(_pair_scores(scorer, sample, others)))
    best = min(range(len(means)), key=lambda i: (means[i], i))
    worst = max(range(len(means)), key=lambda i: (means[i], -i))
    if best == worst:
        logger.info("dropping %s: all pairwise contradiction scores equal", cand.instr_id)
        return None
    return cand.samples[best], cand.samples[worst]


def select_ablation_pairs(
    candidates: list[AblationCandidate], scorer: ContradictionScorer
) -> tuple[list[dict], dict]:
    """Apply :func:`ablation_select` across bundles; returns records + stats."""
    pairs = []
    dropped = unscored = 0
    for cand in candidates:
        try:
            picked = ablation_select(cand, scorer)
        except ScorerError as exc:
            logger.warning("unscored %s: %s", cand.instr_id, exc)
            unscored += 1
            continue
        if picked is None:
            dropped += 1
            continue
        preferred, dispreferred = picked
        pairs.append(
            {
                "instr_id": cand.instr_id,
                "instruction": cand.instruction,
                "y_w": preferred,
                "y_l": dispreferred,
            }
        )
    pairs.sort(key=lambda p: p["instr_id"])
    return pairs, {"built": len(pairs), "dropped_degenerate": dropped, "unscored": unscored}


def single_sample_knowledge_score(
    grounded_reference: str, ungrounded_reference: str, scorer: ContradictionScorer
) -> float:
    """K=1 shortcut: contradiction between the two greedy decodes only.

    Cheaper than sampling K answers but a noisier estimate of whether the
    model knows the answer; equals the knowledge score when the sample set
    holds exactly the ungrounded greedy decode.
    """
    return _pair_scores(scorer, grounded_reference, [ungrounded_reference])[0]
