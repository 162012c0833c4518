"""Desk-scale preference-optimization numerics on a tabular policy.

The policy is a table of logits indexed by (state, token) with the state
being the previous token (mod table height), so sequence log-probabilities,
the preference loss, and its exact analytic gradient are all computable in
closed form and checkable against finite differences.  Sequence
log-probabilities are length-unnormalized, matching standard practice.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ForgeError

DEFAULT_BETA = 0.3
DEFAULT_STEPS = 300
DEFAULT_LEARNING_RATE = 0.5


def sigmoid(z: float) -> float:
    """Numerically stable logistic function."""
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def log_sigmoid(z: float) -> float:
    if z >= 0:
        return -math.log1p(math.exp(-z))
    return z - math.log1p(math.exp(z))


def bt_preference_prob(r_w: float, r_l: float) -> float:
    """Pairwise preference probability of a latent-reward pair: sigmoid of
    the reward difference.  Complements sum to one exactly."""
    if not (math.isfinite(r_w) and math.isfinite(r_l)):
        raise ValueError(f"rewards must be finite, got ({r_w}, {r_l})")
    return sigmoid(r_w - r_l)


@dataclass
class ToyPolicy:
    """Categorical sequence policy with explicit per-state logits."""

    logits: np.ndarray  # (context_size, vocab_size)

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=np.float64)
        if self.logits.ndim != 2:
            raise ValueError(f"logits must be 2-D (context_size, vocab_size), got shape {self.logits.shape}")

    @property
    def context_size(self) -> int:
        return self.logits.shape[0]

    @property
    def vocab_size(self) -> int:
        return self.logits.shape[1]

    @property
    def parameter_count(self) -> int:
        return self.logits.size

    @classmethod
    def uniform(cls, context_size: int, vocab_size: int) -> "ToyPolicy":
        return cls(np.zeros((context_size, vocab_size)))

    @classmethod
    def random(cls, context_size: int, vocab_size: int, seed: int, scale: float = 1.0) -> "ToyPolicy":
        rng = np.random.default_rng(seed)
        return cls(rng.normal(0.0, scale, size=(context_size, vocab_size)))

    def copy(self) -> "ToyPolicy":
        return ToyPolicy(self.logits.copy())

    def log_prob_table(self) -> np.ndarray:
        m = self.logits.max(axis=1, keepdims=True)
        z = self.logits - m
        return z - np.log(np.exp(z).sum(axis=1, keepdims=True))

    def prob_table(self) -> np.ndarray:
        return np.exp(self.log_prob_table())

    def sequence_log_prob(self, x, y) -> float:
        """Log-probability of emitting ``y`` after prompt ``x``."""
        table = self.log_prob_table()
        total = 0.0
        for state, token in _state_walk(x, y, self.context_size, self.vocab_size):
            total += table[state, token]
        return total


def _check_tokens(seq, vocab_size: int) -> None:
    for tok in seq:
        if not 0 <= tok < vocab_size:
            raise ValueError(f"token {tok} outside vocabulary of size {vocab_size}")


def _state_walk(x, y, context_size: int, vocab_size: int):
    """(state, token) pairs visited while emitting ``y`` after prompt ``x``."""
    _check_tokens(x, vocab_size)
    _check_tokens(y, vocab_size)
    prev = x[-1] if len(x) else 0
    for token in y:
        yield prev % context_size, token
        prev = token


def _sequence_counts(x, y, context_size: int, vocab_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Emission counts per (state, token) and state-occupancy counts."""
    counts = np.zeros((context_size, vocab_size))
    occupancy = np.zeros(context_size)
    for state, token in _state_walk(x, y, context_size, vocab_size):
        counts[state, token] += 1
        occupancy[state] += 1
    return counts, occupancy


@dataclass(frozen=True)
class DpoBatchItem:
    prompt: tuple[int, ...]
    chosen: tuple[int, ...]
    rejected: tuple[int, ...]

    def __post_init__(self):
        if not self.chosen or not self.rejected:
            raise ValueError("chosen and rejected sequences must be non-empty")
        if self.chosen == self.rejected:
            raise ValueError("chosen and rejected sequences must differ")


@dataclass
class DpoConfig:
    beta: float = DEFAULT_BETA
    steps: int = DEFAULT_STEPS
    learning_rate: float = DEFAULT_LEARNING_RATE

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError(f"beta must be > 0, got {self.beta}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")


def _validate_pair(policy: ToyPolicy, ref_policy: ToyPolicy) -> None:
    if policy.logits.shape != ref_policy.logits.shape:
        raise ValueError(
            f"policy and reference shapes differ: {policy.logits.shape} vs {ref_policy.logits.shape}"
        )


def log_ratio(policy: ToyPolicy, ref_policy: ToyPolicy, x, y) -> float:
    """log pi(y|x) - log pi_ref(y|x); zero whenever the policies coincide."""
    _validate_pair(policy, ref_policy)
    return policy.sequence_log_prob(x, y) - ref_policy.sequence_log_prob(x, y)


class _BatchCounts:
    """Precomputed per-item count differences for fast loss/gradient passes."""

    def __init__(self, batch: list[DpoBatchItem], context_size: int, vocab_size: int):
        diffs = []
        occ_diffs = []
        for item in batch:
            c_w, n_w = _sequence_counts(item.prompt, item.chosen, context_size, vocab_size)
            c_l, n_l = _sequence_counts(item.prompt, item.rejected, context_size, vocab_size)
            diffs.append(c_w - c_l)
            occ_diffs.append(n_w - n_l)
        self.diff = np.stack(diffs)  # (N, S, V)
        self.occ_diff = np.stack(occ_diffs)  # (N, S)

    def margins(self, policy: ToyPolicy, ref_policy: ToyPolicy) -> np.ndarray:
        delta_log = policy.log_prob_table() - ref_policy.log_prob_table()
        return np.einsum("nsv,sv->n", self.diff, delta_log)


def dpo_loss(policy: ToyPolicy, ref_policy: ToyPolicy, batch: list[DpoBatchItem], beta: float) -> tuple[float, list[float]]:
    """Mean preference loss over the batch plus per-item margins.

    The per-item margin is the chosen-minus-rejected difference of policy/
    reference log-ratios; the loss is the mean of -log sigmoid(beta * margin).
    """
    if not batch:
        raise ValueError("batch must be non-empty")
    _validate_pair(policy, ref_policy)
    counts = _BatchCounts(batch, policy.context_size, policy.vocab_size)
    margins = counts.margins(policy, ref_policy)
    loss = -math.fsum(log_sigmoid(beta * m) for m in margins) / len(batch)
    return loss, [float(m) for m in margins]


def dpo_gradient(policy: ToyPolicy, ref_policy: ToyPolicy, batch: list[DpoBatchItem], beta: float) -> np.ndarray:
    """Exact gradient of the mean preference loss w.r.t. every policy logit."""
    if not batch:
        raise ValueError("batch must be non-empty")
    _validate_pair(policy, ref_policy)
    counts = _BatchCounts(batch, policy.context_size, policy.vocab_size)
    return _gradient_from_counts(counts, policy, ref_policy, beta)


def _gradient_from_counts(
    counts: _BatchCounts, policy: ToyPolicy, ref_policy: ToyPolicy, beta: float
) -> np.ndarray:
    margins = counts.margins(policy, ref_policy)
    # dL_i/d logits = -beta * sigmoid(-beta * m_i) * (diff_i - occ_diff_i * P)
    weights = np.array([sigmoid(-beta * m) for m in margins])
    probs = policy.prob_table()
    weighted_diff = np.einsum("n,nsv->sv", weights, counts.diff)
    weighted_occ = np.einsum("n,ns->s", weights, counts.occ_diff)
    return (-beta / len(weights)) * (weighted_diff - weighted_occ[:, None] * probs)


@dataclass
class TrainResult:
    policy: ToyPolicy
    history: list[dict] = field(repr=False, default_factory=list)

    @property
    def initial_margin(self) -> float:
        return self.history[0]["mean_margin"]

    @property
    def final_margin(self) -> float:
        return self.history[-1]["mean_margin"]

    @property
    def final_accuracy(self) -> float:
        return self.history[-1]["accuracy"]


def train_toy(
    policy_init: ToyPolicy,
    ref_policy: ToyPolicy,
    dataset: list[DpoBatchItem],
    config: DpoConfig = DpoConfig(),
) -> TrainResult:
    """Plain full-batch gradient descent on the preference loss.

    Deterministic: no sampling, no adaptive optimizer state.  The history
    holds one row per step (plus the initial state at step 0) with loss,
    mean margin, and implicit-preference accuracy (fraction of items whose
    margin is positive).  Raises on a non-finite loss, naming the step.
    """
    if not dataset:
        raise ValueError("dataset must be non-empty")
    _validate_pair(policy_init, ref_policy)
    policy = policy_init.copy()
    counts = _BatchCounts(dataset, policy.context_size, policy.vocab_size)
    n = len(dataset)
    history = []

    def snapshot(step: int) -> np.ndarray:
        margins = counts.margins(policy, ref_policy)
        loss = -math.fsum(log_sigmoid(config.beta * m) for m in margins) / n
        if not math.isfinite(loss):
            raise ForgeError(f"training diverged at step {step}: loss is not finite")
        history.append(
            {
                "step": step,
                "loss": loss,
                "mean_margin": float(margins.mean()),
                "accuracy": float((margins > 0).mean()),
            }
        )
        return margins

    snapshot(0)
    for step in range(1, config.steps + 1):
        grad = _gradient_from_counts(counts, policy, ref_policy, config.beta)
        policy.logits -= config.learning_rate * grad
        snapshot(step)
    return TrainResult(policy=policy, history=history)


def implicit_preference_accuracy(
    policy: ToyPolicy, ref_policy: ToyPolicy, dataset: list[DpoBatchItem], beta: float = DEFAULT_BETA
) -> float:
    """Fraction of pairs the implicit reward orders correctly (preference
    probability above one half, i.e. positive margin)."""
    _, margins = dpo_loss(policy, ref_policy, dataset, beta)
    return sum(1 for m in margins if m > 0) / len(margins)


class CharTokenizer:
    """Character-level toy tokenizer with a vocabulary built from a corpus."""

    def __init__(self, texts):
        charset = sorted({ch for text in texts for ch in text})
        if not charset:
            raise ValueError("cannot build a tokenizer from empty texts")
        self._index = {ch: i for i, ch in enumerate(charset)}

    @property
    def vocab_size(self) -> int:
        return len(self._index)

    def encode(self, text: str) -> tuple[int, ...]:
        try:
            return tuple(self._index[ch] for ch in text)
        except KeyError as exc:
            raise ValueError(f"character {exc.args[0]!r} outside tokenizer vocabulary") from None


def load_preference_items(records: list[dict]) -> tuple[list[DpoBatchItem], CharTokenizer]:
    """Tokenize filtered preference records ({instruction, y_w, y_l}) into
    training items, building the character vocabulary from the records."""
    if not records:
        raise ValueError("no preference records to load")
    texts = []
    for rec in records:
        texts.extend((rec["instruction"], rec["y_w"], rec["y_l"]))
    tokenizer = CharTokenizer(texts)
    items = [
        DpoBatchItem(
            prompt=tokenizer.encode(rec["instruction"]),
            chosen=tokenizer.encode(rec["y_w"]),
            rejected=tokenizer.encode(rec["y_l"]),
        )
        for rec in records
    ]
    return items, tokenizer
