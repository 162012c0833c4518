import math

import numpy as np
import pytest

from forge.dpo import (
    CharTokenizer,
    DpoBatchItem,
    DpoConfig,
    ToyPolicy,
    bt_preference_prob,
    dpo_gradient,
    dpo_loss,
    implicit_preference_accuracy,
    load_preference_items,
    log_ratio,
    train_toy,
)
from forge.errors import ForgeError


def enumerated_sequence_prob(policy: ToyPolicy, x, y):
    """Independent oracle: P(y|x) from explicit per-step softmax products,
    walking the same previous-token state convention by hand."""
    logits = policy.logits
    prob = 1.0
    prev = x[-1] if len(x) else 0
    for token in y:
        state = prev % logits.shape[0]
        row = np.exp(logits[state] - logits[state].max())
        prob *= row[token] / row.sum()
        prev = token
    return prob


def random_item(rng, vocab, x_len=3, y_len=4):
    x = tuple(rng.integers(0, vocab, size=x_len).tolist())
    while True:
        y_w = tuple(rng.integers(0, vocab, size=y_len).tolist())
        y_l = tuple(rng.integers(0, vocab, size=y_len).tolist())
        if y_w != y_l:
            return DpoBatchItem(prompt=x, chosen=y_w, rejected=y_l)


class TestLogRatio:
    def test_identical_policies_zero(self):
        rng = np.random.default_rng(0)
        policy = ToyPolicy.random(4, 5, seed=1)
        for _ in range(20):
            item = random_item(rng, 5)
            assert log_ratio(policy, policy.copy(), item.prompt, item.chosen) == pytest.approx(0.0, abs=1e-12)

    def test_deterministic_policy_vs_uniform_reference(self):
        # vocab 4, uniform reference: P_ref(y) = 1/16 for any length-2 y;
        # a near-deterministic policy puts P ~ 1 on y, so the ratio is
        # log(1) - log(1/16) = 2 ln 4
        vocab = 4
        ref = ToyPolicy.uniform(vocab, vocab)
        y = (2, 1)
        logits = np.zeros((vocab, vocab))
        logits[0, 2] = 50.0  # state 0 (empty prompt) -> token 2
        logits[2, 1] = 50.0  # state 2 -> token 1
        policy = ToyPolicy(logits)
        expected = 2 * math.log(4)
        assert log_ratio(policy, ref, (), y) == pytest.approx(expected, abs=1e-9)
        # cross-check both sequence probabilities against the enumerator
        assert enumerated_sequence_prob(ref, (), y) == pytest.approx(1 / 16)
        assert enumerated_sequence_prob(policy, (), y) == pytest.approx(1.0, abs=1e-9)

    def test_sequence_log_prob_matches_enumerator(self):
        rng = np.random.default_rng(3)
        policy = ToyPolicy.random(5, 6, seed=9)
        for _ in range(25):
            item = random_item(rng, 6)
            direct = math.exp(policy.sequence_log_prob(item.prompt, item.chosen))
            assert direct == pytest.approx(enumerated_sequence_prob(policy, item.prompt, item.chosen), rel=1e-9)

    def test_probabilities_sum_to_one(self):
        from itertools import product

        policy = ToyPolicy.random(3, 3, seed=4)
        total = sum(math.exp(policy.sequence_log_prob((1,), y)) for y in product(range(3), repeat=3))
        assert total == pytest.approx(1.0, abs=1e-9)

    def test_logit_shift_invariance(self):
        rng = np.random.default_rng(5)
        policy = ToyPolicy.random(4, 4, seed=2)
        ref = ToyPolicy.random(4, 4, seed=3)
        item = random_item(rng, 4)
        before = log_ratio(policy, ref, item.prompt, item.chosen)
        shifted = policy.copy()
        shifted.logits[2] += 7.5
        assert log_ratio(shifted, ref, item.prompt, item.chosen) == pytest.approx(before, abs=1e-9)

    def test_out_of_vocab_rejected(self):
        policy = ToyPolicy.uniform(3, 3)
        with pytest.raises(ValueError, match="outside vocabulary"):
            log_ratio(policy, policy.copy(), (0,), (5,))


class TestDpoLoss:
    def test_identity_policies_ln2(self):
        rng = np.random.default_rng(1)
        policy = ToyPolicy.random(4, 6, seed=7)
        batch = [random_item(rng, 6) for _ in range(8)]
        for beta in (0.05, 0.3, 2.0):
            loss, margins = dpo_loss(policy, policy.copy(), batch, beta)
            assert loss == pytest.approx(math.log(2), abs=1e-12)
            assert margins == pytest.approx([0.0] * len(batch), abs=1e-12)

    def test_single_item_closed_form(self):
        # margin is exactly t for this construction, so t=2 and beta=0.3 give
        # loss ln(1 + e^-0.6); frozen digits confirmed with a 50-digit mpmath
        # evaluation of the same closed form
        t = 2.0
        ref = ToyPolicy.uniform(1, 2)
        policy = ToyPolicy(np.array([[t, 0.0]]))
        item = DpoBatchItem(prompt=(), chosen=(0,), rejected=(1,))
        loss, margins = dpo_loss(policy, ref, [item], beta=0.3)
        assert margins[0] == pytest.approx(t, abs=1e-12)
        expected = math.log1p(math.exp(-0.6))
        assert loss == pytest.approx(expected, abs=1e-12)
        assert loss == pytest.approx(0.4374879504858856, abs=1e-12)

    def test_beta_to_zero_limit(self):
        rng = np.random.default_rng(2)
        policy = ToyPolicy.random(3, 4, seed=11)
        ref = ToyPolicy.random(3, 4, seed=12)
        batch = [random_item(rng, 4) for _ in range(5)]
        loss, _ = dpo_loss(policy, ref, batch, beta=1e-12)
        assert loss == pytest.approx(math.log(2), abs=1e-9)

    def test_empty_batch_rejected(self):
        policy = ToyPolicy.uniform(2, 2)
        with pytest.raises(ValueError):
            dpo_loss(policy, policy.copy(), [], 0.3)

    def test_loss_positive_and_monotone_in_margin(self):
        # loss strictly decreases as the single margin grows
        ref = ToyPolicy.uniform(1, 2)
        item = DpoBatchItem(prompt=(), chosen=(0,), rejected=(1,))
        losses = []
        for t in (-1.0, 0.0, 0.5, 2.0, 5.0):
            policy = ToyPolicy(np.array([[t, 0.0]]))
            loss, _ = dpo_loss(policy, ref, [item], beta=0.3)
            assert loss > 0
            losses.append(loss)
        assert losses == sorted(losses, reverse=True)

    def test_reference_invariance_to_state_shift(self):
        rng = np.random.default_rng(3)
        policy = ToyPolicy.random(4, 4, seed=5)
        ref = ToyPolicy.random(4, 4, seed=6)
        batch = [random_item(rng, 4) for _ in range(6)]
        base, _ = dpo_loss(policy, ref, batch, 0.3)
        ref_shifted = ref.copy()
        ref_shifted.logits[1] += 3.0
        policy_shifted = policy.copy()
        policy_shifted.logits[3] -= 2.0
        assert dpo_loss(policy, ref_shifted, batch, 0.3)[0] == pytest.approx(base, abs=1e-9)
        assert dpo_loss(policy_shifted, ref, batch, 0.3)[0] == pytest.approx(base, abs=1e-9)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="shapes differ"):
            dpo_loss(ToyPolicy.uniform(2, 2), ToyPolicy.uniform(2, 3), [DpoBatchItem((), (0,), (1,))], 0.3)


def finite_difference_gradient(policy, ref, batch, beta, h=1e-4):
    grad = np.zeros_like(policy.logits)
    for s in range(policy.context_size):
        for v in range(policy.vocab_size):
            up = policy.copy()
            up.logits[s, v] += h
            down = policy.copy()
            down.logits[s, v] -= h
            grad[s, v] = (dpo_loss(up, ref, batch, beta)[0] - dpo_loss(down, ref, batch, beta)[0]) / (2 * h)
    return grad


def max_relative_error(analytic, numeric):
    scale = np.maximum(np.abs(numeric), 1e-6)
    return float(np.max(np.abs(analytic - numeric) / scale))


class TestDpoGradient:
    def test_matches_finite_differences(self):
        rng = np.random.default_rng(21)
        policy = ToyPolicy.random(4, 5, seed=33, scale=0.8)
        ref = ToyPolicy.random(4, 5, seed=34, scale=0.8)
        batch = [random_item(rng, 5) for _ in range(6)]
        analytic = dpo_gradient(policy, ref, batch, 0.3)
        numeric = finite_difference_gradient(policy, ref, batch, 0.3)
        assert max_relative_error(analytic, numeric) < 1e-5

    def test_identical_items_equal_single_item_gradient(self):
        rng = np.random.default_rng(22)
        policy = ToyPolicy.random(3, 4, seed=35)
        ref = ToyPolicy.random(3, 4, seed=36)
        item = random_item(rng, 4)
        single = dpo_gradient(policy, ref, [item], 0.3)
        repeated = dpo_gradient(policy, ref, [item] * 7, 0.3)
        np.testing.assert_allclose(single, repeated, atol=1e-12)

    def test_descent_direction_increases_margin_from_tie(self):
        # policy = reference gives zero margins; one descent step must push
        # the margin positive for token-disjoint pairs
        policy = ToyPolicy.uniform(4, 4)
        ref = ToyPolicy.uniform(4, 4)
        batch = [DpoBatchItem(prompt=(0,), chosen=(1, 1), rejected=(2, 2))]
        grad = dpo_gradient(policy, ref, batch, 0.3)
        assert np.abs(grad).max() > 0
        stepped = policy.copy()
        stepped.logits -= 0.5 * grad
        _, margins = dpo_loss(stepped, ref, batch, 0.3)
        assert margins[0] > 0


class TestBradleyTerry:
    def test_equal_rewards_exactly_half(self):
        assert bt_preference_prob(1.7, 1.7) == 0.5
        assert bt_preference_prob(-3.0, -3.0) == 0.5

    def test_unit_difference(self):
        assert bt_preference_prob(1.0, 0.0) == pytest.approx(0.7310585786300049, abs=1e-12)

    def test_swap_complements_to_one(self):
        rng = np.random.default_rng(9)
        for _ in range(1000):
            a, b = rng.normal(0, 5, size=2)
            assert bt_preference_prob(a, b) + bt_preference_prob(b, a) == pytest.approx(1.0, abs=1e-12)

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            bt_preference_prob(float("nan"), 0.0)
        with pytest.raises(ValueError):
            bt_preference_prob(0.0, float("inf"))


class TestTrainToy:
    def one_token_diff_dataset(self, n, vocab=6, seed=17):
        rng = np.random.default_rng(seed)
        items = []
        for _ in range(n):
            x = tuple(rng.integers(0, vocab, size=2).tolist())
            y_w = list(rng.integers(0, vocab, size=4).tolist())
            y_l = list(y_w)
            pos = int(rng.integers(0, 4))
            y_l[pos] = int((y_l[pos] + 1 + rng.integers(0, vocab - 1)) % vocab)
            items.append(DpoBatchItem(prompt=x, chosen=tuple(y_w), rejected=tuple(y_l)))
        return items

    def test_margin_grows(self):
        dataset = self.one_token_diff_dataset(40)
        ref = ToyPolicy.uniform(6, 6)
        result = train_toy(ref.copy(), ref, dataset, DpoConfig(steps=50, learning_rate=0.5))
        assert result.final_margin > result.initial_margin
        assert len(result.history) == 51

    def test_zero_learning_rate_flat(self):
        dataset = self.one_token_diff_dataset(10)
        ref = ToyPolicy.random(6, 6, seed=2)
        start = ref.copy()
        result = train_toy(start, ref, dataset, DpoConfig(steps=5, learning_rate=0.0))
        margins = [row["mean_margin"] for row in result.history]
        assert margins == [margins[0]] * len(margins)
        np.testing.assert_array_equal(result.policy.logits, ref.logits)

    def test_identical_pair_rejected_at_construction(self):
        with pytest.raises(ValueError, match="differ"):
            DpoBatchItem(prompt=(0,), chosen=(1, 2), rejected=(1, 2))

    def test_divergence_reported_with_step(self):
        dataset = self.one_token_diff_dataset(4)
        broken = ToyPolicy.uniform(6, 6)
        broken.logits[0, 0] = float("inf")
        with pytest.raises(ForgeError, match="step 0"):
            train_toy(broken, ToyPolicy.uniform(6, 6), dataset, DpoConfig(steps=2))

    def test_accuracy_helper_matches_margins(self):
        dataset = self.one_token_diff_dataset(20)
        ref = ToyPolicy.uniform(6, 6)
        result = train_toy(ref.copy(), ref, dataset, DpoConfig(steps=30, learning_rate=0.5))
        acc = implicit_preference_accuracy(result.policy, ref, dataset)
        assert acc == result.history[-1]["accuracy"]

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError):
            train_toy(ToyPolicy.uniform(2, 2), ToyPolicy.uniform(2, 2), [], DpoConfig())


class TestConfigAndTokenizer:
    def test_config_validation(self):
        with pytest.raises(ValueError):
            DpoConfig(beta=0.0)
        with pytest.raises(ValueError):
            DpoConfig(steps=0)
        assert DpoConfig().beta == 0.3
        assert DpoConfig().steps == 300

    def test_char_tokenizer_round_trip(self):
        tok = CharTokenizer(["abc", "cab"])
        assert tok.vocab_size == 3
        assert tok.encode("cab") != tok.encode("abc")
        with pytest.raises(ValueError, match="outside tokenizer vocabulary"):
            tok.encode("xyz")

    def test_load_preference_items(self):
        records = [
            {"instruction": "q one", "y_w": "good answer", "y_l": "bad answer"},
            {"instruction": "q two", "y_w": "yes", "y_l": "no"},
        ]
        items, tok = load_preference_items(records)
        assert len(items) == 2
        assert all(isinstance(i, DpoBatchItem) for i in items)
        assert tok.vocab_size > 0

    def test_load_rejects_identical_pair(self):
        with pytest.raises(ValueError):
            load_preference_items([{"instruction": "q", "y_w": "same", "y_l": "same"}])

    def test_load_empty_rejected(self):
        with pytest.raises(ValueError):
            load_preference_items([])
