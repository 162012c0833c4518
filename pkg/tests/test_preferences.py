import pytest

from forge.corpus import DocumentChunk
from forge.errors import ForgeError, TransportError
from forge.gateway import MockBackend
from forge.instructions import InstructionRecord
from forge.preferences import PreferenceCandidate, build_ablation_candidates, build_candidates
from forge.prompts import grounded_answer_prompt, plain_answer_prompt


def instructions(n=2):
    return [
        InstructionRecord(f"doc0:q{i:02d}", "doc0", 0, "science", f"Question {i} about geysers?")
        for i in range(n)
    ]


CHUNKS = [DocumentChunk("doc0", 0, "Geysers erupt because trapped water boils under pressure.", 8)]


class TestBuildCandidates:
    def test_bundle_shape_k10(self):
        cands, stats = build_candidates(instructions(1), CHUNKS, MockBackend(), k=10)
        (cand,) = cands
        assert len(cand.grounded_samples) == 10
        assert len(cand.ungrounded_samples) == 10
        assert cand.grounded_reference
        assert stats["built"] == 1

    def test_k1_degenerate_allowed(self):
        cands, _ = build_candidates(instructions(1), CHUNKS, MockBackend(), k=1)
        assert cands[0].k == 1

    def test_k0_rejected(self):
        with pytest.raises(ValueError):
            build_candidates(instructions(1), CHUNKS, MockBackend(), k=0)

    def test_reproducible(self):
        a, _ = build_candidates(instructions(2), CHUNKS, MockBackend(), k=3)
        b, _ = build_candidates(instructions(2), CHUNKS, MockBackend(), k=3)
        assert a == b

    def test_missing_chunk_raises(self):
        bad = [InstructionRecord("x:q0", "ghost", 7, "science", "Where?")]
        with pytest.raises(ForgeError, match="x:q0"):
            build_candidates(bad, CHUNKS, MockBackend(), k=2)

    def test_backend_failure_drops_item(self):
        class Flaky(MockBackend):
            def complete(self, req):
                if "q01" in req.request_tag and "noctx" in req.request_tag:
                    raise TransportError("down")
                return super().complete(req)

        cands, stats = build_candidates(instructions(3), CHUNKS, Flaky(), k=2)
        assert stats == {"requested": 3, "built": 2, "dropped": 1}
        assert {c.instr_id for c in cands} == {"doc0:q00", "doc0:q02"}

    def test_output_sorted_by_instr_id(self):
        cands, _ = build_candidates(list(reversed(instructions(4))), CHUNKS, MockBackend(), k=2)
        ids = [c.instr_id for c in cands]
        assert ids == sorted(ids)

    def test_sample_order_preserved_from_backend(self):
        class Indexed(MockBackend):
            def complete(self, req):
                if req.decoding == "greedy":
                    return ["ref"]
                return [f"sample-{i}" for i in range(req.n_samples)]

        cands, _ = build_candidates(instructions(1), CHUNKS, Indexed(), k=3)
        assert cands[0].grounded_samples == ("sample-0", "sample-1", "sample-2")


class TestPromptDiff:
    def test_contexts_differ_only_by_chunk_block(self):
        # the grounded prompt is the plain prompt plus a leading block that
        # holds the document and its usage directions
        _, grounded = grounded_answer_prompt("THE DOC", "THE QUESTION?")
        _, plain = plain_answer_prompt("THE QUESTION?")
        assert grounded.endswith("\n" + plain)
        block = grounded[: -len("\n" + plain)]
        assert "THE DOC" in block
        assert "THE QUESTION?" not in block
        assert "Document:" not in plain


class TestAblation:
    def test_k_samples_only(self):
        cands, _ = build_ablation_candidates(instructions(2), MockBackend(), k=10)
        assert all(c.k == 10 for c in cands)

    def test_k1_precondition_error(self):
        with pytest.raises(ValueError):
            build_ablation_candidates(instructions(1), MockBackend(), k=1)

    def test_identical_samples_bundle_still_valid(self):
        class Constant(MockBackend):
            def complete(self, req):
                return ["same answer"] * req.n_samples

        cands, _ = build_ablation_candidates(instructions(1), Constant(), k=4)
        assert cands[0].samples == ("same answer",) * 4


class TestCandidateType:
    def test_sample_sets_must_match_in_size(self):
        with pytest.raises(ValueError):
            PreferenceCandidate("i", "q", "c", "ref", ("a",), ("b", "c"))

    def test_empty_reference_rejected(self):
        with pytest.raises(ValueError):
            PreferenceCandidate("i", "q", "c", "", ("a",), ("b",))

    def test_record_round_trip(self):
        cand = PreferenceCandidate("i", "q", "c", "ref", ("a", "b"), ("x", "y"))
        rec = cand.to_record()
        assert rec["y_c_star"] == "ref" and rec["Y_c"] == ["a", "b"] and rec["Y_r"] == ["x", "y"]
        assert PreferenceCandidate.from_record(rec) == cand
