"""Simulated backend: determinism, proficiency model, scoring, relevance."""

import math

import pytest

from ttcbench.backend import (
    FAILURE_MARK,
    GenerationMode,
    GenerationRequest,
    SamplingParams,
    ScoreDistribution,
    SimulatedBackend,
    SimulatedProfile,
    SUCCESS_MARK,
)
from ttcbench.core import Question, SimilarityLevel
from ttcbench.memory import (
    EpisodicBuffer,
    Entry,
    FineTuneResult,
    NoMemory,
    SftLedger,
    relevance_fraction,
)

Q = Question(
    id="q-main",
    backbone_id="bb",
    similarity_level=SimilarityLevel.S1,
    text="What is 3 + 4?",
    reference_answer="7",
)


def request(relevance: float = 0.0, question: Question = Q) -> GenerationRequest:
    return GenerationRequest(question=question, relevance=relevance)


class TestDeterminism:
    def test_identical_seed_and_sequence_replays_bit_exactly(self):
        profile = SimulatedProfile(base_success=0.5, seed=42)
        runs = []
        for _ in range(2):
            backend = SimulatedBackend(profile)
            trace = []
            for _ in range(6):
                result = backend.generate(request())
                trace.append((result.content, result.token_count))
                trace.append(backend.score(Q, result.content))
            runs.append(trace)
        assert runs[0] == runs[1]

    def test_different_salts_give_independent_streams(self):
        profile = SimulatedProfile(base_success=0.5, seed=42)
        base = SimulatedBackend(profile)
        a = [base.with_salt(1).generate(request()).content for _ in range(3)]
        b = [base.with_salt(2).generate(request()).content for _ in range(3)]
        assert a != b

    def test_streams_are_per_question(self):
        # interleaving requests for another question must not disturb q's stream
        profile = SimulatedProfile(base_success=0.5, seed=7)
        other = Question(
            id="q-other", backbone_id="bb", similarity_level=SimilarityLevel.S1, text="t"
        )
        solo = SimulatedBackend(profile)
        solo_contents = [solo.generate(request()).content for _ in range(4)]
        mixed = SimulatedBackend(profile)
        mixed_contents = []
        for _ in range(4):
            mixed.generate(request(question=other))
            mixed_contents.append(mixed.generate(request()).content)
        assert solo_contents == mixed_contents


class TestSuccessModel:
    def test_certain_success(self):
        backend = SimulatedBackend(SimulatedProfile(base_success=1.0, seed=42))
        content = backend.generate(request()).content
        assert SUCCESS_MARK in content
        assert "Answer: 7" in content

    def test_certain_failure(self):
        backend = SimulatedBackend(SimulatedProfile(base_success=0.0, seed=42))
        content = backend.generate(request()).content
        assert FAILURE_MARK in content

    def test_memory_gain_shifts_success_frequency(self):
        # p = 0.3 + 0.4 * 1.0 = 0.7, checked against 10k seeded draws
        profile = SimulatedProfile(base_success=0.3, memory_gain=0.4, seed=11)
        base = SimulatedBackend(profile)
        hits = 0
        trials = 10_000
        for i in range(trials):
            content = base.with_salt(i).generate(request(relevance=1.0)).content
            hits += SUCCESS_MARK in content
        assert abs(hits / trials - 0.7) <= 0.01

    @pytest.mark.parametrize(
        "p0,gain,relevance",
        [(0.2, 0.0, 0.0), (0.5, 0.3, 0.5), (0.1, 0.8, 1.0)],
    )
    def test_success_frequency_matches_closed_form(self, p0, gain, relevance):
        profile = SimulatedProfile(base_success=p0, memory_gain=gain, seed=5)
        expected = profile.success_probability(relevance)
        base = SimulatedBackend(profile)
        trials = 10_000
        hits = sum(
            SUCCESS_MARK in base.with_salt(i).generate(request(relevance=relevance)).content
            for i in range(trials)
        )
        sigma = math.sqrt(expected * (1 - expected) / trials)
        assert abs(hits / trials - expected) <= 3 * sigma + 1e-9

    def test_probability_clamped(self):
        profile = SimulatedProfile(base_success=0.8, memory_gain=0.5)
        assert profile.success_probability(1.0) == 1.0


class TestScoring:
    def test_success_point_mass(self):
        backend = SimulatedBackend(SimulatedProfile(base_success=1.0, seed=1))
        assert backend.score(Q, f"{SUCCESS_MARK} text") == 1.0

    def test_failure_scores_stay_below_support_bound(self):
        backend = SimulatedBackend(SimulatedProfile(base_success=0.0, seed=1))
        for _ in range(1000):
            assert backend.score(Q, f"{FAILURE_MARK} text") < 0.9

    def test_unmarked_content_scores_as_failure(self):
        backend = SimulatedBackend(SimulatedProfile(seed=1))
        assert backend.score(Q, "an unfinished trace") < 0.9

    def test_empty_content_rejected(self):
        backend = SimulatedBackend(SimulatedProfile(seed=1))
        with pytest.raises(ValueError):
            backend.score(Q, "")

    def test_distribution_spec_validation(self):
        with pytest.raises(ValueError):
            ScoreDistribution.point(1.5)
        with pytest.raises(ValueError):
            ScoreDistribution.uniform(0.5, 0.2)
        with pytest.raises(ValueError):
            ScoreDistribution("gaussian", 0.5)


class TestRelevance:
    def entry(self, backbone="bb", tag=None):
        return Entry("qt", "at", backbone, tag)

    def test_empty_memory_is_zero(self):
        backend = SimulatedBackend(SimulatedProfile())
        assert backend.relevance(NoMemory(), Q) == 0.0
        assert backend.relevance(EpisodicBuffer(), Q) == 0.0

    def test_full_buffer_full_weight(self):
        buffer = EpisodicBuffer(entries=(self.entry(), self.entry(), self.entry()))
        backend = SimulatedBackend(SimulatedProfile())
        assert backend.relevance(buffer, Q) == 1.0

    def test_single_entry_is_one_third(self):
        buffer = EpisodicBuffer(entries=(self.entry(),))
        backend = SimulatedBackend(SimulatedProfile())
        assert backend.relevance(buffer, Q) == pytest.approx(1 / 3)

    def test_weights_scale_by_similarity_level(self):
        q3 = Question(
            id="q3", backbone_id="bb", similarity_level=SimilarityLevel.S3, text="t"
        )
        buffer = EpisodicBuffer(entries=(self.entry(),))
        backend = SimulatedBackend(SimulatedProfile())
        assert backend.relevance(buffer, q3) == pytest.approx(0.6 / 3)

    def test_knowledge_tag_matches_only_for_s4(self):
        q4 = Question(
            id="q4",
            backbone_id="other",
            similarity_level=SimilarityLevel.S4,
            text="t",
            knowledge_tag="alg",
        )
        q1 = Question(
            id="q1b", backbone_id="other", similarity_level=SimilarityLevel.S1, text="t",
            knowledge_tag="alg",
        )
        buffer = EpisodicBuffer(entries=(self.entry(backbone="bb", tag="alg"),))
        backend = SimulatedBackend(SimulatedProfile())
        assert backend.relevance(buffer, q4) == pytest.approx(0.3 / 3)
        assert backend.relevance(buffer, q1) == 0.0

    def test_monotone_in_relevant_entry_count(self):
        backend = SimulatedBackend(SimulatedProfile())
        previous = -1.0
        for count in range(4):
            buffer = EpisodicBuffer(entries=tuple(self.entry() for _ in range(count)))
            value = backend.relevance(buffer, Q)
            assert value >= previous
            previous = value

    def test_ledger_counts_past_capacity_with_clamp(self):
        entries = tuple(self.entry() for _ in range(5))
        ledger = SftLedger(applied=entries)
        q2 = Question(
            id="q2", backbone_id="bb", similarity_level=SimilarityLevel.S2, text="t"
        )
        # 5 entries at weight 0.9 over capacity 3 clamps at 1.0
        assert relevance_fraction(ledger, q2, {SimilarityLevel.S2: 0.9}) == 1.0


class TestFineTune:
    def test_applied_and_visible_through_relevance(self):
        profile = SimulatedProfile(base_success=0.3, memory_gain=0.4)
        backend = SimulatedBackend(profile)
        assert backend.fine_tune([(Q, "Answer: 7")]) is FineTuneResult.APPLIED
        assert len(backend.ledger) == 1
        ledger_state = SftLedger(applied=tuple(backend.ledger))
        before = profile.success_probability(0.0)
        after = profile.success_probability(backend.relevance(ledger_state, Q))
        assert after > before

    def test_zero_examples_is_noop(self):
        backend = SimulatedBackend(SimulatedProfile())
        assert backend.fine_tune([]) is FineTuneResult.APPLIED
        assert backend.ledger == []


class TestRequestValidation:
    def test_mode_payloads_required(self):
        with pytest.raises(ValueError, match="requires parent_path"):
            GenerationRequest(question=Q, mode=GenerationMode.TREE_STEP)
        with pytest.raises(ValueError, match="requires prior_answer"):
            GenerationRequest(question=Q, mode=GenerationMode.REFINEMENT, feedback="f")

    def test_extraneous_payloads_rejected(self):
        with pytest.raises(ValueError, match="does not take"):
            GenerationRequest(question=Q, mode=GenerationMode.FULL_ANSWER, prefix="p")

    def test_relevance_bounds(self):
        with pytest.raises(ValueError):
            GenerationRequest(question=Q, relevance=1.5)

    def test_sampling_param_defaults(self):
        params = SamplingParams()
        assert params.temperature == 0.7
        assert params.top_p == 0.9

    def test_sampling_param_validation(self):
        with pytest.raises(ValueError):
            SamplingParams(top_p=0.0)
        with pytest.raises(ValueError):
            SamplingParams(temperature=-1.0)


class TestReflect:
    def test_reflect_is_pure_and_does_not_touch_streams(self):
        profile = SimulatedProfile(base_success=0.5, seed=9)
        a = SimulatedBackend(profile)
        b = SimulatedBackend(profile)
        b.reflect("some prompt")
        assert a.reflect("p") == b.reflect("p")
        assert a.generate(request()).content == b.generate(request()).content

    def test_reflection_ends_with_marker(self):
        backend = SimulatedBackend(SimulatedProfile())
        assert backend.reflect("prompt").endswith("End of answer.")
