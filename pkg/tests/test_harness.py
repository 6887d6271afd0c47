"""Experiment loop, metrics, and aggregation."""

import statistics

import numpy as np
import pytest
import scipy.stats

from ttcbench.backend import SimulatedBackend, SimulatedProfile
from ttcbench.core import ConfigurationError, Question, SimilarityLevel
from ttcbench.harness import (
    AggregateView,
    GridConfig,
    RunRecord,
    aggregate,
    aggregate_all,
    build_corpus,
    grid_units,
    pearson,
    record_sort_key,
    relative_change,
    run_grid,
    run_sequence,
)
from ttcbench.memory import EpisodicBuffer, MemoryMethod, NoMemory
from ttcbench.strategies import StrategyConfig, StrategyKind


def make_questions(backbone: str, level: SimilarityLevel, count: int) -> list[Question]:
    return [
        Question(
            id=f"{backbone}-{level.value}-{i}",
            backbone_id=backbone,
            similarity_level=level,
            text=f"question {i} of {backbone}",
            reference_answer=str(i),
        )
        for i in range(count)
    ]


def make_corpus(backbones=("b1", "b2"), levels=(SimilarityLevel.S1,), count=5):
    questions = []
    for backbone in backbones:
        for level in levels:
            questions.extend(make_questions(backbone, level, count))
    return build_corpus(questions, digest="test-digest")


def bon() -> StrategyConfig:
    return StrategyConfig(kind=StrategyKind.BEST_OF_N)


class TestRunSequence:
    def test_single_question_gives_one_record(self):
        questions = make_questions("b", SimilarityLevel.S1, 1)
        backend = SimulatedBackend(SimulatedProfile(base_success=1.0, seed=1))
        records, memory = run_sequence(
            questions, MemoryMethod.NONE, bon(), backend, seed=0
        )
        assert len(records) == 1
        assert records[0].cost == 1
        assert records[0].accuracy == 1
        assert isinstance(memory, NoMemory)

    def test_memory_accumulates_and_cuts_cost(self):
        questions = make_questions("b", SimilarityLevel.S1, 5)
        profile = SimulatedProfile(base_success=0.3, memory_gain=0.4, seed=2)
        backend = SimulatedBackend(profile)
        first, late = [], []
        for rep in range(40):
            records, memory = run_sequence(
                questions, MemoryMethod.IN_CONTEXT, bon(), backend, seed=rep
            )
            first.append(records[0].cost)
            late.append(records[3].cost)
        assert statistics.fmean(late) < statistics.fmean(first)

    def test_in_context_memory_fills_buffer(self):
        questions = make_questions("b", SimilarityLevel.S1, 5)
        backend = SimulatedBackend(SimulatedProfile(base_success=1.0, seed=3))
        _, memory = run_sequence(questions, MemoryMethod.IN_CONTEXT, bon(), backend, seed=0)
        assert isinstance(memory, EpisodicBuffer)
        assert len(memory.entries) == 3

    def test_no_memory_results_are_order_independent(self):
        questions = make_questions("b", SimilarityLevel.S1, 6)
        backend = SimulatedBackend(SimulatedProfile(base_success=0.5, seed=4))

        def by_question(question_list):
            records, _ = run_sequence(
                question_list, MemoryMethod.NONE, bon(), backend, seed=9
            )
            return {
                question.id: (record.cost, record.accuracy)
                for question, record in zip(question_list, records)
            }

        assert by_question(questions) == by_question(list(reversed(questions)))

    def test_no_memory_mean_cost_flat_across_indices(self):
        questions = make_questions("b", SimilarityLevel.S1, 4)
        backend = SimulatedBackend(SimulatedProfile(base_success=0.5, seed=5))
        sums = np.zeros(4)
        reps = 200
        for rep in range(reps):
            records, _ = run_sequence(questions, MemoryMethod.NONE, bon(), backend, seed=rep)
            sums += [r.cost for r in records]
        means = sums / reps
        # all indices share the same distribution; 1.9375 +- generous CI
        assert np.all(np.abs(means - 1.9375) < 0.25)

    def test_prefix_of_longer_run_matches_shorter_run(self):
        questions = make_questions("b", SimilarityLevel.S1, 6)
        profile = SimulatedProfile(base_success=0.4, memory_gain=0.4, seed=6)
        backend = SimulatedBackend(profile)
        full, _ = run_sequence(questions, MemoryMethod.IN_CONTEXT, bon(), backend, seed=1)
        for t in (1, 3, 5):
            partial, _ = run_sequence(
                questions[:t], MemoryMethod.IN_CONTEXT, bon(), backend, seed=1
            )
            assert partial == full[:t]

    def test_empty_sequence_rejected(self):
        backend = SimulatedBackend(SimulatedProfile())
        with pytest.raises(ConfigurationError):
            run_sequence([], MemoryMethod.NONE, bon(), backend, seed=0)


class TestRelativeChange:
    def record(self, cost: int, accuracy: int = 1) -> RunRecord:
        return RunRecord(
            set_id="s", question_index=0, repetition=0, strategy="best_of_n",
            memory="none", similarity="S1", cost=cost, unit="answers",
            accuracy=accuracy, satisfied=True,
        )

    def test_reduction_headline_arithmetic(self):
        treatment = [self.record(4), self.record(5), self.record(4), self.record(5),
                     self.record(4)]
        baseline = [self.record(10)] * 5
        # treatment mean 4.4 over baseline 10: a 56% reduction
        assert relative_change(treatment, baseline, "cost") == pytest.approx(-56.0)

    def test_equal_means_are_zero(self):
        assert relative_change([self.record(3)], [self.record(3)], "cost") == 0.0

    def test_increase(self):
        assert relative_change([self.record(12)], [self.record(10)], "cost") == pytest.approx(20.0)

    def test_zero_baseline_flagged(self):
        with pytest.raises(ValueError, match="zero"):
            relative_change([self.record(3, 1)], [self.record(3, 0)], "accuracy")

    def test_empty_groups_rejected(self):
        with pytest.raises(ValueError):
            relative_change([], [self.record(3)], "cost")


class TestPearson:
    def test_perfect_positive(self):
        x = [1.0, 2.0, 3.0, 4.0]
        r, p = pearson(x, [2 * v + 1 for v in x])
        assert r == 1.0
        assert p == 0.0

    def test_perfect_negative(self):
        x = [1.0, 2.0, 3.0, 4.0]
        r, p = pearson(x, [-v for v in x])
        assert r == -1.0
        assert p == 0.0

    def test_hand_oracle_fixture(self):
        # deviations (-1.5,-.5,.5,1.5)x(-.5,-1.5,1.5,.5): cross sum 3, each norm 5
        r, _ = pearson([1, 2, 3, 4], [2, 1, 4, 3])
        assert abs(r - 0.6) < 1e-12

    def test_p_value_matches_reference_implementation(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            x = rng.normal(size=12)
            y = rng.normal(size=12)
            r, p = pearson(x, y)
            want_r, want_p = scipy.stats.pearsonr(x, y)
            assert abs(r - want_r) < 1e-12
            assert abs(p - want_p) < 1e-9

    def test_zero_variance_rejected(self):
        with pytest.raises(ValueError, match="variance"):
            pearson([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])

    def test_short_vectors_rejected(self):
        with pytest.raises(ValueError):
            pearson([1.0, 2.0], [2.0, 1.0])

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            pearson([1.0, 2.0, 3.0], [1.0, 2.0])


def grid(corpus=None, memory=(MemoryMethod.NONE, MemoryMethod.IN_CONTEXT), reps=4,
         strategies=None, levels=(SimilarityLevel.S1,), seed=0):
    return GridConfig(
        strategies=strategies or (bon(),),
        memory_methods=tuple(memory),
        similarity_levels=tuple(levels),
        corpus=corpus or make_corpus(),
        backend=SimulatedBackend(SimulatedProfile(base_success=0.4, memory_gain=0.4, seed=1)),
        master_seed=seed,
        repetitions=reps,
        question_sets=10,
    )


class TestRunGrid:
    def test_record_cardinality(self):
        # 2 memory x 1 strategy x 1 level x 2 sets x 4 reps x 20 questions
        corpus = make_corpus(count=20)
        records = run_grid(grid(corpus=corpus))
        assert len(records) == 2 * 1 * 1 * 2 * 4 * 20

    def test_deterministic_under_master_seed(self):
        a = run_grid(grid(seed=11))
        b = run_grid(grid(seed=11))
        assert a == b
        c = run_grid(grid(seed=12))
        assert a != c

    def test_missing_baseline_rejected(self):
        with pytest.raises(ConfigurationError, match="baseline"):
            grid(memory=(MemoryMethod.IN_CONTEXT,))

    def test_level_missing_from_corpus_rejected(self):
        with pytest.raises(ConfigurationError, match="no question sets"):
            grid(levels=(SimilarityLevel.S3,))

    def test_records_sorted(self):
        records = run_grid(grid(reps=2))
        assert records == sorted(records, key=record_sort_key)

    def test_unit_enumeration(self):
        g = grid(reps=3)
        units = grid_units(g)
        assert len(units) == 2 * 1 * 2 * 3  # memory x strategy x sets x reps
        assert len({u.key for u in units}) == len(units)


class TestAggregate:
    def fixture_records(self):
        def rec(memory, index, cost, accuracy=1):
            return RunRecord(
                set_id="s1", question_index=index, repetition=0, strategy="best_of_n",
                memory=memory, similarity="S1", cost=cost, unit="answers",
                accuracy=accuracy, satisfied=True,
            )

        return [
            rec("none", 0, 10),
            rec("none", 1, 10),
            rec("in_context", 0, 4),
            rec("in_context", 1, 6),
        ]

    def test_hand_computed_cell_rollup(self):
        views = aggregate(self.fixture_records(), "by_cell")
        by_memory = {v.memory: v for v in views}
        assert by_memory["none"].relative_cost_pct == 0.0
        assert by_memory["in_context"].relative_cost_pct == pytest.approx(-50.0)
        assert by_memory["in_context"].relative_accuracy_pct == pytest.approx(0.0)

    def test_hand_computed_index_curves(self):
        views = aggregate(self.fixture_records(), "by_index")
        treatment = {v.question_index: v for v in views if v.memory == "in_context"}
        assert treatment[0].relative_cost_pct == pytest.approx(-60.0)
        assert treatment[1].relative_cost_pct == pytest.approx(-40.0)

    def test_similarity_and_memory_rollups(self):
        views = aggregate(self.fixture_records(), "by_similarity")
        assert len(views) == 1
        assert views[0].similarity == "S1"
        assert views[0].relative_cost_pct == pytest.approx(-50.0)
        views = aggregate(self.fixture_records(), "by_memory")
        assert views[0].memory == "in_context"
        assert views[0].relative_cost_pct == pytest.approx(-50.0)

    def test_all_baseline_input_is_identically_zero(self):
        records = [r for r in self.fixture_records() if r.memory == "none"]
        views = aggregate(records, "by_cell")
        assert all(v.relative_cost_pct == 0.0 for v in views)
        assert all(v.relative_accuracy_pct == 0.0 for v in views)

    def test_by_index_preserves_index_count(self):
        records = self.fixture_records()
        views = aggregate(records, "by_index")
        indices = {v.question_index for v in views}
        assert indices == {0, 1}

    def test_missing_baseline_rejected(self):
        records = [r for r in self.fixture_records() if r.memory == "in_context"]
        with pytest.raises(ConfigurationError, match="baseline"):
            aggregate(records, "by_cell")

    def test_unknown_grouping_rejected(self):
        with pytest.raises(ValueError, match="grouping"):
            aggregate(self.fixture_records(), "by_moon_phase")

    def test_aggregate_all_covers_groupings(self):
        views = aggregate_all(self.fixture_records())
        assert {v.grouping for v in views} == {
            "by_cell", "by_similarity", "by_memory", "by_index",
        }

    def test_view_row_has_empty_inapplicable_fields(self):
        view = AggregateView(
            grouping="by_memory", memory="sft", relative_cost_pct=-1.0,
            relative_accuracy_pct=0.5,
        )
        row = view.to_row()
        assert row[1] == "" and row[3] == "" and row[4] == ""


class TestBaselineNeutrality:
    def test_none_cells_identically_zero_in_real_grid(self):
        records = run_grid(grid(reps=2))
        views = aggregate(records, "by_cell")
        for view in views:
            if view.memory == "none":
                assert view.relative_cost_pct == 0.0
                assert view.relative_accuracy_pct == 0.0


def test_record_conservation():
    corpus = make_corpus(count=7)
    g = grid(corpus=corpus, reps=3)
    records = run_grid(g)
    cells = len(g.strategies) * len(g.memory_methods) * len(g.similarity_levels)
    assert len(records) == cells * 2 * 7 * 3
