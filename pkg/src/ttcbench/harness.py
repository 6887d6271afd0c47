"""Experiment loop: sequential question processing with memory accumulation,
the no-memory baseline, repetition averaging, and baseline-relative
aggregations.

Per-question randomness is keyed by (master seed, repetition, question id)
and deliberately excludes the memory method and strategy, so treatment cells
share common random numbers with their baselines.
"""

from __future__ import annotations

import logging
import statistics
from dataclasses import dataclass, field, replace
from typing import Iterator, Optional, Sequence

import numpy as np
from scipy.special import stdtr

from .backend import Backend
from .core import (
    ConfigurationError,
    Question,
    SimilarityLevel,
    mix_seed,
)
from .memory import MemoryMethod, MemoryState, initial_memory
from .memory import update as memory_update
from . import strategies
from .strategies import StrategyConfig, StrategyRunError, UNIT_FOR_KIND

logger = logging.getLogger(__name__)

#: Column order of the records CSV.
RECORD_FIELDS = (
    "set_id",
    "question_index",
    "repetition",
    "strategy",
    "memory",
    "similarity",
    "cost",
    "unit",
    "accuracy",
    "satisfied",
)

#: Column order of the aggregates CSV; inapplicable keys are left empty.
AGGREGATE_FIELDS = (
    "grouping",
    "strategy",
    "memory",
    "similarity",
    "question_index",
    "relative_cost_pct",
    "relative_accuracy_pct",
)

GROUPINGS = ("by_cell", "by_similarity", "by_memory", "by_index")

EXPECTED_SET_SIZE = 20


@dataclass(frozen=True)
class QuestionSet:
    """One ordered sequence of related questions (one backbone, one level)."""

    set_id: str
    backbone_id: str
    similarity_level: SimilarityLevel
    questions: tuple[Question, ...]

    def __post_init__(self) -> None:
        if not self.questions:
            raise ValueError(f"question set {self.set_id} is empty")


@dataclass(frozen=True)
class Corpus:
    questions: tuple[Question, ...]
    sets: tuple[QuestionSet, ...]
    digest: str = ""

    def sets_for(self, level: SimilarityLevel) -> tuple[QuestionSet, ...]:
        return tuple(s for s in self.sets if s.similarity_level == level)


def build_corpus(questions: Sequence[Question], digest: str = "") -> Corpus:
    """Group questions by (backbone, similarity level), preserving order."""
    seen_ids: set[str] = set()
    for q in questions:
        if q.id in seen_ids:
            raise ValueError(f"duplicate question id: {q.id}")
        seen_ids.add(q.id)
    groups: dict[tuple[str, SimilarityLevel], list[Question]] = {}
    order: list[tuple[str, SimilarityLevel]] = []
    for q in questions:
        key = (q.backbone_id, q.similarity_level)
        if key not in groups:
            groups[key] = []
            order.append(key)
        groups[key].append(q)
    sets = []
    for backbone_id, level in order:
        members = groups[(backbone_id, level)]
        if len(members) != EXPECTED_SET_SIZE:
            logger.warning(
                "question set %s:%s has %d questions (expected %d)",
                backbone_id, level.value, len(members), EXPECTED_SET_SIZE,
            )
        sets.append(
            QuestionSet(
                set_id=f"{backbone_id}:{level.value}",
                backbone_id=backbone_id,
                similarity_level=level,
                questions=tuple(members),
            )
        )
    return Corpus(questions=tuple(questions), sets=tuple(sets), digest=digest)


@dataclass(frozen=True)
class RunRecord:
    """Per-question result row. ``failed`` marks backend aborts; it is not
    part of the CSV schema."""

    set_id: str
    question_index: int
    repetition: int
    strategy: str
    memory: str
    similarity: str
    cost: int
    unit: str
    accuracy: int
    satisfied: bool
    failed: bool = False

    def to_row(self) -> list[str]:
        return [
            self.set_id,
            str(self.question_index),
            str(self.repetition),
            self.strategy,
            self.memory,
            self.similarity,
            str(self.cost),
            self.unit,
            str(self.accuracy),
            str(self.satisfied).lower(),
        ]

    @classmethod
    def from_row(cls, row: dict[str, str]) -> "RunRecord":
        return cls(
            set_id=row["set_id"],
            question_index=int(row["question_index"]),
            repetition=int(row["repetition"]),
            strategy=row["strategy"],
            memory=row["memory"],
            similarity=row["similarity"],
            cost=int(row["cost"]),
            unit=row["unit"],
            accuracy=int(row["accuracy"]),
            satisfied=row["satisfied"] == "true",
        )


def record_sort_key(record: RunRecord) -> tuple:
    return (
        record.strategy,
        record.memory,
        record.similarity,
        record.set_id,
        record.question_index,
        record.repetition,
    )


def unit_key(strategy: str, memory: str, similarity: str, set_id: str, repetition: int) -> str:
    return f"{strategy}|{memory}|{similarity}|{set_id}|rep{repetition}"


def unit_key_for_record(record: RunRecord) -> str:
    return unit_key(
        record.strategy, record.memory, record.similarity, record.set_id, record.repetition
    )


@dataclass(frozen=True)
class ExperimentConfig:
    """One grid cell: a strategy, a memory method, and a similarity level."""

    strategy: StrategyConfig
    memory_method: MemoryMethod
    similarity_level: SimilarityLevel
    repetitions: int = 4
    question_sets: int = 10
    seed: int = 0

    def __post_init__(self) -> None:
        if self.repetitions < 1:
            raise ConfigurationError("repetitions must be >= 1")
        if self.question_sets < 1:
            raise ConfigurationError("question_sets must be >= 1")


@dataclass(frozen=True)
class GridConfig:
    """Full benchmark matrix over strategies, memory methods, and levels."""

    strategies: tuple[StrategyConfig, ...]
    memory_methods: tuple[MemoryMethod, ...]
    similarity_levels: tuple[SimilarityLevel, ...]
    corpus: Corpus
    backend: Backend
    master_seed: int = 0
    repetitions: int = 4
    question_sets: int = 10

    def __post_init__(self) -> None:
        if not self.strategies or not self.memory_methods or not self.similarity_levels:
            raise ConfigurationError("grid requires strategies, memory methods, and levels")
        kinds = [s.kind for s in self.strategies]
        if len(set(kinds)) != len(kinds):
            raise ConfigurationError("duplicate strategy kinds in grid")
        treatments = [m for m in self.memory_methods if m is not MemoryMethod.NONE]
        if treatments and MemoryMethod.NONE not in self.memory_methods:
            raise ConfigurationError(
                "grid needs the no-memory baseline for relative metrics"
            )
        if self.repetitions < 1 or self.question_sets < 1:
            raise ConfigurationError("repetitions and question_sets must be >= 1")
        for level in self.similarity_levels:
            if not self.corpus.sets_for(level):
                raise ConfigurationError(f"corpus has no question sets at level {level.value}")

    def cells(self) -> Iterator[ExperimentConfig]:
        for strategy in self.strategies:
            for memory_method in self.memory_methods:
                for level in self.similarity_levels:
                    yield ExperimentConfig(
                        strategy=strategy,
                        memory_method=memory_method,
                        similarity_level=level,
                        repetitions=self.repetitions,
                        question_sets=self.question_sets,
                        seed=self.master_seed,
                    )

    def config_fingerprint(self) -> dict:
        """Stable description used for resume-compatibility hashing."""
        return {
            "strategies": [
                {
                    "kind": s.kind.value,
                    "tau": s.tau.tau,
                    "n_max": s.n_max,
                    "max_depth": s.max_depth,
                    "max_node": s.max_node,
                    "branching": s.branching,
                    "prune_ratio": s.prune_ratio,
                    "max_iterations": s.max_iterations,
                    "max_tokens": s.max_tokens,
                    "cot_checkpoint": s.cot_checkpoint,
                    "batch_size": s.batch_size,
                }
                for s in self.strategies
            ],
            "memory_methods": [m.value for m in self.memory_methods],
            "similarity_levels": [l.value for l in self.similarity_levels],
            "master_seed": self.master_seed,
            "repetitions": self.repetitions,
            "question_sets": self.question_sets,
        }


@dataclass(frozen=True)
class GridUnit:
    """Smallest independently runnable slice: one cell, one set, one repetition."""

    strategy: StrategyConfig
    memory_method: MemoryMethod
    question_set: QuestionSet
    repetition: int

    @property
    def key(self) -> str:
        return unit_key(
            self.strategy.kind.value,
            self.memory_method.value,
            self.question_set.similarity_level.value,
            self.question_set.set_id,
            self.repetition,
        )


def grid_units(grid: GridConfig) -> list[GridUnit]:
    units = []
    for cell in grid.cells():
        sets = grid.corpus.sets_for(cell.similarity_level)[: grid.question_sets]
        for question_set in sets:
            for rep in range(grid.repetitions):
                units.append(
                    GridUnit(
                        strategy=cell.strategy,
                        memory_method=cell.memory_method,
                        question_set=question_set,
                        repetition=rep,
                    )
                )
    return units


def run_sequence(
    questions: Sequence[Question],
    memory_method: MemoryMethod,
    strategy: StrategyConfig,
    backend: Backend,
    seed: int,
    set_id: str = "set0",
    repetition: int = 0,
) -> tuple[list[RunRecord], MemoryState]:
    """Process one question sequence in order, folding outcomes into memory.

    Backend failures mark the question's record as failed (zero accuracy,
    cost as charged so far) and the sequence continues. The returned memory
    state entering question t depends only on questions 1..t-1.
    """
    if not questions:
        raise ConfigurationError("sequence requires at least one question")
    view = backend.with_salt(seed)
    memory = initial_memory(memory_method)
    records: list[RunRecord] = []
    for index, question in enumerate(questions):
        base = dict(
            set_id=set_id,
            question_index=index,
            repetition=repetition,
            strategy=strategy.kind.value,
            memory=memory_method.value,
            similarity=question.similarity_level.value,
        )
        try:
            outcome = strategies.run(question, memory, strategy, view)
        except StrategyRunError as exc:
            logger.warning("backend failure on %s: %s", question.id, exc)
            records.append(
                RunRecord(
                    **base,
                    cost=exc.consumed,
                    unit=exc.unit.value,
                    accuracy=0,
                    satisfied=False,
                    failed=True,
                )
            )
            continue
        records.append(
            RunRecord(
                **base,
                cost=outcome.cost,
                unit=outcome.unit.value,
                accuracy=int(outcome.correct is True),
                satisfied=outcome.satisfied,
            )
        )
        memory = memory_update(memory, question, outcome, view)
    return records, memory


def unit_salt(master_seed: int, set_id: str, repetition: int) -> int:
    # memory method and strategy intentionally excluded: common random numbers
    return mix_seed(master_seed, set_id, repetition)


def run_unit(grid: GridConfig, unit: GridUnit) -> list[RunRecord]:
    records, _ = run_sequence(
        unit.question_set.questions,
        unit.memory_method,
        unit.strategy,
        grid.backend,
        seed=unit_salt(grid.master_seed, unit.question_set.set_id, unit.repetition),
        set_id=unit.question_set.set_id,
        repetition=unit.repetition,
    )
    return records


def run_grid(grid: GridConfig) -> list[RunRecord]:
    """Execute every cell x set x repetition; deterministic under the master seed."""
    records: list[RunRecord] = []
    for unit in grid_units(grid):
        records.extend(run_unit(grid, unit))
    records.sort(key=record_sort_key)
    return records


# ---------------------------------------------------------------------------
# Metrics and aggregation
# ---------------------------------------------------------------------------

def _metric_values(records: Sequence[RunRecord], metric: str) -> list[float]:
    if metric == "cost":
        return [float(r.cost) for r in records]
    if metric == "accuracy":
        return [float(r.accuracy) for r in records]
    raise ValueError(f"unknown metric: {metric}")


def relative_change(
    treatment: Sequence[RunRecord], baseline: Sequence[RunRecord], metric: str
) -> float:
    """Percent change of the treatment mean over the baseline mean."""
    if not treatment or not baseline:
        raise ValueError("treatment and baseline must both be non-empty")
    treatment_mean = statistics.fmean(_metric_values(treatment, metric))
    baseline_mean = statistics.fmean(_metric_values(baseline, metric))
    if baseline_mean == 0.0:
        raise ValueError(f"baseline mean of {metric} is zero; relative change undefined")
    return 100.0 * (treatment_mean - baseline_mean) / baseline_mean


def pearson(x: Sequence[float], y: Sequence[float]) -> tuple[float, float]:
    """Sample Pearson correlation and its two-sided p-value (t approximation
    with n-2 degrees of freedom)."""
    if len(x) != len(y):
        raise ValueError("vectors must have equal length")
    n = len(x)
    if n < 3:
        raise ValueError("need at least 3 points")
    xa = np.asarray(x, dtype=np.float64)
    ya = np.asarray(y, dtype=np.float64)
    dx = xa - xa.mean()
    dy = ya - ya.mean()
    sxx = float(np.dot(dx, dx))
    syy = float(np.dot(dy, dy))
    if sxx == 0.0 or syy == 0.0:
        raise ValueError("zero variance input; correlation undefined")
    r = float(np.dot(dx, dy)) / float(np.sqrt(sxx * syy))
    r = max(-1.0, min(1.0, r))
    if abs(r) == 1.0:
        return r, 0.0
    t_stat = r * np.sqrt((n - 2) / (1.0 - r * r))
    p_value = 2.0 * float(stdtr(n - 2, -abs(t_stat)))
    return r, p_value


@dataclass(frozen=True)
class AggregateView:
    """One baseline-relative aggregate row; unused keys stay empty."""

    grouping: str
    relative_cost_pct: float
    relative_accuracy_pct: float
    strategy: str = ""
    memory: str = ""
    similarity: str = ""
    question_index: Optional[int] = None

    def to_row(self) -> list[str]:
        return [
            self.grouping,
            self.strategy,
            self.memory,
            self.similarity,
            "" if self.question_index is None else str(self.question_index),
            repr(self.relative_cost_pct),
            repr(self.relative_accuracy_pct),
        ]


def _group_by(records: Sequence[RunRecord], key_fn) -> dict:
    groups: dict = {}
    for record in records:
        groups.setdefault(key_fn(record), []).append(record)
    return groups


def _safe_relative(treatment, baseline, metric) -> float:
    try:
        return relative_change(treatment, baseline, metric)
    except ValueError:
        return float("nan")


def _by_cell(records: Sequence[RunRecord]) -> list[AggregateView]:
    cells = _group_by(records, lambda r: (r.strategy, r.memory, r.similarity))
    views = []
    for (strategy, memory, similarity) in sorted(cells):
        if memory == MemoryMethod.NONE.value:
            # baseline relative to itself: identically zero
            views.append(
                AggregateView(
                    grouping="by_cell",
                    strategy=strategy,
                    memory=memory,
                    similarity=similarity,
                    relative_cost_pct=0.0,
                    relative_accuracy_pct=0.0,
                )
            )
            continue
        baseline_key = (strategy, MemoryMethod.NONE.value, similarity)
        if baseline_key not in cells:
            raise ConfigurationError(
                f"missing baseline cell for strategy={strategy} similarity={similarity}"
            )
        treatment = cells[(strategy, memory, similarity)]
        baseline = cells[baseline_key]
        views.append(
            AggregateView(
                grouping="by_cell",
                strategy=strategy,
                memory=memory,
                similarity=similarity,
                relative_cost_pct=_safe_relative(treatment, baseline, "cost"),
                relative_accuracy_pct=_safe_relative(treatment, baseline, "accuracy"),
            )
        )
    return views


def _rollup(cell_views: Sequence[AggregateView], grouping: str, key_attr: str) -> list[AggregateView]:
    treatment_views = [v for v in cell_views if v.memory != MemoryMethod.NONE.value]
    groups: dict[str, list[AggregateView]] = {}
    for view in treatment_views:
        groups.setdefault(getattr(view, key_attr), []).append(view)
    rolled = []
    for key in sorted(groups):
        members = groups[key]
        rolled.append(
            AggregateView(
                grouping=grouping,
                relative_cost_pct=statistics.fmean(v.relative_cost_pct for v in members),
                relative_accuracy_pct=statistics.fmean(
                    v.relative_accuracy_pct for v in members
                ),
                **{key_attr: key},
            )
        )
    return rolled


def _by_index(records: Sequence[RunRecord]) -> list[AggregateView]:
    # per-index baseline means: the curves compare like index with like index
    cells = _group_by(
        records, lambda r: (r.strategy, r.memory, r.similarity, r.question_index)
    )
    views = []
    for (strategy, memory, similarity, index) in sorted(cells):
        if memory == MemoryMethod.NONE.value:
            views.append(
                AggregateView(
                    grouping="by_index",
                    strategy=strategy,
                    memory=memory,
                    similarity=similarity,
                    question_index=index,
                    relative_cost_pct=0.0,
                    relative_accuracy_pct=0.0,
                )
            )
            continue
        baseline_key = (strategy, MemoryMethod.NONE.value, similarity, index)
        if baseline_key not in cells:
            raise ConfigurationError(
                f"missing baseline records for strategy={strategy} "
                f"similarity={similarity} index={index}"
            )
        views.append(
            AggregateView(
                grouping="by_index",
                strategy=strategy,
                memory=memory,
                similarity=similarity,
                question_index=index,
                relative_cost_pct=_safe_relative(
                    cells[(strategy, memory, similarity, index)], cells[baseline_key], "cost"
                ),
                relative_accuracy_pct=_safe_relative(
                    cells[(strategy, memory, similarity, index)], cells[baseline_key], "accuracy"
                ),
            )
        )
    return views


def aggregate(records: Sequence[RunRecord], grouping: str) -> list[AggregateView]:
    """Baseline-relative aggregate table for one grouping."""
    if not records:
        raise ValueError("no records to aggregate")
    if grouping == "by_cell":
        return _by_cell(records)
    if grouping == "by_similarity":
        return _rollup(_by_cell(records), "by_similarity", "similarity")
    if grouping == "by_memory":
        return _rollup(_by_cell(records), "by_memory", "memory")
    if grouping == "by_index":
        return _by_index(records)
    raise ValueError(f"unknown grouping: {grouping}")


def aggregate_all(records: Sequence[RunRecord]) -> list[AggregateView]:
    views: list[AggregateView] = []
    for grouping in GROUPINGS:
        views.extend(aggregate(records, grouping))
    return views
