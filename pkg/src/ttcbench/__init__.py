"""Adaptive test-time compute allocation with memory: orchestration engine,
benchmark harness, and numerical verification suite."""

from .core import (
    BudgetMeter,
    BudgetUnit,
    Candidate,
    Outcome,
    Question,
    SimilarityLevel,
    Threshold,
    is_satisfying,
    select_final,
)
from .backend import (
    GenerationMode,
    GenerationRequest,
    SamplingParams,
    ScoreDistribution,
    SimulatedBackend,
    SimulatedProfile,
    WireBackend,
)
from .memory import MemoryMethod, initial_memory, render
from .memory import update as memory_update
from .strategies import StrategyConfig, StrategyKind, run
from .harness import GridConfig, RunRecord, aggregate, pearson, relative_change, run_grid, run_sequence
from .persistence import ExperimentRunner, load_corpus

__version__ = "0.1.0"

__all__ = [
    "BudgetMeter",
    "BudgetUnit",
    "Candidate",
    "ExperimentRunner",
    "GenerationMode",
    "GenerationRequest",
    "GridConfig",
    "MemoryMethod",
    "Outcome",
    "Question",
    "RunRecord",
    "SamplingParams",
    "ScoreDistribution",
    "SimilarityLevel",
    "SimulatedBackend",
    "SimulatedProfile",
    "StrategyConfig",
    "StrategyKind",
    "Threshold",
    "WireBackend",
    "aggregate",
    "initial_memory",
    "is_satisfying",
    "load_corpus",
    "memory_update",
    "pearson",
    "relative_change",
    "render",
    "run",
    "run_grid",
    "run_sequence",
    "select_final",
]
