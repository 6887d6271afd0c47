"""Adaptive test-time scaling strategies.

Four procedures — best-of-n sampling, depth-first tree search, self-refine,
and long chain-of-thought — each early-stopping once a satisfying answer
appears, and each metering compute in its own dominant unit (answers, nodes,
or tokens).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

from .backend import (
    Backend,
    GenerationMode,
    GenerationRequest,
    SamplingParams,
    TERMINAL_MARK,
    THINK_CLOSE,
    THINK_OPEN,
)
from .core import (
    BackendError,
    BudgetMeter,
    BudgetUnit,
    Candidate,
    ChargeResult,
    ConfigurationError,
    EngineError,
    Outcome,
    Question,
    Threshold,
    build_outcome,
    check_answer,
    is_satisfying,
)
from .memory import MemoryState, render

#: Feedback containing this marker ends a self-refine loop.
NO_ERROR_MARK = "No error"


class StrategyKind(str, Enum):
    BEST_OF_N = "best_of_n"
    DFS = "dfs"
    SELF_REFINE = "self_refine"
    LONG_COT = "long_cot"


UNIT_FOR_KIND: dict[StrategyKind, BudgetUnit] = {
    StrategyKind.BEST_OF_N: BudgetUnit.ANSWERS,
    StrategyKind.DFS: BudgetUnit.NODES,
    StrategyKind.SELF_REFINE: BudgetUnit.ANSWERS,
    StrategyKind.LONG_COT: BudgetUnit.TOKENS,
}


@dataclass(frozen=True)
class StrategyConfig:
    """Knobs for all four strategies; defaults are the benchmark settings."""

    kind: StrategyKind
    tau: Threshold = field(default_factory=Threshold)
    n_max: int = 5
    max_depth: int = 15
    max_node: int = 50
    branching: int = 3
    prune_ratio: float = 0.4
    max_iterations: int = 15
    max_tokens: int = 3500
    cot_checkpoint: int = 256
    batch_size: int = 1

    def __post_init__(self) -> None:
        caps = {
            "n_max": self.n_max,
            "max_depth": self.max_depth,
            "max_node": self.max_node,
            "branching": self.branching,
            "max_iterations": self.max_iterations,
            "max_tokens": self.max_tokens,
            "cot_checkpoint": self.cot_checkpoint,
            "batch_size": self.batch_size,
        }
        for name, value in caps.items():
            if value < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {value}")
        if not 0.0 <= self.prune_ratio <= 1.0:
            raise ConfigurationError("prune_ratio must lie in [0, 1]")
        if not isinstance(self.kind, StrategyKind):
            object.__setattr__(self, "kind", StrategyKind(self.kind))


@dataclass(frozen=True)
class TreeNode:
    """One generated reasoning step in the search tree."""

    id: int
    parent: Optional[int]
    depth: int
    content: str
    score: float
    terminal: bool

    @classmethod
    def create(
        cls, id: int, parent: Optional[int], depth: int, content: str, score: float
    ) -> "TreeNode":
        # terminal iff the step declares an end marker with a perfect score
        terminal = TERMINAL_MARK in content and score == 1.0
        return cls(id=id, parent=parent, depth=depth, content=content, score=score, terminal=terminal)


class StrategyRunError(EngineError):
    """Backend failure during a strategy run; carries the budget charged so far."""

    def __init__(self, message: str, consumed: int, unit: BudgetUnit) -> None:
        super().__init__(message)
        self.consumed = consumed
        self.unit = unit


def _question_context(
    question: Question, memory: MemoryState, backend: Backend
) -> tuple[str, float]:
    """Memory is fixed for the duration of one question: render once, weigh once."""
    return render(memory), backend.relevance(memory, question)


def run_best_of_n(
    question: Question,
    memory: MemoryState,
    config: StrategyConfig,
    backend: Backend,
    adaptive: bool = True,
) -> Outcome:
    """Sample answers in batches, stopping at the first satisfying one.

    A started batch is charged fully even when the stop condition hits
    mid-batch. With ``adaptive=False`` the stop check is disabled and all
    ``n_max`` answers are generated — the exhaustive run the adaptive
    candidate list must be a prefix of.
    """
    if config.kind is not StrategyKind.BEST_OF_N:
        raise ConfigurationError(f"expected kind=best_of_n, got {config.kind.value}")
    meter = BudgetMeter(BudgetUnit.ANSWERS, cap=config.n_max)
    memory_prompt, relevance = _question_context(question, memory, backend)
    params = SamplingParams()
    candidates: list[Candidate] = []
    stop = False
    try:
        while meter.consumed < config.n_max and not stop:
            batch_size = min(config.batch_size, config.n_max - meter.consumed)
            batch: list[str] = []
            for _ in range(batch_size):
                result = backend.generate(
                    GenerationRequest(
                        question=question,
                        memory_prompt=memory_prompt,
                        mode=GenerationMode.FULL_ANSWER,
                        params=params,
                        relevance=relevance,
                    )
                )
                meter.charge(1)
                batch.append(result.content)
            # score and stop-check strictly in generation order
            for content in batch:
                score = backend.score(question, content)
                correct = check_answer(content, question.reference_answer)
                candidates.append(Candidate(len(candidates), content, score, correct, 1))
                if adaptive and is_satisfying(score, config.tau) and correct is not False:
                    stop = True
    except BackendError as exc:
        raise StrategyRunError(str(exc), meter.consumed, meter.unit) from exc
    return build_outcome(question, candidates, config.tau, meter)


def run_dfs(
    question: Question, memory: MemoryState, config: StrategyConfig, backend: Backend
) -> Outcome:
    """Depth-first search over reasoning steps with score-guided pruning.

    At each expansion, children are generated and scored one at a time; a
    child at or above the threshold cuts off its remaining siblings and is
    descended into immediately. Otherwise children scoring below
    prune_ratio x (best sibling) are discarded and the survivors are
    descended best-first. The search ends on a terminal node, on the node
    cap, or when the tree is exhausted.

    Every generated node becomes a candidate whose content is the full
    reasoning path down to that node.
    """
    if config.kind is not StrategyKind.DFS:
        raise ConfigurationError(f"expected kind=dfs, got {config.kind.value}")
    meter = BudgetMeter(BudgetUnit.NODES, cap=config.max_node)
    memory_prompt, relevance = _question_context(question, memory, backend)
    params = SamplingParams()
    candidates: list[Candidate] = []
    nodes: list[TreeNode] = []

    def generate_child(parent: Optional[int], path: tuple[str, ...], depth: int) -> TreeNode:
        result = backend.generate(
            GenerationRequest(
                question=question,
                memory_prompt=memory_prompt,
                mode=GenerationMode.TREE_STEP,
                params=params,
                relevance=relevance,
                parent_path=path,
            )
        )
        score = backend.score(question, result.content)
        meter.charge(1)
        node = TreeNode.create(len(nodes), parent, depth, result.content, score)
        nodes.append(node)
        full_path = "\n".join(path + (result.content,))
        candidates.append(
            Candidate(node.id, full_path, score, check_answer(full_path, question.reference_answer), 1)
        )
        return node

    def descend(parent: Optional[int], path: tuple[str, ...], depth: int) -> str:
        if depth > config.max_depth:
            return "dead"
        children: list[TreeNode] = []
        chosen: Optional[TreeNode] = None
        for _ in range(config.branching):
            if meter.remaining == 0:
                return "cap"
            node = generate_child(parent, path, depth)
            children.append(node)
            if node.terminal:
                return "found"
            if node.score >= config.tau.tau:
                # prune the remaining siblings: they are never generated
                chosen = node
                break
        if chosen is not None:
            survivors = [chosen]
        else:
            cutoff = config.prune_ratio * max(c.score for c in children)
            survivors = sorted(
                (c for c in children if c.score >= cutoff),
                key=lambda c: (-c.score, c.id),
            )
        for child in survivors:
            outcome = descend(child.id, path + (child.content,), depth + 1)
            if outcome != "dead":
                return outcome
        return "dead"

    try:
        descend(None, (), 1)
    except BackendError as exc:
        raise StrategyRunError(str(exc), meter.consumed, meter.unit) from exc
    return build_outcome(question, candidates, config.tau, meter)


def run_self_refine(
    question: Question, memory: MemoryState, config: StrategyConfig, backend: Backend
) -> Outcome:
    """Generate, then iteratively refine until feedback reports no error.

    Feedback requests are free: the budget counts generated answers only
    (the initial one plus each refinement), capped at 1 + max_iterations.
    """
    if config.kind is not StrategyKind.SELF_REFINE:
        raise ConfigurationError(f"expected kind=self_refine, got {config.kind.value}")
    meter = BudgetMeter(BudgetUnit.ANSWERS, cap=1 + config.max_iterations)
    memory_prompt, relevance = _question_context(question, memory, backend)
    params = SamplingParams()
    candidates: list[Candidate] = []
    try:
        result = backend.generate(
            GenerationRequest(
                question=question,
                memory_prompt=memory_prompt,
                mode=GenerationMode.FULL_ANSWER,
                params=params,
                relevance=relevance,
            )
        )
        meter.charge(1)
        current = result.content
        score = backend.score(question, current)
        candidates.append(
            Candidate(0, current, score, check_answer(current, question.reference_answer), 1)
        )
        for _ in range(config.max_iterations):
            feedback = backend.generate(
                GenerationRequest(
                    question=question,
                    memory_prompt=memory_prompt,
                    mode=GenerationMode.FEEDBACK,
                    params=params,
                    relevance=relevance,
                    prior_answer=current,
                )
            ).content
            if NO_ERROR_MARK in feedback:
                break
            refined = backend.generate(
                GenerationRequest(
                    question=question,
                    memory_prompt=memory_prompt,
                    mode=GenerationMode.REFINEMENT,
                    params=params,
                    relevance=relevance,
                    prior_answer=current,
                    feedback=feedback,
                )
            )
            meter.charge(1)
            current = refined.content
            score = backend.score(question, current)
            candidates.append(
                Candidate(
                    len(candidates), current, score, check_answer(current, question.reference_answer), 1
                )
            )
    except BackendError as exc:
        raise StrategyRunError(str(exc), meter.consumed, meter.unit) from exc
    return build_outcome(question, candidates, config.tau, meter)


def run_long_cot(
    question: Question, memory: MemoryState, config: StrategyConfig, backend: Backend
) -> Outcome:
    """Token-metered free-form reasoning.

    Backends that support checkpointed decoding generate in chunks of
    ``cot_checkpoint`` tokens and decide continue-vs-stop at each boundary
    (closing the trace with a think-end tag on stop). Other backends get a
    single capped request and are charged the reported completion tokens.
    The whole trace is the single candidate.
    """
    if config.kind is not StrategyKind.LONG_COT:
        raise ConfigurationError(f"expected kind=long_cot, got {config.kind.value}")
    meter = BudgetMeter(BudgetUnit.TOKENS, cap=config.max_tokens)
    memory_prompt, relevance = _question_context(question, memory, backend)
    try:
        if getattr(backend, "checkpointed_cot", False):
            prefix = THINK_OPEN
            while meter.remaining > 0:
                chunk = min(config.cot_checkpoint, meter.remaining)
                result = backend.generate(
                    GenerationRequest(
                        question=question,
                        memory_prompt=memory_prompt,
                        mode=GenerationMode.COT_CONTINUATION,
                        params=SamplingParams(max_tokens=chunk),
                        relevance=relevance,
                        prefix=prefix,
                    )
                )
                meter.charge(min(result.token_count, meter.remaining))
                prefix = prefix + "\n" + result.content
                if THINK_CLOSE in result.content:
                    break
            content = prefix
        else:
            result = backend.generate(
                GenerationRequest(
                    question=question,
                    memory_prompt=memory_prompt,
                    mode=GenerationMode.COT_CONTINUATION,
                    params=SamplingParams(max_tokens=config.max_tokens),
                    relevance=relevance,
                    prefix="",
                )
            )
            meter.charge(min(result.token_count, meter.remaining))
            content = result.content
        score = backend.score(question, content)
        candidates = [
            Candidate(0, content, score, check_answer(content, question.reference_answer), meter.consumed)
        ]
    except BackendError as exc:
        raise StrategyRunError(str(exc), meter.consumed, meter.unit) from exc
    return build_outcome(question, candidates, config.tau, meter)


_RUNNERS = {
    StrategyKind.BEST_OF_N: run_best_of_n,
    StrategyKind.DFS: run_dfs,
    StrategyKind.SELF_REFINE: run_self_refine,
    StrategyKind.LONG_COT: run_long_cot,
}


def run(
    question: Question, memory: MemoryState, config: StrategyConfig, backend: Backend
) -> Outcome:
    """Dispatch to the configured strategy."""
    runner = _RUNNERS.get(config.kind)
    if runner is None:
        raise ConfigurationError(f"unknown strategy kind: {config.kind!r}")
    return runner(question, memory, config, backend)
