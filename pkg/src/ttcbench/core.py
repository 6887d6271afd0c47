"""Shared domain types for adaptive test-time compute runs.

Questions, candidate answers, budget metering, and per-question outcomes.
Everything here is backend- and strategy-agnostic; these types are the
currency the rest of the engine trades in.
"""

from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence


def mix_seed(*parts: object) -> int:
    """Stable 64-bit seed derived from the given parts (order-sensitive)."""
    text = "|".join(str(p) for p in parts)
    return int.from_bytes(hashlib.blake2b(text.encode(), digest_size=8).digest(), "big")


class EngineError(Exception):
    """Base class for engine failures."""


class ConfigurationError(EngineError):
    """Invalid or inconsistent run configuration."""


class BackendError(EngineError):
    """A generation/scoring backend failed; carries the raw cause as context."""


class SimilarityLevel(str, Enum):
    """How closely questions in a group resemble each other, most to least.

    S1: identical questions. S2: same numbers, different wording.
    S3: same structure, different numbers. S4: same underlying knowledge,
    different structure and numbers.
    """

    S1 = "S1"
    S2 = "S2"
    S3 = "S3"
    S4 = "S4"


class BudgetUnit(str, Enum):
    """The dominant scaling dimension a strategy charges compute in."""

    ANSWERS = "answers"
    NODES = "nodes"
    TOKENS = "tokens"


class ChargeResult(Enum):
    CHARGED = "charged"
    CAP_REACHED = "cap_reached"


@dataclass(frozen=True)
class Question:
    """A natural-language task with backbone identity and similarity level."""

    id: str
    backbone_id: str
    similarity_level: SimilarityLevel
    text: str
    reference_answer: Optional[str] = None
    knowledge_tag: Optional[str] = None

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("question id must be non-empty")
        if not self.backbone_id:
            raise ValueError("backbone_id must be non-empty")
        if not isinstance(self.similarity_level, SimilarityLevel):
            object.__setattr__(
                self, "similarity_level", SimilarityLevel(self.similarity_level)
            )


@dataclass(frozen=True)
class Candidate:
    """One generated answer unit (full answer, tree path, refinement, or trace).

    ``index`` is the generation order within one question's processing;
    ``unit_cost`` is how many budget units this candidate consumed.
    ``correct`` is tri-state: None when no reference answer was available.
    """

    index: int
    content: str
    score: float
    correct: Optional[bool] = None
    unit_cost: int = 1

    def __post_init__(self) -> None:
        if self.index < 0:
            raise ValueError("candidate index must be non-negative")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score out of range: {self.score}")
        if self.unit_cost < 1:
            raise ValueError("unit_cost must be a positive integer")


@dataclass(frozen=True)
class Threshold:
    """Score level at or above which an answer counts as satisfying."""

    tau: float = 0.9

    def __post_init__(self) -> None:
        if not 0.0 < self.tau < 1.0:
            raise ValueError(f"tau must lie in (0, 1), got {self.tau}")


@dataclass
class BudgetMeter:
    """Monotone compute-budget counter, hard-capped.

    Single-writer: one meter belongs to one question's processing context.
    ``consumed`` never decreases and never exceeds ``cap``.
    """

    unit: BudgetUnit
    cap: int
    consumed: int = 0

    def __post_init__(self) -> None:
        if self.cap < 1:
            raise ValueError("cap must be a positive integer")
        if self.consumed < 0 or self.consumed > self.cap:
            raise ValueError("consumed must start within [0, cap]")

    @property
    def remaining(self) -> int:
        return self.cap - self.consumed

    def charge(self, units: int) -> ChargeResult:
        """Charge ``units`` to the meter.

        Returns CAP_REACHED (without charging) when the charge would push
        past the cap; this is a signal, not an error.
        """
        if units < 1:
            raise ValueError("units must be >= 1")
        if self.consumed + units > self.cap:
            return ChargeResult.CAP_REACHED
        self.consumed += units
        return ChargeResult.CHARGED


def select_final(candidates: Sequence[Candidate]) -> int:
    """Index of the highest-scoring candidate; ties go to the lowest index."""
    if not candidates:
        raise ValueError("no candidates")
    best = 0
    for i, cand in enumerate(candidates):
        if cand.score > candidates[best].score:
            best = i
    return best


def is_satisfying(score: float, tau: Threshold) -> bool:
    """True iff ``score`` meets the threshold (boundary inclusive)."""
    if not 0.0 <= score <= 1.0:
        raise ValueError(f"score out of range: {score}")
    return score >= tau.tau


@dataclass(frozen=True)
class Outcome:
    """Final result of processing one question: candidates, selection, cost.

    Construction re-validates the selection and satisfaction flags against
    the candidate list, so an Outcome can never disagree with its contents.
    """

    question_id: str
    candidates: tuple[Candidate, ...]
    selected: int
    satisfied: bool
    cost: int
    correct: Optional[bool]
    unit: BudgetUnit

    def __post_init__(self) -> None:
        if not self.candidates:
            raise ValueError("outcome requires at least one candidate")
        indices = [c.index for c in self.candidates]
        if indices != list(range(len(self.candidates))):
            raise ValueError("candidate indices must be contiguous from 0")
        if self.selected != select_final(self.candidates):
            raise ValueError("selected is not the argmax candidate")
        if self.cost < 0:
            raise ValueError("cost must be non-negative")

    @property
    def answer(self) -> str:
        return self.candidates[self.selected].content


def build_outcome(
    question: Question, candidates: Sequence[Candidate], tau: Threshold, meter: BudgetMeter
) -> Outcome:
    """Assemble an Outcome from scored candidates and a meter snapshot."""
    selected = select_final(candidates)
    chosen = candidates[selected]
    return Outcome(
        question_id=question.id,
        candidates=tuple(candidates),
        selected=selected,
        satisfied=is_satisfying(chosen.score, tau),
        cost=meter.consumed,
        correct=chosen.correct,
        unit=meter.unit,
    )


# ---------------------------------------------------------------------------
# Answer equivalence
#
# Correctness accounting compares a candidate's final answer against the
# question's reference answer. Rules are frozen (see README): strip dollar
# signs and cheap LaTeX decorations, drop all whitespace, lowercase, then
# exact match with a numeric-equality fallback at 1e-9 relative tolerance.
# ---------------------------------------------------------------------------

ANSWER_MARKER = "Answer:"

_LATEX_NOISE = ("\\left", "\\right", "\\,", "\\;", "\\!")


def extract_answer(content: str) -> str:
    """Final answer span of a generation: text after the last 'Answer:' line."""
    pos = content.rfind(ANSWER_MARKER)
    if pos < 0:
        return content.strip()
    rest = content[pos + len(ANSWER_MARKER):]
    return rest.splitlines()[0].strip() if rest.strip() else ""


def normalize_answer(text: str) -> str:
    for noise in _LATEX_NOISE:
        text = text.replace(noise, "")
    text = text.replace("$", "").replace("{", "").replace("}", "")
    text = re.sub(r"\s+", "", text).lower()
    return text.rstrip(".")


def _as_number(text: str) -> Optional[float]:
    try:
        return float(text.replace(",", ""))
    except ValueError:
        return None


def check_answer(content: str, reference: Optional[str]) -> Optional[bool]:
    """Tri-state correctness: None when no reference answer exists."""
    if reference is None:
        return None
    got = normalize_answer(extract_answer(content))
    want = normalize_answer(reference)
    if got == want:
        return True
    got_num, want_num = _as_number(got), _as_number(want)
    if got_num is not None and want_num is not None:
        return math.isclose(got_num, want_num, rel_tol=1e-9, abs_tol=0.0)
    return False
