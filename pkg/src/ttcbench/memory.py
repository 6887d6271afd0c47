"""Memory mechanisms that carry experience across a question sequence.

Six methods: none, supervised fine-tune ledger, in-context episodic buffer,
per-case reflections, multi-case joint reflection, and a single running
reflection updated in place. States are immutable values; ``update`` returns
a new state and only ever admits qualifying answers (correct and satisfying).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional, Protocol, Sequence, Union

from .core import Outcome, Question, SimilarityLevel

logger = logging.getLogger(__name__)

SNAPSHOT_VERSION = 1

#: Buffer size for episodic examples and stored reflections.
MEMORY_CAPACITY = 3


class MemoryMethod(str, Enum):
    NONE = "none"
    SFT = "sft"
    IN_CONTEXT = "in_context"
    REFLECT = "reflect"
    MULTI_CASE_REFLECT = "multi_case_reflect"
    REFLECT_UPDATE = "reflect_update"


class FineTuneResult(Enum):
    APPLIED = "applied"
    UNSUPPORTED = "unsupported"


class ReflectorCapability(Protocol):
    """Generation capability needed by memory updates."""

    def reflect(self, prompt: str) -> str: ...

    def fine_tune(self, examples: Sequence[tuple[Question, str]]) -> FineTuneResult: ...


@dataclass(frozen=True)
class Entry:
    """One stored (question, answer) pair with its provenance."""

    question_text: str
    answer_text: str
    backbone_id: str
    knowledge_tag: Optional[str] = None


@dataclass(frozen=True)
class Reflection:
    text: str
    backbone_id: str
    knowledge_tag: Optional[str] = None


@dataclass(frozen=True)
class NoMemory:
    pass


@dataclass(frozen=True)
class EpisodicBuffer:
    """FIFO of past successful (question, answer) pairs, oldest evicted first."""

    entries: tuple[Entry, ...] = ()
    capacity: int = MEMORY_CAPACITY


@dataclass(frozen=True)
class ReflectionList:
    """FIFO of per-case reflections, one per stored success."""

    items: tuple[Reflection, ...] = ()
    capacity: int = MEMORY_CAPACITY


@dataclass(frozen=True)
class MultiCaseReflection:
    """Capped case buffer plus the single joint reflection over those cases."""

    cases: tuple[Entry, ...] = ()
    joint: Optional[Reflection] = None
    capacity: int = MEMORY_CAPACITY


@dataclass(frozen=True)
class RunningReflection:
    """Zero or one reflection text, rewritten after each qualifying answer."""

    text: str = ""
    source_count: int = 0
    backbone_id: str = ""
    knowledge_tag: Optional[str] = None


@dataclass(frozen=True)
class SftLedger:
    """Append-only record of examples applied as parametric updates."""

    applied: tuple[Entry, ...] = ()


MemoryState = Union[
    NoMemory, EpisodicBuffer, ReflectionList, MultiCaseReflection, RunningReflection, SftLedger
]


def initial_memory(method: MemoryMethod) -> MemoryState:
    return {
        MemoryMethod.NONE: NoMemory(),
        MemoryMethod.SFT: SftLedger(),
        MemoryMethod.IN_CONTEXT: EpisodicBuffer(),
        MemoryMethod.REFLECT: ReflectionList(),
        MemoryMethod.MULTI_CASE_REFLECT: MultiCaseReflection(),
        MemoryMethod.REFLECT_UPDATE: RunningReflection(),
    }[MemoryMethod(method)]


def method_for_state(memory: MemoryState) -> MemoryMethod:
    return {
        NoMemory: MemoryMethod.NONE,
        SftLedger: MemoryMethod.SFT,
        EpisodicBuffer: MemoryMethod.IN_CONTEXT,
        ReflectionList: MemoryMethod.REFLECT,
        MultiCaseReflection: MemoryMethod.MULTI_CASE_REFLECT,
        RunningReflection: MemoryMethod.REFLECT_UPDATE,
    }[type(memory)]


def is_qualifying(outcome: Outcome) -> bool:
    """Update gate: only correct-and-satisfying answers enter memory.

    When correctness is unknowable (no reference answer), the gate degrades
    to the score threshold alone; this is logged since it weakens the
    guarantee that stored experience is actually correct.
    """
    if outcome.correct is None:
        if outcome.satisfied:
            logger.warning(
                "degraded memory gating for %s: correctness unknown, admitting on score alone",
                outcome.question_id,
            )
        return outcome.satisfied
    return outcome.correct and outcome.satisfied


@dataclass(frozen=True)
class ReflectionPrompts:
    single_case: str
    multi_case: str
    update: str


_SINGLE_CASE_PROMPT = """\
You previously solved this question successfully.

Question: {question}
Answer: {answer}

Reflect on the solution. Write bullet points with generalizable takeaways
about how to approach questions of this kind. Do not restate the answer.
Finish with the line "End of answer."
"""

_MULTI_CASE_PROMPT = """\
You previously solved the following questions successfully.

{cases}

Write one joint reflection: bullet points with generalizable takeaways that
apply across all of these cases. Do not restate individual answers.
Finish with the line "End of answer."
"""

_UPDATE_PROMPT = """\
Current reflection:
{previous_reflection}

You just solved another question successfully.

Question: {question}
Answer: {answer}

Rewrite the reflection so it stays compact and general, folding in anything
new this case teaches. Use bullet points. Finish with the line "End of answer."
"""


def reflection_prompts() -> ReflectionPrompts:
    """The three fixed reflection prompt templates."""
    return ReflectionPrompts(
        single_case=_SINGLE_CASE_PROMPT,
        multi_case=_MULTI_CASE_PROMPT,
        update=_UPDATE_PROMPT,
    )


def _format_cases(cases: Sequence[Entry]) -> str:
    blocks = [
        f"Question: {entry.question_text}\nAnswer: {entry.answer_text}" for entry in cases
    ]
    return "\n\n".join(blocks)


def _push(buffer: tuple, item, capacity: int) -> tuple:
    out = buffer + (item,)
    return out[-capacity:]


def update(
    memory: MemoryState,
    question: Question,
    outcome: Outcome,
    reflector: ReflectorCapability,
) -> MemoryState:
    """Fold one question's outcome into memory, gated on qualifying answers.

    Reflection generation failures leave memory unchanged (a warning, never
    an abort); a fine-tune reported unsupported likewise records nothing.
    """
    if outcome.question_id != question.id:
        raise ValueError("outcome does not belong to this question")
    if not is_qualifying(outcome):
        return memory

    answer = outcome.answer
    entry = Entry(question.text, answer, question.backbone_id, question.knowledge_tag)
    prompts = reflection_prompts()

    if isinstance(memory, NoMemory):
        return memory

    if isinstance(memory, EpisodicBuffer):
        return replace(memory, entries=_push(memory.entries, entry, memory.capacity))

    if isinstance(memory, SftLedger):
        result = reflector.fine_tune([(question, answer)])
        if result is not FineTuneResult.APPLIED:
            logger.warning("fine-tune unsupported by backend; ledger unchanged")
            return memory
        return SftLedger(applied=memory.applied + (entry,))

    try:
        if isinstance(memory, ReflectionList):
            text = reflector.reflect(
                prompts.single_case.format(question=question.text, answer=answer)
            )
            item = Reflection(text, question.backbone_id, question.knowledge_tag)
            return replace(memory, items=_push(memory.items, item, memory.capacity))

        if isinstance(memory, MultiCaseReflection):
            cases = _push(memory.cases, entry, memory.capacity)
            text = reflector.reflect(prompts.multi_case.format(cases=_format_cases(cases)))
            joint = Reflection(text, question.backbone_id, question.knowledge_tag)
            return MultiCaseReflection(cases=cases, joint=joint, capacity=memory.capacity)

        if isinstance(memory, RunningReflection):
            text = reflector.reflect(
                prompts.update.format(
                    previous_reflection=memory.text or "(none yet)",
                    question=question.text,
                    answer=answer,
                )
            )
            return RunningReflection(
                text=text,
                source_count=memory.source_count + 1,
                backbone_id=question.backbone_id,
                knowledge_tag=question.knowledge_tag,
            )
    except Exception:
        logger.warning("reflection generation failed; memory unchanged", exc_info=True)
        return memory

    raise TypeError(f"unknown memory state: {type(memory).__name__}")


def render(memory: MemoryState) -> str:
    """Render memory into a prompt segment; pure function of the state."""
    if isinstance(memory, (NoMemory, SftLedger)):
        return ""
    if isinstance(memory, EpisodicBuffer):
        if not memory.entries:
            return ""
        return "Worked examples from earlier questions:\n\n" + _format_cases(memory.entries) + "\n"
    if isinstance(memory, ReflectionList):
        if not memory.items:
            return ""
        return "Consider:\n" + "\n".join(item.text for item in memory.items) + "\n"
    if isinstance(memory, MultiCaseReflection):
        if memory.joint is None:
            return ""
        return "Consider:\n" + memory.joint.text + "\n"
    if isinstance(memory, RunningReflection):
        if not memory.text:
            return ""
        return "Consider:\n" + memory.text + "\n"
    raise TypeError(f"unknown memory state: {type(memory).__name__}")


# ---------------------------------------------------------------------------
# Relevance
#
# The fraction of the current question's experience already held in memory:
# matching entries (same backbone, or same knowledge tag for S4 questions)
# weighted by the question's similarity level, divided by the buffer
# capacity. Capped buffers therefore plateau at full; the fine-tune ledger
# and the running reflection keep counting past capacity (only the final
# clamp bounds them), which is what lets parametric memory keep gaining
# after in-context buffers fill up.
# ---------------------------------------------------------------------------

def _matches(question: Question, backbone_id: str, knowledge_tag: Optional[str]) -> bool:
    if backbone_id == question.backbone_id:
        return True
    if question.similarity_level is SimilarityLevel.S4:
        return question.knowledge_tag is not None and knowledge_tag == question.knowledge_tag
    return False


def relevance_fraction(
    memory: MemoryState,
    question: Question,
    weights: dict[SimilarityLevel, float],
    capacity: int = MEMORY_CAPACITY,
) -> float:
    weight = weights.get(question.similarity_level, 0.0)
    if isinstance(memory, NoMemory):
        count = 0
    elif isinstance(memory, EpisodicBuffer):
        count = sum(_matches(question, e.backbone_id, e.knowledge_tag) for e in memory.entries)
    elif isinstance(memory, ReflectionList):
        count = sum(_matches(question, r.backbone_id, r.knowledge_tag) for r in memory.items)
    elif isinstance(memory, MultiCaseReflection):
        count = sum(_matches(question, e.backbone_id, e.knowledge_tag) for e in memory.cases)
    elif isinstance(memory, RunningReflection):
        count = (
            memory.source_count
            if memory.source_count and _matches(question, memory.backbone_id, memory.knowledge_tag)
            else 0
        )
    elif isinstance(memory, SftLedger):
        count = sum(_matches(question, e.backbone_id, e.knowledge_tag) for e in memory.applied)
    else:
        raise TypeError(f"unknown memory state: {type(memory).__name__}")
    return min(1.0, max(0.0, count * weight / capacity))


# ---------------------------------------------------------------------------
# Snapshots (versioned, round-trip stable)
# ---------------------------------------------------------------------------

def _entry_to_dict(entry: Entry) -> dict:
    return {
        "question_text": entry.question_text,
        "answer_text": entry.answer_text,
        "backbone_id": entry.backbone_id,
        "knowledge_tag": entry.knowledge_tag,
    }


def _reflection_to_dict(item: Reflection) -> dict:
    return {
        "text": item.text,
        "backbone_id": item.backbone_id,
        "knowledge_tag": item.knowledge_tag,
    }


def to_snapshot(memory: MemoryState) -> dict:
    method = method_for_state(memory)
    payload: dict
    if isinstance(memory, NoMemory):
        payload = {}
    elif isinstance(memory, EpisodicBuffer):
        payload = {
            "entries": [_entry_to_dict(e) for e in memory.entries],
            "capacity": memory.capacity,
        }
    elif isinstance(memory, ReflectionList):
        payload = {
            "items": [_reflection_to_dict(r) for r in memory.items],
            "capacity": memory.capacity,
        }
    elif isinstance(memory, MultiCaseReflection):
        payload = {
            "cases": [_entry_to_dict(e) for e in memory.cases],
            "joint": _reflection_to_dict(memory.joint) if memory.joint else None,
            "capacity": memory.capacity,
        }
    elif isinstance(memory, RunningReflection):
        payload = {
            "text": memory.text,
            "source_count": memory.source_count,
            "backbone_id": memory.backbone_id,
            "knowledge_tag": memory.knowledge_tag,
        }
    else:
        payload = {"applied": [_entry_to_dict(e) for e in memory.applied]}
    return {"version": SNAPSHOT_VERSION, "method": method.value, "payload": payload}


def from_snapshot(doc: dict) -> MemoryState:
    if doc.get("version") != SNAPSHOT_VERSION:
        raise ValueError(f"unsupported memory snapshot version: {doc.get('version')!r}")
    method = MemoryMethod(doc["method"])
    payload = doc["payload"]
    if method is MemoryMethod.NONE:
        return NoMemory()
    if method is MemoryMethod.IN_CONTEXT:
        return EpisodicBuffer(
            entries=tuple(Entry(**e) for e in payload["entries"]),
            capacity=payload["capacity"],
        )
    if method is MemoryMethod.REFLECT:
        return ReflectionList(
            items=tuple(Reflection(**r) for r in payload["items"]),
            capacity=payload["capacity"],
        )
    if method is MemoryMethod.MULTI_CASE_REFLECT:
        joint = payload["joint"]
        return MultiCaseReflection(
            cases=tuple(Entry(**e) for e in payload["cases"]),
            joint=Reflection(**joint) if joint else None,
            capacity=payload["capacity"],
        )
    if method is MemoryMethod.REFLECT_UPDATE:
        return RunningReflection(**payload)
    return SftLedger(applied=tuple(Entry(**e) for e in payload["applied"]))
