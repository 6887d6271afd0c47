"""Generation, scoring, and fine-tuning capability boundary.

Two implementations: a deterministic simulated backend whose proficiency
rises with relevant memory (the workhorse for verification and benchmarks),
and a wire backend speaking an OpenAI-compatible chat-completions protocol.
"""

from __future__ import annotations

import hashlib
import json
import os
import random
import re
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Protocol, Sequence

import httpx

from .core import BackendError, Question, SimilarityLevel, mix_seed
from .memory import (
    MEMORY_CAPACITY,
    FineTuneResult,
    Entry,
    MemoryState,
    relevance_fraction,
)

#: Markers the simulated backend embeds so downstream checks can observe
#: the internal success/failure draw.
SUCCESS_MARK = "[sim-ok]"
FAILURE_MARK = "[sim-fail]"

#: A tree-search node containing this line (with a perfect score) ends the search.
TERMINAL_MARK = "End of Answer"

THINK_OPEN = "<think>"
THINK_CLOSE = "</think>"

API_KEY_ENV = "TTC_API_KEY"

DEFAULT_RELEVANCE_WEIGHTS: dict[SimilarityLevel, float] = {
    SimilarityLevel.S1: 1.0,
    SimilarityLevel.S2: 0.9,
    SimilarityLevel.S3: 0.6,
    SimilarityLevel.S4: 0.3,
}


@dataclass(frozen=True)
class SamplingParams:
    temperature: float = 0.7
    top_p: float = 0.9
    max_tokens: int = 1024

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if not 0.0 < self.top_p <= 1.0:
            raise ValueError("top_p must lie in (0, 1]")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be positive")


class GenerationMode(str, Enum):
    FULL_ANSWER = "full_answer"
    TREE_STEP = "tree_step"
    REFINEMENT = "refinement"
    COT_CONTINUATION = "cot_continuation"
    FEEDBACK = "feedback"


@dataclass(frozen=True)
class GenerationRequest:
    """One generation call: the question, rendered memory, and mode payload.

    ``relevance`` is the caller-computed memory relevance for this question;
    the simulated backend folds it into its success probability.
    """

    question: Question
    memory_prompt: str = ""
    mode: GenerationMode = GenerationMode.FULL_ANSWER
    params: SamplingParams = field(default_factory=SamplingParams)
    relevance: float = 0.0
    parent_path: Optional[tuple[str, ...]] = None
    prior_answer: Optional[str] = None
    feedback: Optional[str] = None
    prefix: Optional[str] = None

    def __post_init__(self) -> None:
        needs = {
            GenerationMode.FULL_ANSWER: (),
            GenerationMode.TREE_STEP: ("parent_path",),
            GenerationMode.REFINEMENT: ("prior_answer", "feedback"),
            GenerationMode.COT_CONTINUATION: ("prefix",),
            GenerationMode.FEEDBACK: ("prior_answer",),
        }[self.mode]
        for name in ("parent_path", "prior_answer", "feedback", "prefix"):
            value = getattr(self, name)
            if name in needs and value is None:
                raise ValueError(f"mode {self.mode.value} requires {name}")
            if name not in needs and value is not None:
                raise ValueError(f"mode {self.mode.value} does not take {name}")
        if not 0.0 <= self.relevance <= 1.0:
            raise ValueError("relevance must lie in [0, 1]")


@dataclass(frozen=True)
class GenerationResult:
    content: str
    token_count: int


@dataclass(frozen=True)
class ScoreDistribution:
    """Distribution spec over a sub-interval of [0, 1]: a point mass or a
    uniform draw over [low, high)."""

    kind: str  # "point" | "uniform"
    low: float
    high: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in ("point", "uniform"):
            raise ValueError(f"unknown distribution kind: {self.kind}")
        hi = self.low if self.kind == "point" else self.high
        if not (0.0 <= self.low <= 1.0 and 0.0 <= hi <= 1.0):
            raise ValueError("distribution support must lie within [0, 1]")
        if self.kind == "uniform" and self.high < self.low:
            raise ValueError("uniform distribution needs low <= high")

    @classmethod
    def point(cls, value: float) -> "ScoreDistribution":
        return cls("point", value)

    @classmethod
    def uniform(cls, low: float, high: float) -> "ScoreDistribution":
        return cls("uniform", low, high)

    def sample(self, rng: random.Random) -> float:
        if self.kind == "point":
            return self.low
        # rng.random() < 1, so the upper bound stays exclusive
        return self.low + rng.random() * (self.high - self.low)


@dataclass(frozen=True)
class SimulatedProfile:
    """Behavioral knobs of the simulated model.

    Effective success probability is clamp(base_success + memory_gain *
    relevance, 0, 1), so additional relevant memory never degrades it.
    Default score distributions split at 0.9 so "successful" and
    "satisfying" coincide under the default threshold.
    """

    base_success: float = 0.5
    memory_gain: float = 0.0
    relevance_weights: dict[SimilarityLevel, float] = field(
        default_factory=lambda: dict(DEFAULT_RELEVANCE_WEIGHTS)
    )
    score_given_success: ScoreDistribution = ScoreDistribution.point(1.0)
    score_given_failure: ScoreDistribution = ScoreDistribution.uniform(0.0, 0.9)
    base_stop: float = 0.5
    stop_alpha: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.base_success <= 1.0:
            raise ValueError("base_success must lie in [0, 1]")
        if self.memory_gain < 0 or self.stop_alpha < 0 or self.base_stop < 0:
            raise ValueError("memory_gain, base_stop, and stop_alpha must be >= 0")

    def success_probability(self, relevance: float) -> float:
        return min(1.0, max(0.0, self.base_success + self.memory_gain * relevance))

    def stop_probability(self, relevance: float) -> float:
        return min(1.0, max(0.0, self.base_stop + self.stop_alpha * relevance))


class Backend(Protocol):
    """Capability surface strategies and the harness program against."""

    def generate(self, request: GenerationRequest) -> GenerationResult: ...

    def score(self, question: Question, content: str) -> float: ...

    def relevance(self, memory: MemoryState, question: Question) -> float: ...

    def fine_tune(self, examples: Sequence[tuple[Question, str]]) -> FineTuneResult: ...

    def reflect(self, prompt: str) -> str: ...

    def with_salt(self, salt: int) -> "Backend": ...


def _stream_seed(profile_seed: int, salt: int, question_id: str) -> int:
    return mix_seed(profile_seed, salt, question_id)


class SimulatedBackend:
    """Deterministic model stand-in.

    Each question gets its own draw stream derived from (profile seed,
    instance salt, question id), so runs on different questions may proceed
    concurrently without perturbing each other, and an identical request
    sequence replays bit-exactly.
    """

    #: Long-form reasoning proceeds in checkpoint chunks with a stop decision
    #: at each boundary (the wire protocol offers no such control).
    checkpointed_cot = True

    def __init__(self, profile: SimulatedProfile, salt: int = 0) -> None:
        self.profile = profile
        self.salt = salt
        self._streams: dict[str, random.Random] = {}
        self._lock = threading.Lock()
        self.ledger: list[Entry] = []

    def with_salt(self, salt: int) -> "SimulatedBackend":
        """Fresh view sharing the profile: own streams, own fine-tune ledger."""
        return SimulatedBackend(self.profile, salt=salt)

    def _rng(self, question_id: str) -> random.Random:
        with self._lock:
            rng = self._streams.get(question_id)
            if rng is None:
                rng = random.Random(_stream_seed(self.profile.seed, self.salt, question_id))
                self._streams[question_id] = rng
            return rng

    def generate(self, request: GenerationRequest) -> GenerationResult:
        q = request.question
        rng = self._rng(q.id)
        p = self.profile.success_probability(request.relevance)

        if request.mode is GenerationMode.FEEDBACK:
            assert request.prior_answer is not None
            if SUCCESS_MARK in request.prior_answer:
                content = "No error."
            else:
                content = "Error: a reasoning step does not hold; rework the solution."
            return GenerationResult(content, max(1, len(content.split())))

        if request.mode is GenerationMode.COT_CONTINUATION:
            return self._generate_cot_chunk(request, rng, p)

        success = rng.random() < p
        nonce = rng.getrandbits(32)
        answer = q.reference_answer if q.reference_answer is not None else "[no-reference]"

        if request.mode is GenerationMode.TREE_STEP:
            depth = len(request.parent_path or ()) + 1
            if success:
                content = (
                    f"{SUCCESS_MARK} closing step {nonce:08x} at depth {depth}\n"
                    f"Answer: {answer}\n{TERMINAL_MARK}"
                )
            else:
                content = f"{FAILURE_MARK} intermediate step {nonce:08x} at depth {depth}"
            return GenerationResult(content, max(1, len(content.split())))

        # full answers and refinements share the same shape
        if success:
            content = f"{SUCCESS_MARK} worked solution {nonce:08x} for {q.id}\nAnswer: {answer}"
        else:
            content = (
                f"{FAILURE_MARK} flawed attempt {nonce:08x} for {q.id}\n"
                f"Answer: wrong-{nonce:08x}"
            )
        return GenerationResult(content, max(1, len(content.split())))

    def _generate_cot_chunk(
        self, request: GenerationRequest, rng: random.Random, p: float
    ) -> GenerationResult:
        chunk_tokens = request.params.max_tokens
        stop = rng.random() < self.profile.stop_probability(request.relevance)
        nonce = rng.getrandbits(32)
        if stop:
            success = rng.random() < p
            q = request.question
            answer = q.reference_answer if q.reference_answer is not None else "[no-reference]"
            if success:
                tail = f"{SUCCESS_MARK}\nAnswer: {answer}"
            else:
                tail = f"{FAILURE_MARK}\nAnswer: wrong-{nonce:08x}"
            content = f"reasoning segment {nonce:08x}\n{THINK_CLOSE}\n{tail}"
        else:
            content = f"reasoning segment {nonce:08x}"
        return GenerationResult(content, chunk_tokens)

    def score(self, question: Question, content: str) -> float:
        if not content:
            raise ValueError("cannot score empty content")
        rng = self._rng(question.id)
        if SUCCESS_MARK in content:
            return self.profile.score_given_success.sample(rng)
        # failed attempts and unfinished traces both score below threshold
        return self.profile.score_given_failure.sample(rng)

    def relevance(self, memory: MemoryState, question: Question) -> float:
        return relevance_fraction(
            memory, question, self.profile.relevance_weights, MEMORY_CAPACITY
        )

    def fine_tune(self, examples: Sequence[tuple[Question, str]]) -> FineTuneResult:
        for question, answer in examples:
            self.ledger.append(
                Entry(question.text, answer, question.backbone_id, question.knowledge_tag)
            )
        return FineTuneResult.APPLIED

    def reflect(self, prompt: str) -> str:
        # Pure function of the prompt: reflections neither charge budget nor
        # consume from any question's draw stream.
        tag = hashlib.blake2b(prompt.encode(), digest_size=4).hexdigest()
        return (
            f"- Takeaway {tag}: reuse the approach that already worked for this "
            "question family.\n"
            "- Verify each computation before committing to the final answer.\n"
            "End of answer."
        )


_NUMBER_RE = re.compile(r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?")


def parse_first_number(text: str) -> Optional[float]:
    match = _NUMBER_RE.search(text)
    return float(match.group()) if match else None


class WireBackend:
    """OpenAI-compatible chat-completions client.

    Stateless per request; no retries — the caller owns repetition policy.
    Bearer token comes from the TTC_API_KEY environment variable.
    """

    checkpointed_cot = False

    def __init__(
        self,
        base_url: str,
        model: str,
        judge_model: Optional[str] = None,
        timeout: float = 120.0,
        transport: Optional[httpx.BaseTransport] = None,
    ) -> None:
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.judge_model = judge_model or model
        self._client = httpx.Client(timeout=timeout, transport=transport)

    def with_salt(self, salt: int) -> "WireBackend":
        return self

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(API_KEY_ENV)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def _chat(self, model: str, messages: list[dict], params: SamplingParams) -> dict:
        body = {
            "model": model,
            "messages": messages,
            "temperature": params.temperature,
            "top_p": params.top_p,
            "max_tokens": params.max_tokens,
        }
        try:
            response = self._client.post(
                f"{self.base_url}/v1/chat/completions",
                json=body,
                headers=self._headers(),
            )
        except httpx.HTTPError as exc:
            raise BackendError(f"transport failure: {exc}") from exc
        if response.status_code // 100 != 2:
            raise BackendError(f"unexpected status {response.status_code}: {response.text[:200]}")
        try:
            return response.json()
        except json.JSONDecodeError as exc:
            raise BackendError(f"malformed response body: {exc}") from exc

    @staticmethod
    def _content_of(payload: dict) -> str:
        try:
            content = payload["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"malformed response body: {exc!r}") from exc
        if not isinstance(content, str):
            raise BackendError("malformed response body: content is not a string")
        return content

    def _user_prompt(self, request: GenerationRequest) -> str:
        q = request.question
        mode = request.mode
        if mode is GenerationMode.FULL_ANSWER:
            return (
                f"{q.text}\n\nSolve the problem step by step. "
                "End with a line of the form 'Answer: <final answer>'."
            )
        if mode is GenerationMode.TREE_STEP:
            steps = "\n".join(request.parent_path or ("(no steps yet)",))
            return (
                f"Problem: {q.text}\n\nReasoning so far:\n{steps}\n\n"
                "Write the single next reasoning step. If the problem is now solved, "
                f"end with a line 'Answer: <final answer>' followed by the line '{TERMINAL_MARK}'."
            )
        if mode is GenerationMode.REFINEMENT:
            return (
                f"Problem: {q.text}\n\nPrevious answer:\n{request.prior_answer}\n\n"
                f"Feedback:\n{request.feedback}\n\n"
                "Revise the answer to address the feedback. "
                "End with a line 'Answer: <final answer>'."
            )
        if mode is GenerationMode.COT_CONTINUATION:
            return (
                f"{q.text}\n\nThink step by step inside {THINK_OPEN}...{THINK_CLOSE} tags, "
                "then give a line 'Answer: <final answer>'."
            )
        return (
            f"Problem: {q.text}\n\nCandidate answer:\n{request.prior_answer}\n\n"
            "Check the candidate answer. If it is fully correct, reply exactly "
            "'No error'. Otherwise describe the mistake."
        )

    def generate(self, request: GenerationRequest) -> GenerationResult:
        messages = []
        if request.memory_prompt:
            messages.append({"role": "system", "content": request.memory_prompt})
        messages.append({"role": "user", "content": self._user_prompt(request)})
        payload = self._chat(self.model, messages, request.params)
        content = self._content_of(payload)
        usage = payload.get("usage") or {}
        tokens = usage.get("completion_tokens")
        if not isinstance(tokens, int) or tokens < 1:
            raise BackendError("token count unavailable")
        return GenerationResult(content, tokens)

    def score(self, question: Question, content: str) -> float:
        if not content:
            raise ValueError("cannot score empty content")
        prompt = (
            f"Question: {question.text}\n\nCandidate answer:\n{content}\n\n"
            "Grade the candidate answer's quality on a scale from 0 to 1. "
            "Reply with a single number and nothing else."
        )
        payload = self._chat(
            self.judge_model,
            [{"role": "user", "content": prompt}],
            SamplingParams(temperature=0.0, top_p=1.0, max_tokens=16),
        )
        value = parse_first_number(self._content_of(payload))
        if value is None:
            raise BackendError("unscorable judge reply")
        return min(1.0, max(0.0, value))

    def relevance(self, memory: MemoryState, question: Question) -> float:
        return relevance_fraction(memory, question, DEFAULT_RELEVANCE_WEIGHTS, MEMORY_CAPACITY)

    def fine_tune(self, examples: Sequence[tuple[Question, str]]) -> FineTuneResult:
        return FineTuneResult.UNSUPPORTED

    def reflect(self, prompt: str) -> str:
        payload = self._chat(
            self.model,
            [{"role": "user", "content": prompt}],
            SamplingParams(),
        )
        return self._content_of(payload)
