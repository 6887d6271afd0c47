"""Numerical verification of the engine's monotonicity guarantees.

Three families of checks, all reported as structured documents:

* an exact mean-to-tail bound for scores in [0, 1], swept over random
  discrete distributions with both sides enumerated in exact arithmetic;
* the closed-form expected cost of adaptive best-of-n sampling, checked
  against Monte-Carlo runs of the real strategy (costs fall as per-answer
  success probability rises, while satisfaction rates do not fall);
* stochastic-dominance propagation through a fixed generation DAG whose
  child scores respond monotonically to parent scores.

Tolerances are confidence-interval based (3 sigma), never fixed epsilons:
the claims are about expectations.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field
from fractions import Fraction
from graphlib import CycleError, TopologicalSorter
from typing import Callable, Optional, Sequence

import numpy as np

from .backend import SimulatedBackend, SimulatedProfile
from .core import Question, SimilarityLevel, Threshold
from .memory import NoMemory
from .strategies import StrategyConfig, StrategyKind, run_best_of_n


@dataclass(frozen=True)
class DiscreteScoreDist:
    """Finitely supported score distribution on [0, 1]."""

    support: tuple[tuple[float, float], ...]  # (value, probability) pairs

    def __post_init__(self) -> None:
        if not self.support:
            raise ValueError("support must be non-empty")
        total = 0.0
        for value, prob in self.support:
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"support value out of [0, 1]: {value}")
            if prob < 0.0:
                raise ValueError("probabilities must be non-negative")
            total += prob
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"probabilities must sum to 1, got {total}")

    def mean(self) -> float:
        return sum(value * prob for value, prob in self.support)

    def tail(self, tau: float) -> float:
        """P(S >= tau), by enumeration."""
        return sum(prob for value, prob in self.support if value >= tau)

    def cdf(self, x: float) -> float:
        return sum(prob for value, prob in self.support if value <= x)

    def sample(self, rng: random.Random) -> float:
        u = rng.random()
        acc = 0.0
        for value, prob in self.support:
            acc += prob
            if u < acc:
                return value
        return self.support[-1][0]

    def dominates(self, other: "DiscreteScoreDist", slack: float = 1e-12) -> bool:
        """True when this distribution's tail is at least ``other``'s at every
        threshold drawn from either support."""
        thresholds = {v for v, _ in self.support} | {v for v, _ in other.support}
        return all(self.tail(t) >= other.tail(t) - slack for t in thresholds)


def mean_to_tail_bound(mean: float, tau: float) -> float:
    """Lower bound on P(S >= tau) from E[S] alone, for S in [0, 1]:
    max(0, (mean - tau) / (1 - tau))."""
    if not 0.0 <= mean <= 1.0:
        raise ValueError(f"mean must lie in [0, 1], got {mean}")
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    return max(0.0, (mean - tau) / (1.0 - tau))


def max_tail_independent(p: float, k: int) -> float:
    """P(best of k independent draws satisfies) when each satisfies w.p. p."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must lie in [0, 1], got {p}")
    if k < 1:
        raise ValueError("k must be a positive integer")
    return 1.0 - (1.0 - p) ** k


def expected_adaptive_cost(p: float, n_max: int) -> float:
    """Expected answers drawn by adaptive best-of-n with per-answer success
    probability p: sum over k of (1-p)^(k-1), k = 1..n_max."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must lie in [0, 1], got {p}")
    if n_max < 1:
        raise ValueError("n_max must be a positive integer")
    return sum((1.0 - p) ** (k - 1) for k in range(1, n_max + 1))


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@dataclass
class CheckReport:
    check: str
    params: dict
    statistics: list[dict] = field(default_factory=list)
    passed: bool = True
    failures: list[str] = field(default_factory=list)

    def fail(self, message: str) -> None:
        self.passed = False
        self.failures.append(message)

    def to_dict(self) -> dict:
        return {
            "check": self.check,
            "params": self.params,
            "statistics": self.statistics,
            "pass": self.passed,
            "failures": self.failures,
        }


# ---------------------------------------------------------------------------
# Mean-to-tail bound sweep (exact arithmetic on both sides)
# ---------------------------------------------------------------------------

def random_discrete_dist(rng: random.Random, max_support: int = 8) -> DiscreteScoreDist:
    size = rng.randint(2, max_support)
    weights = [rng.randint(1, 100) for _ in range(size)]
    total = sum(weights)
    values = sorted(rng.random() for _ in range(size))
    support = tuple((v, w / total) for v, w in zip(values, weights))
    return DiscreteScoreDist(support)


def lemma_holds_exactly(
    values: Sequence[float], weights: Sequence[int], tau: float
) -> bool:
    """Exact-arithmetic comparison of P(S >= tau) against the mean bound.

    Floats are exact binary rationals, so Fractions make both sides exact;
    no tolerance is involved.
    """
    total = sum(weights)
    probs = [Fraction(w, total) for w in weights]
    vals = [Fraction(v) for v in values]
    t = Fraction(tau)
    mean = sum(v * p for v, p in zip(vals, probs))
    tail = sum(p for v, p in zip(vals, probs) if v >= t)
    bound = max(Fraction(0), (mean - t) / (1 - t))
    return tail >= bound


def verify_lemma_sweep(n_cases: int = 1000, seed: int = 0) -> CheckReport:
    """Random discrete distributions and thresholds; the bound must hold for
    every single one, exactly."""
    rng = random.Random(seed)
    report = CheckReport("mean_to_tail_bound_sweep", {"cases": n_cases, "seed": seed})
    violations = 0
    for case in range(n_cases):
        size = rng.randint(2, 8)
        weights = [rng.randint(1, 100) for _ in range(size)]
        values = [rng.random() for _ in range(size)]
        tau = rng.uniform(0.05, 0.95)
        if not lemma_holds_exactly(values, weights, tau):
            violations += 1
            report.fail(f"case {case}: exact bound violated at tau={tau}")
        # the floating-point operation must agree with the enumeration too
        total = sum(weights)
        dist = DiscreteScoreDist(tuple((v, w / total) for v, w in zip(values, weights)))
        if dist.tail(tau) < mean_to_tail_bound(dist.mean(), tau) - 1e-12:
            violations += 1
            report.fail(f"case {case}: float bound violated at tau={tau}")
    report.statistics.append({"cases": n_cases, "violations": violations})
    return report


# ---------------------------------------------------------------------------
# Adaptive-cost simulation (Theorem-style check: rising quality never raises
# expected budget, and satisfaction rates never fall)
# ---------------------------------------------------------------------------

_PROBE_QUESTION = Question(
    id="theory-probe",
    backbone_id="theory",
    similarity_level=SimilarityLevel.S1,
    text="probe",
    reference_answer="42",
)


def simulate_adaptive_costs(
    p: float, n_max: int, trials: int, seed: int, tau: float = 0.9
) -> tuple[np.ndarray, np.ndarray]:
    """Run the actual best-of-n strategy ``trials`` times at success rate p.

    Returns (costs, satisfied) arrays; each trial uses a distinct derived
    stream so draws are independent across trials.
    """
    profile = SimulatedProfile(base_success=p, seed=seed)
    base = SimulatedBackend(profile)
    config = StrategyConfig(kind=StrategyKind.BEST_OF_N, tau=Threshold(tau), n_max=n_max)
    costs = np.empty(trials, dtype=np.int64)
    satisfied = np.empty(trials, dtype=bool)
    memory = NoMemory()
    for trial in range(trials):
        outcome = run_best_of_n(_PROBE_QUESTION, memory, config, base.with_salt(trial))
        costs[trial] = outcome.cost
        satisfied[trial] = outcome.satisfied
    return costs, satisfied


def _sem(values: np.ndarray) -> float:
    if len(values) < 2:
        return 0.0
    return float(np.std(values, ddof=1) / math.sqrt(len(values)))


def verify_theorem1(
    p_schedule: Sequence[float],
    n_max: int = 5,
    trials: int = 10_000,
    seed: int = 0,
    tau: float = 0.9,
) -> CheckReport:
    """Non-increasing expected budget under non-decreasing answer quality.

    Premise: the per-answer success probability schedule is non-decreasing.
    Asserts (within 3-sigma bands) that empirical mean costs are
    non-increasing, match the closed form pointwise, and that the fraction
    of satisfying outcomes is non-decreasing.
    """
    schedule = list(p_schedule)
    if any(b < a for a, b in zip(schedule, schedule[1:])):
        raise ValueError("p_schedule must be non-decreasing (the premise)")
    report = CheckReport(
        "adaptive_cost_monotonicity",
        {"p_schedule": schedule, "n_max": n_max, "trials": trials, "seed": seed, "tau": tau},
    )
    rows = []
    for t, p in enumerate(schedule):
        costs, satisfied = simulate_adaptive_costs(p, n_max, trials, seed + 7919 * t, tau)
        mean_cost = float(costs.mean())
        sem = _sem(costs.astype(np.float64))
        sat_rate = float(satisfied.mean())
        sat_sem = math.sqrt(max(sat_rate * (1.0 - sat_rate), 1e-12) / trials)
        closed = expected_adaptive_cost(p, n_max)
        rows.append(
            {
                "t": t,
                "p": p,
                "mean_cost": mean_cost,
                "cost_sem": sem,
                "closed_form": closed,
                "satisfied_rate": sat_rate,
                "satisfied_sem": sat_sem,
            }
        )
        if abs(mean_cost - closed) > 3.0 * sem + 1e-9:
            report.fail(
                f"t={t}: mean cost {mean_cost:.4f} deviates from closed form {closed:.4f}"
            )
    for prev, cur in zip(rows, rows[1:]):
        band = 3.0 * math.hypot(prev["cost_sem"], cur["cost_sem"])
        if cur["mean_cost"] > prev["mean_cost"] + band:
            report.fail(
                f"mean cost rose from t={prev['t']} to t={cur['t']}: "
                f"{prev['mean_cost']:.4f} -> {cur['mean_cost']:.4f}"
            )
        sat_band = 3.0 * math.hypot(prev["satisfied_sem"], cur["satisfied_sem"])
        if cur["satisfied_rate"] < prev["satisfied_rate"] - sat_band:
            report.fail(
                f"satisfaction rate fell from t={prev['t']} to t={cur['t']}: "
                f"{prev['satisfied_rate']:.4f} -> {cur['satisfied_rate']:.4f}"
            )
    report.statistics = rows
    return report


# ---------------------------------------------------------------------------
# Dominance propagation through a fixed generation DAG
# ---------------------------------------------------------------------------

#: Child response rule: maps (node, parent scores, rng) to the child's score.
#: Must be monotone in every coordinate of the parent score vector.
ChildRule = Callable[[int, tuple[float, ...], random.Random], float]


@dataclass(frozen=True)
class MonotoneDag:
    """A generation DAG held fixed across the two compared rounds.

    Roots carry a pair of score distributions (earlier round, later round);
    non-root scores come from ``child_rule`` applied to parent scores.
    """

    parents: dict[int, tuple[int, ...]]
    root_dists: dict[int, tuple[DiscreteScoreDist, DiscreteScoreDist]]
    child_rule: Optional[ChildRule] = None

    def __post_init__(self) -> None:
        nodes = set(self.parents)
        for node, parent_ids in self.parents.items():
            for pid in parent_ids:
                if pid not in nodes:
                    raise ValueError(f"node {node} references unknown parent {pid}")
        roots = {n for n, ps in self.parents.items() if not ps}
        if set(self.root_dists) != roots:
            raise ValueError("root_dists must cover exactly the parentless nodes")
        if roots != nodes and self.child_rule is None:
            raise ValueError("child_rule required when non-root nodes exist")
        try:
            tuple(TopologicalSorter(self.parents).static_order())
        except CycleError as exc:
            raise ValueError(f"generation graph must be acyclic: {exc}") from exc

    def topological_order(self) -> tuple[int, ...]:
        return tuple(TopologicalSorter(self.parents).static_order())

    def sample_round(self, round_index: int, rng: random.Random) -> dict[int, float]:
        scores: dict[int, float] = {}
        for node in self.topological_order():
            parent_ids = self.parents[node]
            if not parent_ids:
                scores[node] = self.root_dists[node][round_index].sample(rng)
            else:
                assert self.child_rule is not None
                parent_scores = tuple(scores[p] for p in parent_ids)
                scores[node] = self.child_rule(node, parent_scores, rng)
        return scores


def verify_theorem2_dag(
    dag: MonotoneDag,
    tau: float = 0.9,
    trials: int = 10_000,
    seed: int = 0,
    cdf_grid: Sequence[float] = tuple(i / 10 for i in range(10)),
) -> CheckReport:
    """Improved roots must not lower the chance the best node satisfies.

    Precondition: every root's later-round distribution stochastically
    dominates its earlier-round one (checked exactly on the discrete
    supports). The Monte-Carlo pass then checks, within 3-sigma bands, that
    dominance propagates to every node and to the max-score tail at tau.
    """
    for node, (early, late) in dag.root_dists.items():
        if not late.dominates(early):
            raise ValueError(
                f"premise violated: round-2 distribution of root {node} does not "
                "dominate round 1"
            )
    report = CheckReport(
        "dominance_propagation",
        {"nodes": len(dag.parents), "tau": tau, "trials": trials, "seed": seed},
    )
    order = dag.topological_order()
    samples = {0: {n: np.empty(trials) for n in order}, 1: {n: np.empty(trials) for n in order}}
    max_hit = {0: np.empty(trials, dtype=bool), 1: np.empty(trials, dtype=bool)}
    for round_index in (0, 1):
        for trial in range(trials):
            rng = random.Random((seed * 2 + round_index) * 1_000_003 + trial)
            scores = dag.sample_round(round_index, rng)
            for node, value in scores.items():
                samples[round_index][node][trial] = value
            max_hit[round_index][trial] = max(scores.values()) >= tau
    tails = {r: float(max_hit[r].mean()) for r in (0, 1)}
    sems = {
        r: math.sqrt(max(tails[r] * (1 - tails[r]), 1e-12) / trials) for r in (0, 1)
    }
    band = 3.0 * math.hypot(sems[0], sems[1])
    if tails[1] < tails[0] - band:
        report.fail(f"max-score tail fell: {tails[0]:.4f} -> {tails[1]:.4f}")
    per_node = []
    for node in order:
        worst = 0.0
        for x in cdf_grid:
            cdf0 = float((samples[0][node] <= x).mean())
            cdf1 = float((samples[1][node] <= x).mean())
            sem = math.sqrt(0.25 / trials)
            if cdf1 > cdf0 + 3.0 * math.hypot(sem, sem):
                report.fail(f"node {node}: dominance violated at threshold {x}")
            worst = max(worst, cdf1 - cdf0)
        per_node.append({"node": node, "max_cdf_gap": worst})
    report.statistics = [
        {"round": 0, "max_tail": tails[0], "sem": sems[0]},
        {"round": 1, "max_tail": tails[1], "sem": sems[1]},
        {"per_node": per_node},
    ]
    return report


def bernoulli_score_dist(p: float) -> DiscreteScoreDist:
    """Score 1.0 with probability p, else 0.0."""
    if p >= 1.0:
        return DiscreteScoreDist(((1.0, 1.0),))
    if p <= 0.0:
        return DiscreteScoreDist(((0.0, 1.0),))
    return DiscreteScoreDist(((0.0, 1.0 - p), (1.0, p)))


def two_root_dag(p_early: float, p_late: float) -> MonotoneDag:
    """Two independent roots whose satisfaction probability improves."""
    return MonotoneDag(
        parents={1: (), 2: ()},
        root_dists={
            1: (bernoulli_score_dist(p_early), bernoulli_score_dist(p_late)),
            2: (bernoulli_score_dist(p_early), bernoulli_score_dist(p_late)),
        },
    )


def chain_dag(
    root_support: Sequence[tuple[float, float]] = ((0.3, 0.25), (0.5, 0.5), (0.7, 0.25)),
    shift: float = 0.1,
    noise: float = 0.15,
) -> MonotoneDag:
    """Three-node chain 1 -> 2 -> 3; children echo their parent plus noise.

    The root's later-round distribution is the earlier one shifted up by
    ``shift`` (a deterministic improvement, hence dominant).
    """
    early = DiscreteScoreDist(tuple(root_support))
    late = DiscreteScoreDist(
        tuple((min(1.0, v + shift), p) for v, p in root_support)
    )

    def rule(node: int, parent_scores: tuple[float, ...], rng: random.Random) -> float:
        return min(1.0, max(0.0, parent_scores[0] + rng.uniform(-noise, noise)))

    return MonotoneDag(
        parents={1: (), 2: (1,), 3: (2,)},
        root_dists={1: (early, late)},
        child_rule=rule,
    )


def verify_independent_tail_grid(
    ps: Sequence[float] = (0.1, 0.3, 0.5, 0.8),
    ks: Sequence[int] = (1, 2, 4),
    trials: int = 10_000,
    seed: int = 0,
    tau: float = 0.9,
) -> CheckReport:
    """Empirical max-score tails for independent candidates match 1-(1-p)^k."""
    report = CheckReport(
        "independent_max_tail", {"ps": list(ps), "ks": list(ks), "trials": trials, "seed": seed}
    )
    rng = random.Random(seed)
    for p in ps:
        dist = bernoulli_score_dist(p)
        for k in ks:
            hits = 0
            for _ in range(trials):
                if max(dist.sample(rng) for _ in range(k)) >= tau:
                    hits += 1
            emp = hits / trials
            exact = max_tail_independent(p, k)
            sem = math.sqrt(max(exact * (1 - exact), 1e-12) / trials)
            report.statistics.append(
                {"p": p, "k": k, "empirical": emp, "exact": exact, "sem": sem}
            )
            if abs(emp - exact) > 3.0 * sem + 1e-9:
                report.fail(f"(p={p}, k={k}): empirical {emp:.4f} vs exact {exact:.4f}")
    return report
