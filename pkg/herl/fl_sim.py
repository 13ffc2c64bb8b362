"""
Federated round engine
Samples participants, simulates local training under each tier's HE plan,
times the tiers, aggregates with FedAvg and tracks convergence.
"""

import logging
import math
import time
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field

from herl.client_profile import ClientProfile, LatencyBreakdown, Population, estimate_round_latency, latency_breakdown
from herl.errors import InputError, PlanError
from herl.he_plan import CostModel, ParameterPlan, SecurityTable, precision_penalty, security_bits, validate_plan
from herl.rl_agent import (
    HerlAgent,
    ParticipantOutcome,
    QLearningConfig,
    QTable,
    RewardConfig,
    TierDecision,
    TierRoundObservation,
)
from herl.tiering import CRITERIA, CriterionContext, Tiering, assign_new_client, build_tiering

logger = logging.getLogger(__name__)

STRATEGIES = ("baseline", "heuristic", "adaptive", "herl")
AGGREGATION_MODES = ("sync", "async")

BASELINE_PLAN = ParameterPlan(log_n=14, q_bits=200)
HEURISTIC_PLAN = ParameterPlan(log_n=13, q_bits=100)


class TrainerModel(BaseModel):
    """Saturating utility proxy standing in for real local training."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    a_max: float = Field(0.8, gt=0, le=1)
    rate: float = Field(0.05, gt=0)
    noise_sd: float = Field(0.0, ge=0)
    heterogeneity_sd: float = Field(0.0, ge=0)


@dataclass
class GlobalModel:
    accuracy: float = 0.0
    params: Optional[np.ndarray] = None
    round: int = 0


@dataclass
class TierReport:
    tier: int
    plan: ParameterPlan
    round_time: float
    participants: int
    security_loss: int
    mean_delta_util: float
    reward: Optional[float] = None
    straggler: Optional[LatencyBreakdown] = None


@dataclass
class RoundReport:
    round: int
    tiers: List[TierReport]
    global_accuracy: float
    sim_time: float
    agent_seconds: float = 0.0

    @property
    def security_loss(self) -> int:
        return sum(t.security_loss for t in self.tiers)

    @property
    def participants(self) -> int:
        return sum(t.participants for t in self.tiers)

    @property
    def reward(self) -> Optional[float]:
        rewards = [t.reward for t in self.tiers if t.reward is not None]
        return float(sum(rewards)) if rewards else None

    @property
    def slowest_tier(self) -> Optional[TierReport]:
        active = [t for t in self.tiers if t.participants]
        return max(active, key=lambda t: t.round_time) if active else None


@dataclass
class ExperimentSettings:
    """Everything one (strategy, seed) run needs, already validated."""

    population: Population
    table: SecurityTable
    cost: CostModel
    actions: List[ParameterPlan]
    trainer: TrainerModel
    seed: int
    rounds: int
    participation_rate: float = 0.1
    n_params: int = 1_000_000
    tiering_method: str = "hierarchical"
    criteria: Sequence[str] = ("security", "latency")
    k: int = 9
    profiled_fraction: float = 1.0
    dynamic: bool = False
    retier_every: int = 50
    q_config: QLearningConfig = field(default_factory=QLearningConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    latency_bounds: Optional[List[float]] = None
    warm_start: Optional[QTable] = None
    baseline_plan: ParameterPlan = BASELINE_PLAN
    heuristic_plan: ParameterPlan = HEURISTIC_PLAN
    aggregation: str = "sync"
    convergence_fraction: float = 0.95
    target_accuracy: Optional[float] = None

    @property
    def reference_plan(self) -> ParameterPlan:
        return self.baseline_plan


@dataclass
class ExperimentResult:
    strategy: str
    clustering: str
    seed: int
    rounds: List[RoundReport]
    k: int
    convergence_fraction: float = 0.95
    target_accuracy: Optional[float] = None
    qtable: Optional[QTable] = None

    @property
    def final_accuracy(self) -> float:
        return self.rounds[-1].global_accuracy if self.rounds else 0.0

    @property
    def total_time(self) -> float:
        return self.rounds[-1].sim_time if self.rounds else 0.0

    @property
    def total_security_loss(self) -> int:
        return sum(r.security_loss for r in self.rounds)

    @property
    def convergence_target(self) -> Optional[float]:
        if not self.rounds:
            return None
        if self.target_accuracy is not None:
            return self.target_accuracy
        return self.convergence_fraction * self.final_accuracy

    @property
    def convergence_time(self) -> Optional[float]:
        target = self.convergence_target
        return None if target is None else time_to_accuracy(self, target)

    @property
    def convergence_round(self) -> Optional[int]:
        target = self.convergence_target
        if target is None:
            return None
        for r in self.rounds:
            if r.global_accuracy >= target:
                return r.round
        return None

    @property
    def efficiency(self) -> Optional[float]:
        """Final accuracy per simulated hour of convergence time."""
        t = self.convergence_time
        if not t:
            return None
        return self.final_accuracy / (t / 3600.0)

    def accuracy_at(self, t: float) -> float:
        return accuracy_at(self, t)

    def plan_histogram(self) -> Dict[int, Dict[str, int]]:
        """Per tier, how many rounds each plan was used with at least one participant."""
        counts: Dict[int, Counter] = defaultdict(Counter)
        for r in self.rounds:
            for t in r.tiers:
                if t.participants:
                    counts[t.tier][t.plan.label] += 1
        return {tier: dict(sorted(c.items())) for tier, c in sorted(counts.items())}

    def straggler_breakdown(self) -> Dict[str, float]:
        stragglers = [r.slowest_tier.straggler for r in self.rounds if r.slowest_tier and r.slowest_tier.straggler]
        if not stragglers:
            return {"train_s": 0.0, "he_s": 0.0, "comm_s": 0.0}
        return {
            "train_s": float(np.mean([s.train_s for s in stragglers])),
            "he_s": float(np.mean([s.he_s for s in stragglers])),
            "comm_s": float(np.mean([s.comm_s for s in stragglers])),
        }

    def to_frame(self) -> pd.DataFrame:
        """One row per round; per-tier plan, round time, participant and loss columns."""
        rows = []
        for r in self.rounds:
            row = {
                "round": r.round,
                "sim_time_s": r.sim_time,
                "global_acc": r.global_accuracy,
                "security_loss": r.security_loss,
                "reward": r.reward,
            }
            for t in r.tiers:
                row[f"tier{t.tier}_plan"] = t.plan.label
                row[f"tier{t.tier}_L_s"] = t.round_time if t.participants else None
                row[f"tier{t.tier}_n"] = t.participants
                row[f"tier{t.tier}_loss"] = t.security_loss
            rows.append(row)
        columns = ["round", "sim_time_s", "global_acc", "security_loss", "reward"]
        for k in range(self.k):
            columns += [f"tier{k}_plan", f"tier{k}_L_s", f"tier{k}_n", f"tier{k}_loss"]
        return pd.DataFrame(rows, columns=columns)

    def summary(self) -> Dict:
        return {
            "strategy": self.strategy,
            "clustering": self.clustering,
            "seed": self.seed,
            "rounds": len(self.rounds),
            "final_accuracy": self.final_accuracy,
            "convergence_target": self.convergence_target,
            "convergence_time_s": self.convergence_time,
            "convergence_round": self.convergence_round,
            "total_time_s": self.total_time,
            "total_security_loss": self.total_security_loss,
            "efficiency_acc_per_h": self.efficiency,
            "straggler_breakdown_s": self.straggler_breakdown(),
            "plan_histogram": {str(k): v for k, v in self.plan_histogram().items()},
        }


def time_to_accuracy(result: ExperimentResult, target: float) -> Optional[float]:
    """First simulated time at which global accuracy reaches target."""
    for r in result.rounds:
        if r.global_accuracy >= target:
            return r.sim_time
    return None


def accuracy_at(result: ExperimentResult, t: float) -> float:
    """Global accuracy as of simulated time t (0 before the first round completes)."""
    acc = 0.0
    for r in result.rounds:
        if r.sim_time > t:
            break
        acc = r.global_accuracy
    return acc


def sample_participants(pop: Population, rate: float, round_index: int, seed: int) -> List[int]:
    if not 0 < rate <= 1:
        raise InputError(f"participation rate must be in (0, 1], got {rate}")
    count = max(1, int(math.floor(rate * len(pop) + 0.5)))
    rng = np.random.default_rng([seed, 5, round_index])
    chosen = rng.choice(np.asarray(pop.ids, dtype=int), size=count, replace=False)
    return sorted(int(cid) for cid in chosen)


def simulate_local_training(
    client: ClientProfile,
    g: GlobalModel,
    tm: TrainerModel,
    plan: ParameterPlan,
    cost: CostModel,
    rng: np.random.Generator,
    round_noise: Optional[float] = None,
) -> float:
    """Utility gain for one client; projected accuracy g + gain is kept inside [0, ceiling].

    round_noise is the draw shared by every client this round; when omitted it
    is drawn here.
    """
    ceiling = tm.a_max * (1.0 - precision_penalty(plan, cost))
    gain = tm.rate * max(0.0, ceiling - g.accuracy)
    if tm.heterogeneity_sd > 0:
        gain += rng.normal(0.0, tm.heterogeneity_sd)
    if round_noise is None:
        round_noise = rng.normal(0.0, tm.noise_sd) if tm.noise_sd > 0 else 0.0
    gain += round_noise
    projected = min(max(g.accuracy + gain, 0.0), ceiling)
    return projected - g.accuracy


def tier_round_time(participants: Sequence[ClientProfile], plan: ParameterPlan, cost: CostModel, n_params: int) -> float:
    """Straggler latency L_k: the slowest participant of the tier under its plan."""
    if not participants:
        raise InputError("tier round time needs at least one participant")
    return max(estimate_round_latency(c, plan, cost, n_params) for c in participants)


def fedavg(updates: Sequence[Tuple[Union[float, np.ndarray], float]]) -> Union[float, np.ndarray]:
    """Data-size weighted mean of scalar values or equal-length vectors."""
    if not updates:
        raise InputError("fedavg needs at least one update")
    sizes = np.asarray([size for _, size in updates], dtype=float)
    if (sizes <= 0).any():
        raise InputError("fedavg data sizes must be positive")
    values = [value for value, _ in updates]
    if np.ndim(values[0]) == 0:
        return float(np.dot(sizes, np.asarray(values, dtype=float)) / sizes.sum())
    try:
        stacked = np.stack([np.asarray(v, dtype=float) for v in values])
    except ValueError:
        raise InputError("fedavg vectors must all have the same length") from None
    return np.tensordot(sizes / sizes.sum(), stacked, axes=1)


class Strategy:
    """Chooses one plan per tier each round. Subclasses override assign (and observe if they learn)."""

    name = "strategy"

    def assign(self, engine: "SimulationEngine") -> Dict[int, ParameterPlan]:
        raise NotImplementedError

    def observe(self, engine: "SimulationEngine", tier_reports: List[TierReport], outcomes: Dict[int, List[ParticipantOutcome]]) -> None:
        return None


class UniformStrategy(Strategy):
    def __init__(self, name: str, plan: ParameterPlan):
        self.name = name
        self.plan = plan

    def assign(self, engine):
        return {k: self.plan for k in range(engine.tiering.k)}


class AdaptiveStaticStrategy(Strategy):
    """Low plan for the slower half of tiers by mean reference latency, high plan for the rest."""

    name = "adaptive"

    def __init__(self, low: ParameterPlan, high: ParameterPlan):
        self.low = low
        self.high = high

    def assign(self, engine):
        tiers = engine.tiering.tiers
        means = []
        for k, members in enumerate(tiers):
            # empty tiers rank as fastest
            mean = np.mean([engine.reference_latency[cid] for cid in members]) if members else -np.inf
            means.append((float(mean), k))
        slow = {k for _, k in sorted(means, key=lambda x: (-x[0], x[1]))[: len(tiers) // 2]}
        return {k: (self.low if k in slow else self.high) for k in range(len(tiers))}


class HerlStrategy(Strategy):
    """Per-tier plans from the Q-learning agent, updated from each round's outcome."""

    name = "herl"

    def __init__(self, agent: HerlAgent):
        self.agent = agent
        self._pending: List[TierDecision] = []

    def assign(self, engine):
        self._pending = self.agent.select(engine.tiering, engine.tier_state)
        return {d.tier: d.plan for d in self._pending}

    def observe(self, engine, tier_reports, outcomes):
        observations = {}
        for report in tier_reports:
            if not report.participants:
                continue
            observations[report.tier] = TierRoundObservation(
                tier=report.tier,
                participants=outcomes[report.tier],
                round_time=report.round_time,
                plan_security=security_bits(report.plan, engine.settings.table),
            )
        rewards = self.agent.learn(self._pending, observations, engine.tier_state)
        for report in tier_reports:
            report.reward = rewards.get(report.tier)
        self._pending = []


def default_latency_bounds(latencies: Sequence[float]) -> List[float]:
    """25/50/75% quantiles of reference latency, duplicates collapsed."""
    edges = np.quantile(np.asarray(latencies, dtype=float), [0.25, 0.5, 0.75])
    return [float(e) for e in np.unique(edges)]


def make_strategy(name: str, settings: ExperimentSettings, reference_latencies: Sequence[float] = ()) -> Strategy:
    if name == "baseline":
        return UniformStrategy("baseline", settings.baseline_plan)
    if name == "heuristic":
        return UniformStrategy("heuristic", settings.heuristic_plan)
    if name == "adaptive":
        return AdaptiveStaticStrategy(settings.heuristic_plan, settings.baseline_plan)
    if name == "herl":
        bounds = settings.latency_bounds or default_latency_bounds(reference_latencies)
        agent = HerlAgent(settings.actions, bounds, settings.q_config, settings.reward, settings.seed)
        if settings.warm_start is not None:
            copied = agent.q.load_values_from(settings.warm_start)
            logger.info(f"🔄 Warm start: restored {copied} Q-table entries")
        return HerlStrategy(agent)
    raise InputError(f"unknown strategy '{name}', expected one of {STRATEGIES}")


def check_settings(settings: ExperimentSettings) -> None:
    if settings.rounds < 0:
        raise InputError(f"rounds must be >= 0, got {settings.rounds}")
    if settings.n_params < 1:
        raise InputError(f"n_params must be >= 1, got {settings.n_params}")
    if settings.aggregation not in AGGREGATION_MODES:
        raise InputError(f"aggregation must be one of {AGGREGATION_MODES}, got '{settings.aggregation}'")
    if not 0 < settings.profiled_fraction <= 1:
        raise InputError(f"profiled_fraction must be in (0, 1], got {settings.profiled_fraction}")
    if not settings.actions:
        raise PlanError("action grid is empty after filtering by the security table")
    for plan in [settings.baseline_plan, settings.heuristic_plan, *settings.actions]:
        verdict = validate_plan(plan, settings.table)
        if not verdict:
            raise PlanError(f"plan {plan.label} is not admissible: {verdict.reason}")


class SimulationEngine:
    """Round loop state: tiering, global model, clock and per-client histories."""

    def __init__(self, settings: ExperimentSettings, strategy: Union[str, Strategy]):
        check_settings(settings)
        self.settings = settings
        self.population = settings.population
        self.clients = self.population.by_id
        self.global_model = GlobalModel()
        self.clock = 0.0
        self.round = 0
        self.ctx = CriterionContext(
            reference_plan=settings.reference_plan,
            cost=settings.cost,
            n_params=settings.n_params,
        )
        self.reference_latency = {
            c.id: latency_breakdown(c, settings.reference_plan, settings.cost, settings.n_params).total
            for c in self.population.clients
        }
        self._train_rng = np.random.default_rng([settings.seed, 6])

        self.known_ids = self._profiled_ids()
        self.tiering = self._build_tiering()
        if isinstance(strategy, str):
            strategy = make_strategy(strategy, settings, list(self.reference_latency.values()))
        self.strategy = strategy

    def _profiled_ids(self) -> List[int]:
        ids = self.population.ids
        fraction = self.settings.profiled_fraction
        if fraction >= 1.0:
            return sorted(ids)
        count = max(self.settings.k, int(math.floor(fraction * len(ids) + 0.5)))
        count = min(count, len(ids))
        rng = np.random.default_rng([self.settings.seed, 7])
        return sorted(int(cid) for cid in rng.choice(np.asarray(ids, dtype=int), size=count, replace=False))

    def _build_tiering(self) -> Tiering:
        known = Population(clients=[self.clients[cid] for cid in self.known_ids], seed=self.population.seed)
        return build_tiering(
            self.settings.tiering_method,
            known,
            self.settings.k,
            self.ctx,
            criteria=self.settings.criteria,
            seed=self.settings.seed,
        )

    def tier_state(self, k: int):
        """Agent state of tier k; latency bands read the reference-plan estimate, so only re-tiering moves a state."""
        members = [self.clients[cid] for cid in self.tiering.tiers[k]]
        return self.strategy.agent.state(members, lambda c: self.reference_latency[c.id])

    def _place_unprofiled(self, participant_ids: Sequence[int]) -> None:
        tiering = self.tiering
        membership = tiering.membership()
        for cid in participant_ids:
            if cid in membership:
                continue
            client = self.clients[cid]
            idx = assign_new_client(tiering, client, self.ctx)
            key = [CRITERIA[name].extractor(client, self.ctx) for name in tiering.criteria]
            tiering = tiering.with_client(cid, idx, key)
            membership[cid] = idx
            self.known_ids = sorted(self.known_ids + [cid])
            logger.debug(f"Placed unprofiled client {cid} into tier {idx}")
        self.tiering = tiering

    def run_round(self) -> RoundReport:
        s = self.settings
        participant_ids = sample_participants(self.population, s.participation_rate, self.round, s.seed)
        self._place_unprofiled(participant_ids)
        membership = self.tiering.membership()

        by_tier: Dict[int, List[ClientProfile]] = defaultdict(list)
        for cid in participant_ids:
            by_tier[membership[cid]].append(self.clients[cid])

        started = time.perf_counter()
        plans = self.strategy.assign(self)
        agent_seconds = time.perf_counter() - started

        round_noise = self._train_rng.normal(0.0, s.trainer.noise_sd) if s.trainer.noise_sd > 0 else 0.0
        updates: List[Tuple[float, float]] = []
        outcomes: Dict[int, List[ParticipantOutcome]] = {}
        tier_reports: List[TierReport] = []
        for k in range(self.tiering.k):
            plan = plans[k]
            members = by_tier.get(k, [])
            if not members:
                tier_reports.append(TierReport(k, plan, 0.0, 0, 0, 0.0))
                continue
            plan_bits = security_bits(plan, s.table)
            deltas = []
            for client in members:
                delta = simulate_local_training(client, self.global_model, s.trainer, plan, s.cost, self._train_rng, round_noise)
                deltas.append(delta)
                updates.append((self.global_model.accuracy + delta, client.data_size))
            breakdowns = [latency_breakdown(c, plan, s.cost, s.n_params) for c in members]
            round_time = tier_round_time(members, plan, s.cost, s.n_params)
            straggler = max(breakdowns, key=lambda b: b.total)
            loss = sum(1 for c in members if plan_bits < c.security_req)
            outcomes[k] = [
                ParticipantOutcome(client_id=c.id, delta_util=d, security_req=c.security_req)
                for c, d in zip(members, deltas)
            ]
            tier_reports.append(TierReport(k, plan, round_time, len(members), loss, float(np.mean(deltas)), straggler=straggler))

            for c, d, b in zip(members, deltas, breakdowns):
                self.ctx.record(c.id, b.total, d)

        accuracy = fedavg(updates)
        self.global_model = GlobalModel(accuracy=accuracy, round=self.round + 1)
        active = [t for t in tier_reports if t.participants]
        if s.aggregation == "sync":
            self.clock += max(t.round_time for t in active)
        else:
            self.clock += sum(t.participants * t.round_time for t in active) / sum(t.participants for t in active)

        started = time.perf_counter()
        self.strategy.observe(self, tier_reports, outcomes)
        agent_seconds += time.perf_counter() - started

        report = RoundReport(
            round=self.round,
            tiers=tier_reports,
            global_accuracy=accuracy,
            sim_time=self.clock,
            agent_seconds=agent_seconds,
        )
        self.round += 1
        if s.dynamic and self.round % s.retier_every == 0:
            self.tiering = self._build_tiering()
            logger.debug(f"Re-tiered after round {self.round}: sizes={self.tiering.sizes}")
        logger.debug(f"Round {report.round}: acc={accuracy:.4f} t={self.clock:.1f}s agent={agent_seconds * 1000:.2f}ms")
        return report


def run_experiment(settings: ExperimentSettings, strategy: str, clustering: Optional[str] = None) -> ExperimentResult:
    """Run up to settings.rounds rounds, stopping early once target_accuracy is reached."""
    engine = SimulationEngine(settings, strategy)
    reports: List[RoundReport] = []
    for _ in range(settings.rounds):
        report = engine.run_round()
        reports.append(report)
        if settings.target_accuracy is not None and report.global_accuracy >= settings.target_accuracy:
            logger.info(f"✅ {strategy}: reached target {settings.target_accuracy} at round {report.round}")
            break

    qtable = engine.strategy.agent.q if isinstance(engine.strategy, HerlStrategy) else None
    result = ExperimentResult(
        strategy=strategy,
        clustering=clustering or settings.tiering_method,
        seed=settings.seed,
        rounds=reports,
        k=engine.tiering.k,
        convergence_fraction=settings.convergence_fraction,
        target_accuracy=settings.target_accuracy,
        qtable=qtable,
    )
    logger.info(
        f"✅ {result.clustering}/{strategy} seed={settings.seed}: final_acc={result.final_accuracy:.4f} "
        f"convergence={result.convergence_time} loss={result.total_security_loss}"
    )
    return result
