"""
HERL Q-learning agent
Tabular Q-learning over (tier state, HE plan) pairs: epsilon-greedy selection,
the utility/latency/security reward and the Bellman update.
"""

import json
import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from herl.client_profile import ClientProfile
from herl.errors import InputError
from herl.he_plan import SECURITY_LEVELS, ParameterPlan
from herl.tiering import Tiering

logger = logging.getLogger(__name__)


class StateId(BaseModel):
    model_config = ConfigDict(frozen=True)

    security_band: int = Field(..., ge=0)
    latency_band: int = Field(..., ge=0)

    @property
    def label(self) -> str:
        return f"({self.security_band},{self.latency_band})"


class Action(BaseModel):
    model_config = ConfigDict(frozen=True)

    plan: ParameterPlan

    @property
    def label(self) -> str:
        return f"({self.plan.log_n},{self.plan.q_bits})"


class QLearningConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    gamma: float = Field(0.1, gt=0, le=1, description="learning rate")
    mu: float = Field(0.9, ge=0, lt=1, description="discount factor")
    epsilon: float = Field(0.1, ge=0, le=1, description="exploration rate")
    epsilon_decay: float = Field(1.0, gt=0, le=1, description="per-round multiplier on epsilon")
    epsilon_min: float = Field(0.0, ge=0, le=1)
    init_scale: float = Field(0.01, ge=0, description="Q-table entries start uniform in [0, init_scale]")

    def epsilon_at(self, round_index: int) -> float:
        return max(self.epsilon_min, self.epsilon * self.epsilon_decay ** round_index)


class RewardConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    alpha: float = Field(5.0, ge=0, description="security penalty per under-served client")


class ParticipantOutcome(BaseModel):
    client_id: int
    delta_util: float
    security_req: int


class TierRoundObservation(BaseModel):
    tier: int
    participants: List[ParticipantOutcome] = Field(..., min_length=1)
    round_time: float = Field(..., gt=0)
    plan_security: int


class QTable:
    """Dense state x action value matrix. Actions are kept sorted by (log_n, q_bits)."""

    def __init__(
        self,
        states: Sequence[StateId],
        actions: Sequence[ParameterPlan],
        config: Optional[QLearningConfig] = None,
        values: Optional[np.ndarray] = None,
    ):
        if not states or not actions:
            raise InputError("Q-table needs at least one state and one action")
        self.config = config or QLearningConfig()
        self.states = list(states)
        self.actions = [Action(plan=p) for p in sorted(actions, key=lambda p: p.key)]
        self._state_index = {s: i for i, s in enumerate(self.states)}
        self._action_index = {a.plan: i for i, a in enumerate(self.actions)}
        shape = (len(self.states), len(self.actions))
        self.values = np.zeros(shape) if values is None else np.array(values, dtype=float).reshape(shape)

    @classmethod
    def for_grid(cls, security_bands: int, latency_bands: int, actions: Sequence[ParameterPlan], config=None) -> "QTable":
        states = [StateId(security_band=s, latency_band=l) for s in range(security_bands) for l in range(latency_bands)]
        return cls(states, actions, config)

    @property
    def gamma(self) -> float:
        return self.config.gamma

    @property
    def mu(self) -> float:
        return self.config.mu

    @property
    def epsilon(self) -> float:
        return self.config.epsilon

    def initialize(self, rng: np.random.Generator) -> "QTable":
        self.values = rng.uniform(0.0, self.config.init_scale, size=self.values.shape)
        return self

    def state_index(self, s: StateId) -> int:
        try:
            return self._state_index[s]
        except KeyError:
            raise InputError(f"state {s.label} is not in the Q-table") from None

    def action_index(self, a) -> int:
        plan = a.plan if isinstance(a, Action) else a
        try:
            return self._action_index[plan]
        except KeyError:
            raise InputError(f"plan {plan.label} is not in the action grid") from None

    def value(self, s: StateId, a) -> float:
        return float(self.values[self.state_index(s), self.action_index(a)])

    def max_value(self, s: StateId) -> float:
        return float(self.values[self.state_index(s)].max())

    def greedy(self, s: StateId) -> Action:
        # argmax returns the first maximum, i.e. the lexicographically smallest plan
        return self.actions[int(np.argmax(self.values[self.state_index(s)]))]

    def snapshot(self) -> Dict[str, Dict[str, float]]:
        return {
            s.label: {a.label: float(self.values[i, j]) for j, a in enumerate(self.actions)}
            for i, s in enumerate(self.states)
        }

    def to_json(self) -> str:
        payload = {
            "config": self.config.model_dump(),
            "values": {
                f"{s.label}->{a.label}": float(self.values[i, j])
                for i, s in enumerate(self.states)
                for j, a in enumerate(self.actions)
            },
        }
        return json.dumps(payload, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "QTable":
        payload = json.loads(text)
        entries: Dict[Tuple[Tuple[int, int], Tuple[int, int]], float] = {}
        for key, value in payload["values"].items():
            state_part, action_part = key.split("->")
            s = tuple(int(x) for x in state_part.strip("()").split(","))
            a = tuple(int(x) for x in action_part.strip("()").split(","))
            entries[(s, a)] = float(value)
        states = sorted({s for s, _ in entries})
        plans = sorted({a for _, a in entries})
        table = cls(
            [StateId(security_band=s[0], latency_band=s[1]) for s in states],
            [ParameterPlan.from_pair(a) for a in plans],
            QLearningConfig(**payload.get("config", {})),
        )
        for (s, a), value in entries.items():
            table.values[
                table.state_index(StateId(security_band=s[0], latency_band=s[1])),
                table.action_index(ParameterPlan.from_pair(a)),
            ] = value
        return table

    def load_values_from(self, other: "QTable") -> int:
        """Copy overlapping (state, action) entries from another table; returns how many matched."""
        copied = 0
        for i, s in enumerate(self.states):
            if s not in other._state_index:
                continue
            for j, a in enumerate(self.actions):
                if a.plan in other._action_index:
                    self.values[i, j] = other.values[other._state_index[s], other._action_index[a.plan]]
                    copied += 1
        return copied


def discretize_state(
    members: Sequence[ClientProfile],
    latency_bounds: Sequence[float],
    latency_of: Callable[[ClientProfile], float],
) -> StateId:
    """(max security requirement band, mean reference-latency bucket). Edges are half-open: an edge value falls in the higher bucket."""
    edges = np.asarray(latency_bounds, dtype=float)
    if len(edges) > 1 and not np.all(np.diff(edges) > 0):
        raise InputError(f"latency bucket edges must be strictly increasing, got {list(latency_bounds)}")
    if not members:
        return StateId(security_band=0, latency_band=0)
    security_band = SECURITY_LEVELS.index(max(c.security_req for c in members))
    mean_latency = float(np.mean([latency_of(c) for c in members]))
    latency_band = int(np.searchsorted(edges, mean_latency, side="right"))
    return StateId(security_band=security_band, latency_band=min(latency_band, len(edges)))


def select_action(q: QTable, s: StateId, rng: np.random.Generator, epsilon: Optional[float] = None) -> Action:
    eps = q.epsilon if epsilon is None else epsilon
    if rng.random() < eps:
        return q.actions[int(rng.integers(len(q.actions)))]
    return q.greedy(s)


def tier_reward(obs: TierRoundObservation, cfg: RewardConfig) -> float:
    """One tier's share of the reward: mean utility gain per second minus alpha per under-served client."""
    size = len(obs.participants)
    total = 0.0
    for p in obs.participants:
        total += p.delta_util / (size * obs.round_time)
        if obs.plan_security < p.security_req:
            total -= cfg.alpha
    return total


def compute_reward(obs: Sequence[TierRoundObservation], cfg: RewardConfig) -> float:
    if not obs:
        raise InputError("reward needs at least one tier observation")
    return float(sum(tier_reward(o, cfg) for o in obs))


def update_q(q: QTable, s: StateId, a, r: float, s_next: StateId) -> float:
    i, j = q.state_index(s), q.action_index(a)
    current = q.values[i, j]
    target = r + q.mu * q.max_value(s_next)
    q.values[i, j] = current + q.gamma * (target - current)
    return float(q.values[i, j])


@dataclass(frozen=True)
class TierDecision:
    tier: int
    plan: ParameterPlan
    state: StateId
    action: Action
    explored: bool


def param_selection(
    tiering: Tiering,
    q: QTable,
    rng: np.random.Generator,
    state_of: Callable[[int], StateId],
    epsilon: Optional[float] = None,
) -> List[TierDecision]:
    """One (tier, plan) decision per tier, recorded for the post-round update."""
    eps = q.epsilon if epsilon is None else epsilon
    decisions = []
    for k in range(tiering.k):
        s = state_of(k)
        greedy = q.greedy(s)
        action = select_action(q, s, rng, eps)
        decisions.append(TierDecision(tier=k, plan=action.plan, state=s, action=action, explored=action != greedy))
    return decisions


class HerlAgent:
    """Owns the Q-table and the agent's RNG stream across rounds."""

    def __init__(
        self,
        actions: Sequence[ParameterPlan],
        latency_bounds: Sequence[float],
        config: QLearningConfig,
        reward: RewardConfig,
        seed: int,
    ):
        self.latency_bounds = [float(b) for b in latency_bounds]
        self.reward = reward
        self.rng = np.random.default_rng([seed, 4])
        self.q = QTable.for_grid(len(SECURITY_LEVELS), len(self.latency_bounds) + 1, actions, config)
        self.q.initialize(self.rng)
        self.rounds_seen = 0

    @property
    def config(self) -> QLearningConfig:
        return self.q.config

    def state(self, members: Sequence[ClientProfile], latency_of: Callable[[ClientProfile], float]) -> StateId:
        return discretize_state(members, self.latency_bounds, latency_of)

    def select(self, tiering: Tiering, state_of: Callable[[int], StateId]) -> List[TierDecision]:
        eps = self.config.epsilon_at(self.rounds_seen)
        return param_selection(tiering, self.q, self.rng, state_of, eps)

    def learn(
        self,
        decisions: Sequence[TierDecision],
        observations: Dict[int, TierRoundObservation],
        next_state_of: Callable[[int], StateId],
    ) -> Dict[int, float]:
        """Update each observed tier with its own reward; tiers without participants are skipped."""
        rewards = {}
        for d in decisions:
            obs = observations.get(d.tier)
            if obs is None:
                continue
            r = tier_reward(obs, self.reward)
            update_q(self.q, d.state, d.action, r, next_state_of(d.tier))
            rewards[d.tier] = r
        self.rounds_seen += 1
        return rewards
