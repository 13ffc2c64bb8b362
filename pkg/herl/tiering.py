"""
Client tiering
Hierarchical criteria splits plus the round-time, random and utility
clusterers, and nearest-tier placement for clients first seen mid-run.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict

from herl.client_profile import ClientProfile, Population, estimate_round_latency
from herl.errors import InputError
from herl.he_plan import CostModel, ParameterPlan

logger = logging.getLogger(__name__)

TIERING_METHODS = ("hierarchical", "roundtime", "random", "utility")


@dataclass
class CriterionContext:
    """Running statistics the criterion extractors read from."""

    reference_plan: ParameterPlan
    cost: CostModel
    n_params: int
    latency_history: Dict[int, List[float]] = field(default_factory=dict)
    utility_history: Dict[int, List[float]] = field(default_factory=dict)
    utility_window: int = 10
    latency_window: int = 50

    def record(self, client_id: int, latency: float, utility: float) -> None:
        """Append one round's observation; each history keeps only its most recent window."""
        latencies = self.latency_history.setdefault(client_id, [])
        latencies.append(float(latency))
        del latencies[: -self.latency_window]
        utilities = self.utility_history.setdefault(client_id, [])
        utilities.append(float(utility))
        del utilities[: -self.utility_window]


@dataclass(frozen=True)
class Criterion:
    name: str
    extractor: Callable[[ClientProfile, CriterionContext], float]

    def keys(self, clients: Sequence[ClientProfile], ctx: CriterionContext) -> Dict[int, float]:
        return {c.id: float(self.extractor(c, ctx)) for c in clients}


def _security_key(client: ClientProfile, ctx: CriterionContext) -> float:
    return float(client.security_req)


def _latency_key(client: ClientProfile, ctx: CriterionContext) -> float:
    history = ctx.latency_history.get(client.id)
    if history:
        return float(np.mean(history))
    return estimate_round_latency(client, ctx.reference_plan, ctx.cost, ctx.n_params)


def _utility_key(client: ClientProfile, ctx: CriterionContext) -> float:
    history = ctx.utility_history.get(client.id)
    if history:
        return float(np.mean(history[-ctx.utility_window:]))
    return 0.0


CRITERIA: Dict[str, Criterion] = {
    "security": Criterion("security", _security_key),
    "latency": Criterion("latency", _latency_key),
    "utility": Criterion("utility", _utility_key),
}


def get_criterion(name: Union[str, Criterion]) -> Criterion:
    if isinstance(name, Criterion):
        return name
    try:
        return CRITERIA[name]
    except KeyError:
        raise InputError(f"unknown criterion '{name}', expected one of {sorted(CRITERIA)}") from None


class Tiering(BaseModel):
    """K disjoint client groups. Empty tiers are allowed; the count is always K."""

    model_config = ConfigDict(frozen=True)

    method: str
    criteria: List[str]
    tiers: List[List[int]]
    boundaries: List[List[float]] = []
    keys: Dict[int, List[float]] = {}
    scales: List[float] = []

    @property
    def k(self) -> int:
        return len(self.tiers)

    @property
    def sizes(self) -> List[int]:
        return [len(t) for t in self.tiers]

    def membership(self) -> Dict[int, int]:
        return {cid: idx for idx, tier in enumerate(self.tiers) for cid in tier}

    def tier_of(self, client_id: int) -> Optional[int]:
        return self.membership().get(client_id)

    def centroids(self) -> List[Optional[np.ndarray]]:
        out = []
        for tier in self.tiers:
            if tier:
                out.append(np.mean([self.keys[cid] for cid in tier], axis=0))
            else:
                out.append(None)
        return out

    def with_client(self, client_id: int, tier: int, key: Sequence[float]) -> "Tiering":
        """A copy with one more member in `tier`; this tiering is left as it was."""
        tiers = [sorted(t + [client_id]) if i == tier else list(t) for i, t in enumerate(self.tiers)]
        return self.model_copy(update={"tiers": tiers, "keys": {**self.keys, client_id: [float(v) for v in key]}})

    def to_json(self) -> str:
        return self.model_dump_json(indent=2)


def integer_root(k: int, beta: int) -> Optional[int]:
    guess = int(round(k ** (1.0 / beta)))
    for m in (guess - 1, guess, guess + 1):
        if m >= 1 and m ** beta == k:
            return m
    return None


def valid_k_values(beta: int, near: int, count: int = 3) -> List[int]:
    """The `count` values of m**beta (m >= 2) closest to `near`, ascending."""
    candidates = [m ** beta for m in range(2, max(4, int(near ** (1.0 / beta)) + count + 2))]
    closest = sorted(candidates, key=lambda v: (abs(v - near), v))[:count]
    return sorted(closest)


def _quantile_split(ids: Sequence[int], keys: Dict[int, float], m: int) -> Tuple[List[List[int]], List[float]]:
    """Stable sort by (key, id) and cut into m contiguous chunks differing in size by at most one."""
    order = sorted(ids, key=lambda cid: (keys[cid], cid))
    groups = [[int(cid) for cid in chunk] for chunk in np.array_split(np.asarray(order, dtype=int), m)]
    return groups, _lower_edges(groups, keys)


def _lower_edges(groups: List[List[int]], keys: Dict[int, float]) -> List[float]:
    edges: List[float] = []
    last = keys[groups[0][-1]] if groups and groups[0] else 0.0
    for group in groups[1:]:
        if group:
            last = keys[group[0]]
        edges.append(float(last))
    return edges


def _security_split(ids: Sequence[int], keys: Dict[int, float], m: int) -> Tuple[List[List[int]], List[float]]:
    if m == 2:
        edges = [192.0]
    elif m == 3:
        edges = [192.0, 256.0]
    else:
        return _quantile_split(ids, keys, m)
    groups: List[List[int]] = [[] for _ in range(m)]
    for cid in sorted(ids, key=lambda cid: (keys[cid], cid)):
        groups[int(np.searchsorted(edges, keys[cid], side="right"))].append(int(cid))
    return groups, edges


def _finish(
    method: str,
    criteria: Sequence[Criterion],
    groups: List[List[int]],
    boundaries: List[List[float]],
    key_maps: List[Dict[int, float]],
) -> Tiering:
    ids = sorted(key_maps[0]) if key_maps else []
    vectors = {cid: [km[cid] for km in key_maps] for cid in ids}
    if vectors:
        matrix = np.array([vectors[cid] for cid in ids], dtype=float)
        std = matrix.std(axis=0)
        scales = [float(s) if s > 0 else 1.0 for s in std]
    else:
        scales = []
    return Tiering(
        method=method,
        criteria=[c.name for c in criteria],
        tiers=[sorted(g) for g in groups],
        boundaries=boundaries,
        keys=vectors,
        scales=scales,
    )


def hierarchical_tiering(
    pop: Population,
    criteria: Sequence[Union[str, Criterion]],
    k: int,
    ctx: CriterionContext,
) -> Tiering:
    """Split every sub-tier into k**(1/beta) groups, one criterion at a time."""
    crits = [get_criterion(c) for c in criteria]
    beta = len(crits)
    if beta == 0:
        raise InputError("hierarchical tiering needs at least one criterion")
    if k < 1:
        raise InputError(f"K must be >= 1, got {k}")

    key_maps = [c.keys(pop.clients, ctx) for c in crits]
    groups: List[List[int]] = [sorted(pop.ids)]
    boundaries: List[List[float]] = []

    if k > 1:
        m = integer_root(k, beta)
        if m is None or m < 2:
            suggestion = ", ".join(str(v) for v in valid_k_values(beta, k))
            raise InputError(f"K={k} is not m^{beta} for an integer m >= 2; nearest valid K: {{{suggestion}}}")
        for crit, keys in zip(crits, key_maps):
            split = _security_split if crit.name == "security" else _quantile_split
            next_groups: List[List[int]] = []
            for group in groups:
                parts, edges = split(group, keys, m) if group else ([[] for _ in range(m)], [])
                next_groups.extend(parts)
                boundaries.append(edges)
            groups = next_groups

    tiering = _finish("hierarchical", crits, groups, boundaries, key_maps)
    logger.info(f"✅ Hierarchical tiering: K={k}, criteria={tiering.criteria}, sizes={tiering.sizes}")
    return tiering


def _check_flat_k(pop: Population, k: int) -> None:
    if k < 1:
        raise InputError(f"K must be >= 1, got {k}")
    if k > len(pop):
        raise InputError(f"K={k} exceeds the population size {len(pop)}")


def roundtime_tiering(
    pop: Population,
    k: int,
    history: Dict[int, Sequence[float]],
    ctx: Optional[CriterionContext] = None,
) -> Tiering:
    """Quantile bands of mean past round latency. Clients with no history need ctx for a cold-start estimate."""
    _check_flat_k(pop, k)
    keys: Dict[int, float] = {}
    for client in pop.clients:
        past = history.get(client.id)
        if past:
            keys[client.id] = float(np.mean(past))
        elif ctx is not None:
            keys[client.id] = _latency_key(client, ctx)
        else:
            raise InputError(f"client {client.id} has no latency history and no cold-start context")
    groups, edges = _quantile_split(pop.ids, keys, k)
    return _finish("roundtime", [CRITERIA["latency"]], groups, [edges], [keys])


def utility_tiering(pop: Population, k: int, utility_history: Dict[int, Sequence[float]], window: int = 10) -> Tiering:
    """Quantile bands of mean recent utility gain; the last tier holds the highest gains."""
    _check_flat_k(pop, k)
    keys = {}
    for client in pop.clients:
        past = utility_history.get(client.id)
        keys[client.id] = float(np.mean(list(past)[-window:])) if past else 0.0
    groups, edges = _quantile_split(pop.ids, keys, k)
    return _finish("utility", [CRITERIA["utility"]], groups, [edges], [keys])


def random_tiering(pop: Population, k: int, seed: int, ctx: Optional[CriterionContext] = None) -> Tiering:
    """Shuffle under seed and deal into K near-equal groups."""
    _check_flat_k(pop, k)
    rng = np.random.default_rng([seed, 3])
    shuffled = rng.permutation(np.asarray(pop.ids, dtype=int))
    groups = [[int(cid) for cid in chunk] for chunk in np.array_split(shuffled, k)]

    crits = [CRITERIA["security"]] + ([CRITERIA["latency"]] if ctx is not None else [])
    key_maps = [c.keys(pop.clients, ctx) for c in crits]
    return _finish("random", crits, groups, [], key_maps)


def build_tiering(
    method: str,
    pop: Population,
    k: int,
    ctx: CriterionContext,
    criteria: Sequence[str] = ("security", "latency"),
    seed: int = 0,
) -> Tiering:
    if method == "hierarchical":
        return hierarchical_tiering(pop, criteria, k, ctx)
    if method == "roundtime":
        return roundtime_tiering(pop, k, ctx.latency_history, ctx)
    if method == "random":
        return random_tiering(pop, k, seed, ctx)
    if method == "utility":
        return utility_tiering(pop, k, ctx.utility_history, ctx.utility_window)
    raise InputError(f"unknown tiering method '{method}', expected one of {TIERING_METHODS}")


def assign_new_client(t: Tiering, client: ClientProfile, ctx: CriterionContext) -> int:
    """Tier index for a client: its own tier if already a member, else the nearest centroid."""
    members = t.membership()
    if client.id in members:
        return members[client.id]
    if not any(t.tiers):
        raise InputError("cannot place a client into a tiering with no members")

    vec = np.array([CRITERIA[name].extractor(client, ctx) for name in t.criteria], dtype=float)
    for idx, tier in enumerate(t.tiers):
        for cid in tier:
            if np.array_equal(np.asarray(t.keys[cid], dtype=float), vec):
                return idx

    scales = np.asarray(t.scales or [1.0] * len(vec), dtype=float)
    best, best_dist = 0, np.inf
    for idx, centroid in enumerate(t.centroids()):
        if centroid is None:
            continue
        dist = float(np.linalg.norm((vec - centroid) / scales))
        if dist < best_dist:
            best, best_dist = idx, dist
    return best
