"""
Client profiles and device traces
Builds the simulated population from capacity traces, assigns security
requirements and estimates what one round costs a client under a plan.
"""

import json
import logging
from pathlib import Path
from typing import Dict, List, Literal, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator

from herl.errors import InputError, TraceParseError
from herl.he_plan import SECURITY_LEVELS, CostModel, ParameterPlan, ciphertext_bytes, he_latency

logger = logging.getLogger(__name__)

TRACE_COLUMNS = ["compute_speed", "bandwidth_bps", "base_train_time_s"]

SecurityLevel = Literal[128, 192, 256]


class ClientProfile(BaseModel):
    """One device: how fast it computes, how fast it uploads, how much data it holds."""

    model_config = ConfigDict(frozen=True)

    id: int
    compute_speed: float = Field(..., gt=0, description="relative to the reference device")
    bandwidth: float = Field(..., gt=0, description="bytes per second")
    data_size: int = Field(..., ge=1, description="local sample count |D_i|")
    security_req: SecurityLevel = 128
    base_train_time: float = Field(..., ge=0, description="seconds per local epoch on the reference device")


class Population(BaseModel):
    clients: List[ClientProfile]
    seed: int = 0

    @model_validator(mode="after")
    def _unique_ids(self):
        if not self.clients:
            raise ValueError("population is empty")
        ids = [c.id for c in self.clients]
        if len(set(ids)) != len(ids):
            raise ValueError("client ids must be unique")
        return self

    def __len__(self) -> int:
        return len(self.clients)

    @property
    def ids(self) -> List[int]:
        return [c.id for c in self.clients]

    @property
    def by_id(self) -> Dict[int, ClientProfile]:
        return {c.id: c for c in self.clients}

    def to_json(self) -> str:
        return self.model_dump_json(indent=2)

    @classmethod
    def from_json(cls, text: str) -> "Population":
        return cls.model_validate(json.loads(text))


class LatencyBreakdown(BaseModel):
    """Per-round cost split into local training, HE work and upload."""

    train_s: float
    he_s: float
    comm_s: float

    @property
    def total(self) -> float:
        return self.train_s + self.he_s + self.comm_s


def _read_trace(path: Path) -> pd.DataFrame:
    try:
        frame = pd.read_csv(path, skipinitialspace=True)
    except FileNotFoundError:
        raise InputError(f"trace file not found: {path}") from None
    except pd.errors.EmptyDataError:
        raise InputError(f"trace file is empty: {path}") from None
    except pd.errors.ParserError as e:
        raise TraceParseError(f"malformed trace {path}: {e}") from None

    missing = [c for c in TRACE_COLUMNS if c not in frame.columns]
    if missing:
        raise TraceParseError(f"trace {path} is missing columns {missing}", line=1)
    if frame.empty:
        raise InputError(f"trace file has no rows: {path}")

    frame = frame[TRACE_COLUMNS]
    numeric = frame.apply(pd.to_numeric, errors="coerce")
    bad = numeric.isna().any(axis=1) | (numeric["compute_speed"] <= 0) | (numeric["bandwidth_bps"] <= 0) | (numeric["base_train_time_s"] < 0)
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0])
        # header is line 1
        raise TraceParseError(f"bad values {frame.iloc[row].to_dict()} in {path}", line=row + 2)
    return numeric


def load_traces(
    path: Path,
    n_clients: int,
    seed: int,
    total_samples: int = 50_000,
    dirichlet_alpha: float = 0.5,
) -> Population:
    """Build n_clients profiles from a capacity trace.

    Trace rows are used once each when the counts match, sampled without
    replacement when the trace is longer and with replacement when shorter.
    Data sizes come from a Dirichlet split of total_samples.
    """
    if n_clients < 1:
        raise InputError(f"n_clients must be >= 1, got {n_clients}")
    trace = _read_trace(Path(path))
    rng = np.random.default_rng([seed, 1])

    n_rows = len(trace)
    if n_rows == n_clients:
        rows = np.arange(n_rows)
    elif n_rows > n_clients:
        rows = np.sort(rng.choice(n_rows, size=n_clients, replace=False))
    else:
        rows = rng.choice(n_rows, size=n_clients, replace=True)

    shares = rng.dirichlet(np.full(n_clients, dirichlet_alpha))
    sizes = np.maximum(1, np.rint(shares * total_samples)).astype(int)

    values = trace.to_numpy()[rows]
    clients = [
        ClientProfile(
            id=i,
            compute_speed=float(speed),
            bandwidth=float(bw),
            data_size=int(size),
            base_train_time=float(train),
        )
        for i, ((speed, bw, train), size) in enumerate(zip(values, sizes))
    ]
    logger.info(f"✅ Loaded {n_clients} client profiles from {Path(path).name} ({n_rows} trace rows)")
    return Population(clients=clients, seed=seed)


def assign_security(pop: Population, distribution: Sequence[float], seed: int) -> Population:
    """Draw one security requirement per client from weights over (128, 192, 256)."""
    weights = np.asarray(distribution, dtype=float)
    if weights.shape != (len(SECURITY_LEVELS),):
        raise InputError(f"security distribution needs {len(SECURITY_LEVELS)} weights, got {len(weights)}")
    if (weights < 0).any() or weights.sum() <= 0:
        raise InputError(f"security weights must be non-negative with a positive sum, got {list(distribution)}")

    rng = np.random.default_rng([seed, 2])
    levels = rng.choice(SECURITY_LEVELS, size=len(pop), p=weights / weights.sum())
    clients = [c.model_copy(update={"security_req": int(level)}) for c, level in zip(pop.clients, levels)]
    return Population(clients=clients, seed=pop.seed)


def latency_breakdown(client: ClientProfile, plan: ParameterPlan, model: CostModel, n_params: int) -> LatencyBreakdown:
    return LatencyBreakdown(
        train_s=client.base_train_time / client.compute_speed,
        he_s=he_latency(plan, model, client.compute_speed, n_params),
        comm_s=ciphertext_bytes(plan, n_params) / client.bandwidth,
    )


def estimate_round_latency(client: ClientProfile, plan: ParameterPlan, model: CostModel, n_params: int) -> float:
    return latency_breakdown(client, plan, model, n_params).total
