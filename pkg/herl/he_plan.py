"""
HE parameter plans and their calibrated cost models
Stands in for real CKKS operations: security lookup, latency, ciphertext size
and the precision ceiling a plan imposes on model utility.
"""

import logging
import math
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from herl.errors import ConfigError, InputError, PlanError, violations_from

logger = logging.getLogger(__name__)

LOG_N_MIN = 12
LOG_N_MAX = 16
SECURITY_LEVELS = (128, 192, 256)
MIN_SECURITY = 128

DEFAULT_HE_CONFIG = Path(__file__).resolve().parent.parent / "config" / "he_params.toml"


class ParameterPlan(BaseModel):
    """One HE configuration: ring degree 2^log_n and a q_bits-bit coefficient modulus."""

    model_config = ConfigDict(frozen=True)

    log_n: int = Field(..., ge=LOG_N_MIN, le=LOG_N_MAX, description="log2 of the polynomial modulus degree")
    q_bits: int = Field(..., description="Total coefficient-modulus bit length")

    @property
    def key(self) -> Tuple[int, int]:
        return (self.log_n, self.q_bits)

    @property
    def degree(self) -> int:
        return 1 << self.log_n

    @property
    def label(self) -> str:
        return f"N{self.log_n}q{self.q_bits}"

    @classmethod
    def from_pair(cls, pair: Iterable[int]) -> "ParameterPlan":
        log_n, q_bits = pair
        return cls(log_n=log_n, q_bits=q_bits)

    def __lt__(self, other: "ParameterPlan") -> bool:
        return self.key < other.key


class SecurityRow(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    log_n: int = Field(..., ge=1)
    security_bits: int
    max_q_bits: int = Field(..., gt=0)

    @model_validator(mode="after")
    def _known_level(self):
        if self.security_bits not in SECURITY_LEVELS:
            raise ValueError(f"security_bits must be one of {SECURITY_LEVELS}, got {self.security_bits}")
        return self


class SecurityTable(BaseModel):
    """Max coefficient-modulus bits per (log_n, security level). Data, not code."""

    model_config = ConfigDict(frozen=True)

    rows: List[SecurityRow]

    @model_validator(mode="after")
    def _check_monotone(self):
        if not self.rows:
            raise ValueError("security table is empty")
        lookup: Dict[Tuple[int, int], int] = {}
        for row in self.rows:
            key = (row.log_n, row.security_bits)
            if key in lookup:
                raise ValueError(f"duplicate row for log_n={row.log_n}, {row.security_bits}-bit")
            lookup[key] = row.max_q_bits

        log_ns = sorted({r.log_n for r in self.rows})
        for log_n in log_ns:
            bounds = [lookup[(log_n, s)] for s in SECURITY_LEVELS if (log_n, s) in lookup]
            if any(a <= b for a, b in zip(bounds, bounds[1:])):
                raise ValueError(f"max_q_bits must strictly decrease with security level at log_n={log_n}")
        for level in SECURITY_LEVELS:
            bounds = [lookup[(n, level)] for n in log_ns if (n, level) in lookup]
            if any(a >= b for a, b in zip(bounds, bounds[1:])):
                raise ValueError(f"max_q_bits must strictly increase with log_n at {level}-bit")
        return self

    def _bounds(self) -> Dict[Tuple[int, int], int]:
        return {(r.log_n, r.security_bits): r.max_q_bits for r in self.rows}

    @property
    def log_ns(self) -> List[int]:
        return sorted({r.log_n for r in self.rows})

    def covers(self, log_n: int) -> bool:
        return (log_n, MIN_SECURITY) in self._bounds()

    def bound(self, log_n: int, security: int) -> Optional[int]:
        return self._bounds().get((log_n, security))

    def max_q_bits(self, log_n: int, security: int = MIN_SECURITY) -> int:
        bound = self.bound(log_n, security)
        if bound is None:
            raise PlanError(f"security table has no row for log_n={log_n} at {security}-bit")
        return bound


class CostModel(BaseModel):
    """Latency and precision calibration knobs."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    he_coeff: float = Field(1e-9, gt=0, description="seconds per degree * log2(degree) * q_bit")
    overhead_bits: float = Field(40.0, gt=0, description="headroom bits unavailable for precision")
    depth: float = Field(1, gt=0, description="multiplicative depth divisor")
    precision_coeff: float = Field(1.0, gt=0, description="utility-ceiling penalty scale")


class PlanVerdict(BaseModel):
    valid: bool
    reason: str = ""
    bound: Optional[int] = None

    def __bool__(self) -> bool:
        return self.valid


def validate_plan(plan: ParameterPlan, table: SecurityTable) -> PlanVerdict:
    """Accept a plan iff 0 < q_bits <= the 128-bit bound for its degree."""
    if not table.covers(plan.log_n):
        raise PlanError(f"security table does not cover log_n={plan.log_n}")
    bound = table.max_q_bits(plan.log_n, MIN_SECURITY)
    if plan.q_bits <= 0:
        return PlanVerdict(valid=False, reason="q_bits must be positive", bound=bound)
    if plan.q_bits > bound:
        return PlanVerdict(
            valid=False,
            reason=f"q_bits={plan.q_bits} exceeds the {MIN_SECURITY}-bit bound {bound} for log_n={plan.log_n}",
            bound=bound,
        )
    return PlanVerdict(valid=True, bound=bound)


def security_bits(plan: ParameterPlan, table: SecurityTable) -> int:
    """Largest standard level the plan still meets; 0 if it meets none."""
    if plan.q_bits <= 0:
        return 0
    level = 0
    for s in SECURITY_LEVELS:
        bound = table.bound(plan.log_n, s)
        if bound is not None and plan.q_bits <= bound:
            level = s
    return level


def n_ciphertexts(plan: ParameterPlan, n_params: int) -> int:
    if n_params <= 0:
        raise InputError(f"n_params must be positive, got {n_params}")
    slots = 1 << (plan.log_n - 1)
    return -(-n_params // slots)


def he_latency(plan: ParameterPlan, model: CostModel, client_speed: float, n_params: int) -> float:
    if client_speed <= 0:
        raise InputError(f"client_speed must be positive, got {client_speed}")
    per_ct = model.he_coeff * plan.degree * plan.log_n * plan.q_bits
    return n_ciphertexts(plan, n_params) * per_ct / client_speed


def ciphertext_bytes(plan: ParameterPlan, n_params: int) -> float:
    # two ring elements per ciphertext, q_bits per coefficient
    return n_ciphertexts(plan, n_params) * 2 * plan.degree * plan.q_bits / 8


def precision_bits(plan: ParameterPlan, model: CostModel) -> float:
    return max(0.0, (plan.q_bits - model.overhead_bits) / (model.depth + 1))


def precision_penalty(plan: ParameterPlan, model: CostModel) -> float:
    """Fraction of the accuracy ceiling lost to CKKS approximation error. Independent of log_n."""
    return min(1.0, model.precision_coeff * math.pow(2.0, -precision_bits(plan, model)))


def build_action_grid(log_ns: Iterable[int], q_bits: Iterable[int], table: SecurityTable) -> List[ParameterPlan]:
    """Cartesian grid filtered by validate_plan, sorted by (log_n, q_bits)."""
    grid = []
    for log_n in sorted(set(log_ns)):
        for q in sorted(set(q_bits)):
            plan = ParameterPlan(log_n=log_n, q_bits=q)
            verdict = validate_plan(plan, table)
            if verdict:
                grid.append(plan)
            else:
                logger.debug(f"Dropping {plan.label} from action grid: {verdict.reason}")
    return grid


def load_he_config(path: Optional[Path] = None, overrides: Optional[dict] = None) -> Tuple[SecurityTable, CostModel]:
    """Read the security table and cost model from a TOML file.

    Layout:
        [cost]        he_coeff, overhead_bits, depth, precision_coeff
        [[security]]  log_n, bits_128, bits_192, bits_256   (one block per degree)
    """
    path = Path(path or DEFAULT_HE_CONFIG)
    try:
        with open(path, "rb") as f:
            raw = tomllib.load(f)
    except FileNotFoundError:
        raise ConfigError(f"HE config not found: {path}") from None
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"HE config {path} is not valid TOML: {e}") from None

    violations: List[str] = []
    unknown = set(raw) - {"cost", "security"}
    violations.extend(f"{key}: unknown key" for key in sorted(unknown))

    rows = []
    for i, block in enumerate(raw.get("security", [])):
        extra = set(block) - {"log_n", "bits_128", "bits_192", "bits_256"}
        violations.extend(f"security[{i}].{key}: unknown key" for key in sorted(extra))
        for level in SECURITY_LEVELS:
            if f"bits_{level}" in block:
                rows.append({"log_n": block.get("log_n"), "security_bits": level, "max_q_bits": block[f"bits_{level}"]})

    table = cost = None
    try:
        table = SecurityTable(rows=rows)
    except ValidationError as e:
        violations.extend(violations_from(e, "security"))
    try:
        cost = CostModel(**{**raw.get("cost", {}), **(overrides or {})})
    except ValidationError as e:
        violations.extend(violations_from(e, "cost"))

    if violations:
        raise ConfigError(f"Invalid HE config {path}", violations)
    logger.debug(f"Loaded HE config from {path}: {len(table.log_ns)} degrees")
    return table, cost
