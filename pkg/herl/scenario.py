"""
Scenario configuration
One TOML file per scenario, validated with pydantic. parse_config reports
every violation it finds in one ConfigError.
"""

import logging
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from herl.client_profile import Population, assign_security, load_traces
from herl.errors import ConfigError, HerlError, violations_from
from herl.fl_sim import AGGREGATION_MODES, STRATEGIES, ExperimentSettings, TrainerModel
from herl.he_plan import (
    DEFAULT_HE_CONFIG,
    CostModel,
    ParameterPlan,
    SecurityTable,
    build_action_grid,
    load_he_config,
    validate_plan,
)
from herl.rl_agent import QLearningConfig, QTable, RewardConfig
from herl.tiering import CRITERIA, TIERING_METHODS, integer_root, valid_k_values

logger = logging.getLogger(__name__)

SCENARIOS_DIR = Path(__file__).resolve().parent.parent / "scenarios"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class PopulationSpec(_Section):
    trace: Path = Field(..., description="Device capacity trace CSV")
    n_clients: int = Field(..., ge=1)
    security_weights: List[float] = Field([1.0, 0.0, 0.0], min_length=3, max_length=3, description="Weights over 128/192/256-bit requirements")
    total_samples: int = Field(50_000, ge=1)
    dirichlet_alpha: float = Field(0.5, gt=0)


class TieringSpec(_Section):
    method: Literal["hierarchical", "roundtime", "random", "utility"] = "hierarchical"
    criteria: List[str] = Field(["security", "latency"], min_length=1)
    k: int = Field(9, ge=1)
    profiled_fraction: float = Field(1.0, gt=0, le=1)
    dynamic: bool = False
    retier_every: int = Field(50, ge=1)


class PlanGridSpec(_Section):
    log_n: List[int] = Field([13, 14, 15], min_length=1)
    q_bits: List[int] = Field([60, 100, 150, 200, 300], min_length=1)


class HeSpec(_Section):
    config: Optional[Path] = Field(None, description="Security table and cost calibration; defaults to config/he_params.toml")


class CostOverrides(_Section):
    he_coeff: Optional[float] = None
    overhead_bits: Optional[float] = None
    depth: Optional[int] = None
    precision_coeff: Optional[float] = None


class RlSpec(_Section):
    gamma: float = Field(0.1, gt=0, le=1)
    mu: float = Field(0.9, ge=0, lt=1)
    epsilon: float = Field(0.1, ge=0, le=1)
    epsilon_decay: float = Field(1.0, gt=0, le=1)
    epsilon_min: float = Field(0.0, ge=0, le=1)
    init_scale: float = Field(0.01, ge=0)
    alpha: float = Field(5.0, ge=0)
    latency_bounds: Optional[List[float]] = None
    warm_start: Optional[Path] = None

    def q_config(self) -> QLearningConfig:
        return QLearningConfig(
            gamma=self.gamma,
            mu=self.mu,
            epsilon=self.epsilon,
            epsilon_decay=self.epsilon_decay,
            epsilon_min=self.epsilon_min,
            init_scale=self.init_scale,
        )


class StrategiesSpec(_Section):
    names: List[str] = Field(list(STRATEGIES), min_length=1)
    baseline: Tuple[int, int] = (14, 200)
    heuristic: Tuple[int, int] = (13, 100)


class RunSpec(_Section):
    rounds: int = Field(1000, ge=0)
    participation_rate: float = Field(0.1, gt=0, le=1)
    n_params: int = Field(1_000_000, ge=1)
    seeds: List[int] = Field([0, 1, 2, 3, 4], min_length=1)
    parallelism: int = Field(1, ge=1)
    aggregation: str = "sync"
    convergence_fraction: float = Field(0.95, gt=0, le=1)
    target_accuracy: Optional[float] = Field(None, gt=0, le=1)
    clusterings: Optional[List[str]] = None


class ScenarioConfig(_Section):
    name: str = "scenario"
    population: PopulationSpec
    tiering: TieringSpec = TieringSpec()
    plans: PlanGridSpec = PlanGridSpec()
    he: HeSpec = HeSpec()
    cost: CostOverrides = CostOverrides()
    trainer: TrainerModel = TrainerModel()
    rl: RlSpec = RlSpec()
    strategies: StrategiesSpec = StrategiesSpec()
    run: RunSpec = RunSpec()

    @property
    def clusterings(self) -> List[str]:
        return self.run.clusterings or [self.tiering.method]

    def he_setup(self) -> Tuple[SecurityTable, CostModel]:
        overrides = self.cost.model_dump(exclude_none=True)
        return load_he_config(self.he.config or DEFAULT_HE_CONFIG, overrides)

    def action_grid(self, table: SecurityTable) -> List[ParameterPlan]:
        return build_action_grid(self.plans.log_n, self.plans.q_bits, table)

    def load_population(self, seed: int) -> Population:
        spec = self.population
        pop = load_traces(spec.trace, spec.n_clients, seed, spec.total_samples, spec.dirichlet_alpha)
        return assign_security(pop, spec.security_weights, seed)

    def settings_for(self, seed: int, clustering: Optional[str] = None) -> ExperimentSettings:
        """Build the run settings for one seed (and optionally a different tiering method)."""
        table, cost = self.he_setup()
        warm = None
        if self.rl.warm_start is not None:
            warm = QTable.from_json(Path(self.rl.warm_start).read_text(encoding="utf-8"))
        return ExperimentSettings(
            population=self.load_population(seed),
            table=table,
            cost=cost,
            actions=self.action_grid(table),
            trainer=self.trainer,
            seed=seed,
            rounds=self.run.rounds,
            participation_rate=self.run.participation_rate,
            n_params=self.run.n_params,
            tiering_method=clustering or self.tiering.method,
            criteria=tuple(self.tiering.criteria),
            k=self.tiering.k,
            profiled_fraction=self.tiering.profiled_fraction,
            dynamic=self.tiering.dynamic,
            retier_every=self.tiering.retier_every,
            q_config=self.rl.q_config(),
            reward=RewardConfig(alpha=self.rl.alpha),
            latency_bounds=self.rl.latency_bounds,
            warm_start=warm,
            baseline_plan=ParameterPlan.from_pair(self.strategies.baseline),
            heuristic_plan=ParameterPlan.from_pair(self.strategies.heuristic),
            aggregation=self.run.aggregation,
            convergence_fraction=self.run.convergence_fraction,
            target_accuracy=self.run.target_accuracy,
        )


def resolve_scenario_path(name: str) -> Path:
    """Accept a file path or a bare scenario name from scenarios/."""
    path = Path(name)
    if path.is_file():
        return path
    candidate = SCENARIOS_DIR / f"{name}.toml"
    if candidate.is_file():
        return candidate
    raise ConfigError(f"Scenario not found: {name} (looked for {path} and {candidate})")


def _resolve_relative(raw: dict, base: Path) -> None:
    for section, key in (("population", "trace"), ("he", "config"), ("rl", "warm_start")):
        block = raw.get(section)
        if isinstance(block, dict) and isinstance(block.get(key), str):
            p = Path(block[key])
            if not p.is_absolute():
                block[key] = str((base / p).resolve())


def _check_k(tiering: TieringSpec, n_clients: Optional[int], method: str) -> List[str]:
    k = tiering.k
    if method == "hierarchical":
        beta = len(tiering.criteria)
        if k > 1:
            m = integer_root(k, beta)
            if m is None or m < 2:
                suggestion = ", ".join(str(v) for v in valid_k_values(beta, k))
                return [f"tiering.k: K={k} is not m^{beta} for hierarchical tiering; nearest valid K: {{{suggestion}}}"]
        return []
    if n_clients is not None and k > n_clients:
        return [f"tiering.k: K={k} exceeds population.n_clients={n_clients} for {method} tiering"]
    return []


def _tiering_checks(tiering: TieringSpec, n_clients: Optional[int], methods: List[str]) -> List[str]:
    violations: List[str] = []
    for name in tiering.criteria:
        if name not in CRITERIA:
            violations.append(f"tiering.criteria: unknown criterion '{name}', expected one of {sorted(CRITERIA)}")
    for method in methods:
        if method not in TIERING_METHODS:
            violations.append(f"run.clusterings: unknown tiering method '{method}', expected one of {list(TIERING_METHODS)}")
        else:
            violations.extend(_check_k(tiering, n_clients, method))
    return violations


def _section_or_none(raw: dict, name: str, spec):
    block = raw.get(name, {})
    if not isinstance(block, dict):
        return None
    try:
        return spec.model_validate(block)
    except ValidationError:
        return None


def partial_checks(raw: dict) -> List[str]:
    """Tiering cross-checks over whichever sections still validate on their own.

    parse_config adds these to the schema errors so a bad K is reported next to
    an unknown key elsewhere in the file.
    """
    tiering = _section_or_none(raw, "tiering", TieringSpec)
    if tiering is None:
        return []
    population = _section_or_none(raw, "population", PopulationSpec)
    run = _section_or_none(raw, "run", RunSpec)
    methods = (run.clusterings if run is not None else None) or [tiering.method]
    return _tiering_checks(tiering, population.n_clients if population is not None else None, methods)


def validate_scenario(cfg: ScenarioConfig) -> List[str]:
    """Cross-field checks that single-field validation cannot see. Returns every violation."""
    violations = _tiering_checks(cfg.tiering, cfg.population.n_clients, cfg.clusterings)
    for name in cfg.strategies.names:
        if name not in STRATEGIES:
            violations.append(f"strategies.names: unknown strategy '{name}', expected one of {list(STRATEGIES)}")
    if cfg.run.aggregation not in AGGREGATION_MODES:
        violations.append(f"run.aggregation: must be one of {list(AGGREGATION_MODES)}, got '{cfg.run.aggregation}'")

    weights = cfg.population.security_weights
    if any(w < 0 for w in weights) or sum(weights) <= 0:
        violations.append(f"population.security_weights: must be non-negative with a positive sum, got {weights}")
    if not Path(cfg.population.trace).is_file():
        violations.append(f"population.trace: file not found: {cfg.population.trace}")
    if cfg.rl.warm_start is not None and not Path(cfg.rl.warm_start).is_file():
        violations.append(f"rl.warm_start: file not found: {cfg.rl.warm_start}")
    bounds = cfg.rl.latency_bounds
    if bounds is not None and any(b >= a for b, a in zip(bounds, bounds[1:])):
        violations.append(f"rl.latency_bounds: edges must be strictly increasing, got {bounds}")

    try:
        table, _ = cfg.he_setup()
    except ConfigError as e:
        violations.extend(e.violations or [str(e)])
        return violations

    if not cfg.action_grid(table):
        violations.append("plans: no (log_n, q_bits) pair in the grid passes the 128-bit security bound")
    for label, pair in (("baseline", cfg.strategies.baseline), ("heuristic", cfg.strategies.heuristic)):
        try:
            plan = ParameterPlan.from_pair(pair)
        except ValidationError as e:
            violations.extend(violations_from(e, f"strategies.{label}"))
            continue
        verdict = validate_plan(plan, table)
        if not verdict:
            violations.append(f"strategies.{label}: plan {plan.label} is not admissible ({verdict.reason})")
    return violations


def parse_config(path) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"Scenario file not found: {path}") from None
    if not text.strip():
        raise ConfigError(f"Scenario file is empty: {path}")
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"Scenario {path} is not valid TOML: {e}") from None
    if not raw:
        raise ConfigError(f"Scenario file has no settings: {path}")

    raw.setdefault("name", path.stem)
    _resolve_relative(raw, path.resolve().parent)
    try:
        cfg = ScenarioConfig(**raw)
    except ValidationError as e:
        raise ConfigError(f"Invalid scenario {path}", violations_from(e) + partial_checks(raw)) from None

    try:
        violations = validate_scenario(cfg)
    except HerlError as e:
        violations = [str(e)]
    if violations:
        raise ConfigError(f"Invalid scenario {path}", violations)
    logger.info(f"✅ Loaded scenario '{cfg.name}' from {path}")
    return cfg
