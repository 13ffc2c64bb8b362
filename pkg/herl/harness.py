"""
Experiment harness
Runs every (clustering, strategy, seed) cell of a scenario, writes per-run
CSV/JSON files, the median summary, plot data and a manifest.
"""

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Sequence

import numpy as np
import pandas as pd

from herl import __version__
from herl.errors import ConfigError, InputError
from herl.fl_sim import ExperimentResult, run_experiment
from herl.rl_agent import QTable
from herl.scenario import ScenarioConfig, validate_scenario

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.10g"
SWEEP_AXES = ("K", "alpha")

SUMMARY_COLUMNS = [
    "clustering",
    "strategy",
    "runs",
    "failed",
    "final_accuracy",
    "convergence_time_s",
    "total_security_loss",
    "efficiency_acc_per_h",
    "accuracy_at_baseline_convergence",
]


@dataclass
class ComparisonReport:
    output_dir: Path
    summary: pd.DataFrame
    results: List[ExperimentResult] = field(default_factory=list)
    failures: List[Dict[str, Any]] = field(default_factory=list)
    files: List[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures


@dataclass
class SweepReport:
    axis: str
    output_dir: Path
    table: pd.DataFrame
    comparisons: Dict[Any, ComparisonReport] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return all(c.ok for c in self.comparisons.values())


def run_cell(cfg: ScenarioConfig, clustering: str, strategy: str, seed: int) -> Dict[str, Any]:
    """One (clustering, strategy, seed) run. Failures come back as a result dict instead of raising."""
    try:
        settings = cfg.settings_for(seed, clustering)
        result = run_experiment(settings, strategy, clustering)
        return {"success": True, "clustering": clustering, "strategy": strategy, "seed": seed, "result": result}
    except Exception as e:
        logger.error(f"❌ Run {clustering}/{strategy} seed={seed} failed: {e}", exc_info=True)
        return {
            "success": False,
            "clustering": clustering,
            "strategy": strategy,
            "seed": seed,
            "error": f"{type(e).__name__}: {e}",
        }


def _cells(cfg: ScenarioConfig) -> List[tuple]:
    return [
        (clustering, strategy, seed)
        for clustering in cfg.clusterings
        for strategy in cfg.strategies.names
        for seed in cfg.run.seeds
    ]


def _execute(cfg: ScenarioConfig, cells: Sequence[tuple]) -> List[Dict[str, Any]]:
    if cfg.run.parallelism <= 1 or len(cells) <= 1:
        return [run_cell(cfg, *cell) for cell in cells]
    with ProcessPoolExecutor(max_workers=min(cfg.run.parallelism, len(cells))) as pool:
        futures = [pool.submit(run_cell, cfg, *cell) for cell in cells]
        # joined in submission order
        return [f.result() for f in futures]


def _write_json(path: Path, payload: Any) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def run_stem(result: ExperimentResult) -> str:
    return f"{result.clustering}_{result.strategy}_seed{result.seed}"


def summarize(results: Sequence[ExperimentResult], failures: Sequence[Dict[str, Any]] = ()) -> pd.DataFrame:
    """Median over seeds per (clustering, strategy).

    accuracy_at_baseline_convergence is each run's accuracy at the median
    convergence time of the baseline runs under the same clustering.
    """
    if not results:
        return pd.DataFrame(columns=SUMMARY_COLUMNS)
    per_run = pd.DataFrame(
        [
            {
                "clustering": r.clustering,
                "strategy": r.strategy,
                "seed": r.seed,
                "final_accuracy": r.final_accuracy,
                "convergence_time_s": r.convergence_time,
                "total_security_loss": r.total_security_loss,
                "efficiency_acc_per_h": r.efficiency,
            }
            for r in results
        ]
    )
    for column in ("convergence_time_s", "efficiency_acc_per_h"):
        per_run[column] = pd.to_numeric(per_run[column])
    baseline_time = (
        per_run[per_run["strategy"] == "baseline"].groupby("clustering")["convergence_time_s"].median().to_dict()
    )
    per_run["accuracy_at_baseline_convergence"] = [
        r.accuracy_at(baseline_time[r.clustering])
        if r.clustering in baseline_time and pd.notna(baseline_time[r.clustering])
        else np.nan
        for r in results
    ]

    failed = pd.DataFrame(list(failures), columns=["clustering", "strategy", "seed"]) if failures else None
    rows = []
    for (clustering, strategy), group in per_run.groupby(["clustering", "strategy"], sort=False):
        n_failed = 0
        if failed is not None:
            n_failed = int(((failed["clustering"] == clustering) & (failed["strategy"] == strategy)).sum())
        rows.append(
            {
                "clustering": clustering,
                "strategy": strategy,
                "runs": len(group),
                "failed": n_failed,
                "final_accuracy": group["final_accuracy"].median(),
                "convergence_time_s": group["convergence_time_s"].median(),
                "total_security_loss": group["total_security_loss"].median(),
                "efficiency_acc_per_h": group["efficiency_acc_per_h"].median(),
                "accuracy_at_baseline_convergence": group["accuracy_at_baseline_convergence"].median(),
            }
        )
    return pd.DataFrame(rows, columns=SUMMARY_COLUMNS)


def _plot_frame(results: Sequence[ExperimentResult]) -> pd.DataFrame:
    rows = [
        {"seed": r.seed, "round": rr.round, "sim_time_s": rr.sim_time, "global_acc": rr.global_accuracy}
        for r in results
        for rr in r.rounds
    ]
    return pd.DataFrame(rows, columns=["seed", "round", "sim_time_s", "global_acc"])


def write_reports(
    cfg: ScenarioConfig,
    results: Sequence[ExperimentResult],
    failures: Sequence[Dict[str, Any]],
    output_dir: Path,
) -> List[str]:
    """Write every output file for one comparison; returns the written paths relative to output_dir."""
    output_dir = Path(output_dir)
    runs_dir = output_dir / "runs"
    plot_dir = output_dir / "plot_data"
    runs_dir.mkdir(parents=True, exist_ok=True)
    plot_dir.mkdir(parents=True, exist_ok=True)
    written: List[str] = []

    for seed in sorted({r.seed for r in results}):
        path = output_dir / f"population_seed{seed}.json"
        path.write_text(cfg.load_population(seed).to_json(), encoding="utf-8")
        written.append(path.relative_to(output_dir).as_posix())

    for result in results:
        stem = run_stem(result)
        csv_path = runs_dir / f"{stem}.csv"
        result.to_frame().to_csv(csv_path, index=False, float_format=FLOAT_FORMAT)
        json_path = runs_dir / f"{stem}_summary.json"
        _write_json(json_path, result.summary())
        written += [csv_path.relative_to(output_dir).as_posix(), json_path.relative_to(output_dir).as_posix()]
        if result.qtable is not None:
            q_path = runs_dir / f"qtable_{stem}.json"
            q_path.write_text(result.qtable.to_json(), encoding="utf-8")
            written.append(q_path.relative_to(output_dir).as_posix())

    groups: Dict[tuple, List[ExperimentResult]] = {}
    for result in results:
        groups.setdefault((result.clustering, result.strategy), []).append(result)
    for (clustering, strategy), group in groups.items():
        path = plot_dir / f"{clustering}_{strategy}.csv"
        _plot_frame(group).to_csv(path, index=False, float_format=FLOAT_FORMAT)
        written.append(path.relative_to(output_dir).as_posix())

    summary_path = output_dir / "summary.csv"
    summarize(results, failures).to_csv(summary_path, index=False, float_format=FLOAT_FORMAT)
    written.append("summary.csv")

    manifest = {
        "scenario": cfg.name,
        "version": __version__,
        "cells": len(results) + len(failures),
        "files": sorted(written),
        "failed": [{k: f[k] for k in ("clustering", "strategy", "seed", "error")} for f in failures],
    }
    _write_json(output_dir / "manifest.json", manifest)
    written.append("manifest.json")
    return written


def run_comparison(cfg: ScenarioConfig, output_dir) -> ComparisonReport:
    """Every (clustering x strategy x seed) cell; a failing cell is reported and the rest continue."""
    output_dir = Path(output_dir)
    cells = _cells(cfg)
    logger.info(f"🔄 Running {len(cells)} cell(s) for scenario '{cfg.name}' -> {output_dir}")

    outcomes = _execute(cfg, cells)
    results = [o["result"] for o in outcomes if o["success"]]
    failures = [o for o in outcomes if not o["success"]]

    files = write_reports(cfg, results, failures, output_dir)
    summary = summarize(results, failures)
    if failures:
        logger.warning(f"⚠️ {len(failures)}/{len(cells)} cell(s) failed; see {output_dir / 'manifest.json'}")
    else:
        logger.info(f"✅ All {len(cells)} cell(s) finished")
    return ComparisonReport(output_dir=output_dir, summary=summary, results=results, failures=failures, files=files)


def with_axis_value(cfg: ScenarioConfig, axis: str, value) -> ScenarioConfig:
    """Copy of cfg with one sweep axis set, re-validated."""
    if axis == "K":
        updated = cfg.model_copy(update={"tiering": cfg.tiering.model_copy(update={"k": int(value)})})
    elif axis == "alpha":
        alpha = float(value)
        if alpha < 0:
            raise ConfigError("Invalid sweep value for alpha", [f"rl.alpha: must be >= 0, got {alpha}"])
        updated = cfg.model_copy(update={"rl": cfg.rl.model_copy(update={"alpha": alpha})})
    else:
        raise InputError(f"unknown sweep axis '{axis}', expected one of {SWEEP_AXES}")
    violations = validate_scenario(updated)
    if violations:
        raise ConfigError(f"Invalid sweep value {axis}={value}", violations)
    return updated


def run_sweep(cfg: ScenarioConfig, axis: str, values: Sequence, output_dir) -> SweepReport:
    """One comparison per axis value, each in its own sub-directory, plus sweep_<axis>.csv."""
    if axis not in SWEEP_AXES:
        raise InputError(f"unknown sweep axis '{axis}', expected one of {SWEEP_AXES}")
    if not values:
        raise InputError(f"sweep over {axis} needs at least one value")
    output_dir = Path(output_dir)
    # every value is checked before anything runs
    configs = [(value, with_axis_value(cfg, axis, value)) for value in values]

    comparisons: Dict[Any, ComparisonReport] = {}
    frames = []
    for value, sub_cfg in configs:
        logger.info(f"🔄 Sweep {axis}={value}")
        report = run_comparison(sub_cfg, output_dir / f"{axis}_{value}")
        comparisons[value] = report
        frame = report.summary.copy()
        frame.insert(0, axis, value)
        frames.append(frame)

    table = pd.concat(frames, ignore_index=True)
    output_dir.mkdir(parents=True, exist_ok=True)
    table.to_csv(output_dir / f"sweep_{axis}.csv", index=False, float_format=FLOAT_FORMAT)
    return SweepReport(axis=axis, output_dir=output_dir, table=table, comparisons=comparisons)


def dump_qtable(run_dir) -> Dict[str, QTable]:
    """Load every Q-table written under run_dir, keyed by file stem."""
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise InputError(f"run directory not found: {run_dir}")
    tables = {}
    for path in sorted(run_dir.rglob("qtable_*.json")):
        tables[path.stem] = QTable.from_json(path.read_text(encoding="utf-8"))
    if not tables:
        raise InputError(f"no qtable_*.json files under {run_dir}")
    return tables


def greedy_policy(q: QTable) -> pd.DataFrame:
    """Greedy plan and its value per state, for printing."""
    rows = []
    for s in q.states:
        action = q.greedy(s)
        rows.append({"state": s.label, "plan": action.plan.label, "q_value": q.value(s, action)})
    return pd.DataFrame(rows, columns=["state", "plan", "q_value"])
