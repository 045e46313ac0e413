"""Experiment runs, parameter sweeps and run summaries.

Output layout under ``cfg.out_dir``::

    config.json               resolved configuration and code version
    summary.csv               one row per seed (one row for verify/gradcheck)
    seed-<n>/metrics.jsonl    header record, then one record per meta-cycle
    seed-<n>/multitask.csv    multitask only: per-step metrics with wall_ms
    seed-<n>/trajectory.jsonl optional, two-colors runs with trajectory_dump
    seed-<n>/params.json      optional, with save_params
    verify.csv                verify only: one row per instance and beta
    gradcheck.csv             gradcheck only: one row per registered check
"""
from __future__ import annotations

import itertools
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from .ActorCriticRunner import ActorCriticRunner
from .base import ConfigError, Record, Stage
from .config import ExperimentConfig, from_dict
from .gradcheck import run_checks
from .MetricsWriter import MetricsWriter
from .models import save_params
from .MultitaskRunner import MultitaskRunner
from .NanGuard import NanGuard
from .QLambdaRunner import QLambdaRunner
from .theory import REPORT_COLUMNS, run_verification
from .TwoColorsEnv import TrajectoryWriter
from .util import code_version, header_lines, write_csv

_LOGGER = logging.getLogger("experiments")

RL_SUMMARY_COLUMNS = (
    "experiment", "seed", "mode", "K", "L", "matching", "meta_lr", "fixed_epsilon", "eps_meta",
    "total_return", "env_steps", "cycles", "mean_epsilon", "epsilon_range", "flip_response",
    "entropy_range", "status",
)
MULTITASK_SUMMARY_COLUMNS = (
    "experiment", "seed", "mode", "K", "L", "matching", "meta_lr", "meta_steps", "final_accuracy",
    "baseline_accuracy", "final_meta_loss", "status",
)
MULTITASK_COLUMNS = ("meta_step", "mode", "K", "L", "meta_train_loss", "meta_test_accuracy", "wall_ms")
GRADCHECK_COLUMNS = ("name", "error", "passed", "size")
VERIFY_SUMMARY_COLUMNS = (
    "experiment", "seed", "instances", "dominance_instances", "mg_descent_passed", "bmg_descent_passed",
    "dominance_passed", "degenerate", "monotone_fraction", "monotone_ok", "bmg_monotone_fraction",
    "dominance_strict_fraction", "identity_max_gap",
    "dual_path_max_error", "equivalence_max_error", "status",
)
GRADCHECK_SUMMARY_COLUMNS = ("experiment", "seed", "checks", "passed", "max_error", "status")

SCORE_KEYS = ("total_return", "final_accuracy")

ENTROPY_OFFSET = 3333
FLIP_WINDOW = 10_000


@dataclass
class RunResult:
    status: int
    out_dir: Path
    rows: List[Dict[str, Any]] = field(default_factory=list)


def summary_columns(experiment: str) -> Tuple[str, ...]:
    return {
        "twocolors-ac": RL_SUMMARY_COLUMNS,
        "twocolors-q": RL_SUMMARY_COLUMNS,
        "multitask": MULTITASK_SUMMARY_COLUMNS,
        "verify": VERIFY_SUMMARY_COLUMNS,
        "gradcheck": GRADCHECK_SUMMARY_COLUMNS,
    }[experiment]


# ---------------------------------------------------------------------------
# statistics over a metric stream

def _cycles(records: Sequence[Record], flip_period: int) -> Dict[int, List[Record]]:
    groups: Dict[int, List[Record]] = {}
    for rec in records:
        if "env_step" in rec:
            groups.setdefault((int(rec["env_step"]) - 1) // flip_period, []).append(rec)
    return groups


def epsilon_range(records: Sequence[Record], flip_period: int, late_fraction: float = 0.5) -> float:
    """max - min of epsilon within each reward cycle, averaged over late cycles."""
    groups = _cycles(records, flip_period)
    spans = [max(r["epsilon"] for r in g) - min(r["epsilon"] for r in g) for _, g in sorted(groups.items())]
    if not spans:
        return math.nan
    late = spans[-max(1, int(math.ceil(len(spans) * late_fraction))):]
    return float(np.mean(late))


def flip_response(records: Sequence[Record], flip_period: int, window: int = FLIP_WINDOW) -> float:
    """Mean epsilon in the window after each flip minus the window before it."""
    if not records:
        return math.nan
    steps = np.array([r["env_step"] for r in records], dtype=np.int64)
    eps = np.array([r["epsilon"] for r in records], dtype=np.float64)
    diffs = []
    for flip in range(flip_period, int(steps.max()), flip_period):
        before = eps[(steps > flip - window) & (steps <= flip)]
        after = eps[(steps > flip) & (steps <= flip + window)]
        if before.size and after.size:
            diffs.append(after.mean() - before.mean())
    return float(np.mean(diffs)) if diffs else math.nan


def entropy_range(records: Sequence[Record], flip_period: int, offset: int = ENTROPY_OFFSET) -> float:
    """Policy entropy ``offset`` steps into each reward cycle minus at its end."""
    deltas = []
    for idx, group in sorted(_cycles(records, flip_period).items()):
        start = idx * flip_period
        early = [r for r in group if r["env_step"] >= start + offset and r.get("policy_entropy") is not None]
        if early and len(early) < len(group):
            deltas.append(early[0]["policy_entropy"] - group[-1]["policy_entropy"])
    return float(np.mean(deltas)) if deltas else math.nan


def welch_greater(a: Sequence[float], b: Sequence[float]) -> Tuple[float, float]:
    """One-sided Welch t-test of mean(a) > mean(b); returns (t, p)."""
    res = stats.ttest_ind(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64), equal_var=False,
                          alternative="greater")
    return float(res.statistic), float(res.pvalue)


# ---------------------------------------------------------------------------
# single runs

def _base_row(cfg: ExperimentConfig, seed: int) -> Dict[str, Any]:
    return {"experiment": cfg.experiment, "seed": seed, "mode": cfg.mode, "K": cfg.K, "L": cfg.L,
            "matching": cfg.matching, "meta_lr": cfg.meta_lr, "fixed_epsilon": cfg.fixed_epsilon,
            "eps_meta": cfg.eps_meta, "status": "ok"}


def summarize_rl(cfg: ExperimentConfig, seed: int, records: Sequence[Record]) -> Dict[str, Any]:
    row = _base_row(cfg, seed)
    last = records[-1] if records else {}
    row.update({
        "total_return": last.get("total_return", 0.0),
        "env_steps": last.get("env_step", 0),
        "cycles": len(records),
        "mean_epsilon": float(np.mean([r["epsilon"] for r in records])) if records else math.nan,
        "epsilon_range": epsilon_range(records, cfg.flip_period),
        "flip_response": flip_response(records, cfg.flip_period),
        "entropy_range": entropy_range(records, cfg.flip_period),
    })
    return row


def summarize_multitask(cfg: ExperimentConfig, seed: int, records: Sequence[Record]) -> Dict[str, Any]:
    row = _base_row(cfg, seed)
    trained = [r for r in records if r["meta_step"] > 0]
    row.update({
        "meta_steps": len(trained),
        "final_accuracy": records[-1]["meta_test_accuracy"] if records else math.nan,
        "baseline_accuracy": records[0]["meta_test_accuracy"] if records else math.nan,
        "final_meta_loss": trained[-1]["meta_train_loss"] if trained else math.nan,
    })
    return row


def _make_runner(cfg: ExperimentConfig, seed: int, recorder: Optional[TrajectoryWriter]) -> Stage:
    if cfg.experiment == "twocolors-ac":
        return ActorCriticRunner(cfg, seed, recorder)
    if cfg.experiment == "twocolors-q":
        return QLambdaRunner(cfg, seed, recorder)
    if cfg.experiment == "multitask":
        return MultitaskRunner(cfg, seed)
    raise ConfigError("experiment", f"{cfg.experiment!r} has no metric stream")


def run_seed(cfg: ExperimentConfig, seed: int, out: Path) -> Dict[str, Any]:
    """Run one seed through runner -> NanGuard -> MetricsWriter."""
    seed_dir = out / f"seed-{seed}"
    header = {"version": code_version(), "config": cfg.to_dict(), "seed": seed}
    recorder = None
    if cfg.trajectory_dump and cfg.experiment != "multitask":
        recorder = TrajectoryWriter(seed_dir / "trajectory.jsonl", header)
    try:
        runner = _make_runner(cfg, seed, recorder)
        writer = MetricsWriter(seed_dir / "metrics.jsonl", header)
        runner.pipe(NanGuard()).pipe(writer)
        writer.run()
    finally:
        if recorder is not None:
            recorder.close()
    if cfg.save_params:
        save_params(seed_dir / "params.json", runner.named_params(), header)  # type: ignore[attr-defined]
    if isinstance(runner, MultitaskRunner):
        rows = [dict(rec, wall_ms=ms) for rec, ms in zip(writer.records, runner.wall_ms)]
        write_csv(seed_dir / "multitask.csv", rows, MULTITASK_COLUMNS, header_lines(cfg.to_dict()))
        return summarize_multitask(cfg, seed, writer.records)
    return summarize_rl(cfg, seed, writer.records)


def _write_config(cfg: ExperimentConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    doc = {"version": code_version(), "config": cfg.to_dict()}
    (out / "config.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def run(cfg: ExperimentConfig) -> RunResult:
    """Execute ``cfg.experiment`` for every seed and write its artifacts.

    Status is 0 on success and 1 when a verification or gradient check
    fails. Invalid configurations raise ConfigError; a non-finite metric
    raises NumericError after its abort record has been written.
    """
    cfg.validate()
    out = Path(cfg.out_dir)
    _write_config(cfg, out)
    comments = header_lines(cfg.to_dict())
    _LOGGER.info("Running %s (seeds %s) -> %s", cfg.experiment, list(cfg.run_seeds), out)

    if cfg.experiment == "verify":
        report = run_verification(cfg)
        write_csv(out / "verify.csv", report.rows, REPORT_COLUMNS, comments)
        row = {"experiment": cfg.experiment, "seed": cfg.seed, **report.summary,
               "status": "ok" if report.passed else "failed"}
        write_csv(out / "summary.csv", [row], VERIFY_SUMMARY_COLUMNS, comments)
        return RunResult(0 if report.passed else 1, out, [row])

    if cfg.experiment == "gradcheck":
        results = run_checks(cfg.gradcheck_h, cfg.gradcheck_tolerance, cfg.seed)
        write_csv(out / "gradcheck.csv", [vars(r) for r in results], GRADCHECK_COLUMNS, comments)
        ok = all(r.passed for r in results)
        row = {"experiment": cfg.experiment, "seed": cfg.seed, "checks": len(results),
               "passed": sum(r.passed for r in results),
               "max_error": max((r.error for r in results), default=0.0), "status": "ok" if ok else "failed"}
        write_csv(out / "summary.csv", [row], GRADCHECK_SUMMARY_COLUMNS, comments)
        return RunResult(0 if ok else 1, out, [row])

    rows = []
    for seed in cfg.run_seeds:
        row = run_seed(cfg, seed, out)
        _LOGGER.info("seed %d: %s", seed, {k: row[k] for k in SCORE_KEYS if k in row})
        rows.append(row)
    write_csv(out / "summary.csv", rows, summary_columns(cfg.experiment), comments)
    return RunResult(0, out, rows)


# ---------------------------------------------------------------------------
# sweeps

def grid_points(grid: Mapping[str, Sequence[Any]]) -> List[Dict[str, Any]]:
    keys = list(grid.keys())
    return [dict(zip(keys, combo)) for combo in itertools.product(*(list(grid[k]) for k in keys))]


def _score(row: Mapping[str, Any]) -> float:
    for key in SCORE_KEYS:
        value = row.get(key)
        if isinstance(value, (int, float)) and not math.isnan(value):
            return float(value)
    return -math.inf


def _run_point(config: Dict[str, Any]) -> List[Dict[str, Any]]:
    return run(from_dict(config)).rows


def sweep(template: ExperimentConfig, grid: Mapping[str, Sequence[Any]], workers: int = 1,
          out_dir: Optional[str] = None) -> List[Dict[str, Any]]:
    """One run per grid point, each in its own directory; rows sorted by score.

    A point that fails is logged and recorded with status "failed" (one row
    per seed); the remaining points still run.
    """
    known = set(template.to_dict())
    for key in grid:
        if key not in known:
            raise ConfigError(key, "sweep grid key is not a config field")
    base = Path(out_dir or template.out_dir)
    points = grid_points(grid)
    _LOGGER.info("Sweep: %d points x %d seeds -> %s", len(points), len(template.run_seeds), base)

    jobs: List[Tuple[int, Dict[str, Any], Optional[Dict[str, Any]], Optional[Exception]]] = []
    for i, point in enumerate(points):
        try:
            cfg = template.replace(**{**point, "out_dir": str(base / f"point-{i:03d}")})
            jobs.append((i, point, cfg.to_dict(), None))
        except Exception as e:
            jobs.append((i, point, None, e))

    rows: List[Dict[str, Any]] = []

    def collect(i: int, point: Dict[str, Any], outcome: Optional[List[Dict[str, Any]]],
                error: Optional[BaseException]) -> None:
        if error is not None or outcome is None:
            _LOGGER.warning("Sweep point %d %s failed: %s", i, point, error)
            rows.extend({"point": i, **point, "seed": s, "status": "failed", "error": str(error)}
                        for s in template.run_seeds)
            return
        for r in outcome:
            rows.append({**r, "point": i, **point})
        _LOGGER.info("Sweep point %d %s: best score %.4f", i, point, max(_score(r) for r in outcome))

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [(i, p, pool.submit(_run_point, c) if c is not None else None, e) for i, p, c, e in jobs]
            for i, p, fut, err in futures:
                if fut is None:
                    collect(i, p, None, err)
                    continue
                try:
                    collect(i, p, fut.result(), None)
                except Exception as e:
                    collect(i, p, None, e)
    else:
        for i, p, c, err in jobs:
            if c is None:
                collect(i, p, None, err)
                continue
            try:
                collect(i, p, _run_point(c), None)
            except Exception as e:
                collect(i, p, None, e)

    rows.sort(key=lambda r: (r.get("status") != "ok", -_score(r), r["point"], r.get("seed", 0)))
    columns = ["point", *grid.keys(), *[c for c in summary_columns(template.experiment) if c not in grid], "error"]
    write_csv(base / "sweep_summary.csv", rows, columns, header_lines(template.to_dict()))
    return rows


def best_point(rows: Sequence[Mapping[str, Any]]) -> Optional[Dict[str, Any]]:
    """Grid point with the highest mean score over its successful seeds."""
    by_point: Dict[int, List[Mapping[str, Any]]] = {}
    for r in rows:
        if r.get("status") == "ok":
            by_point.setdefault(int(r["point"]), []).append(r)
    if not by_point:
        return None
    best = max(by_point, key=lambda p: (float(np.mean([_score(r) for r in by_point[p]])), -p))
    group = by_point[best]
    return {"point": best, "mean_score": float(np.mean([_score(r) for r in group])),
            "scores": [_score(r) for r in group], "row": dict(group[0])}
