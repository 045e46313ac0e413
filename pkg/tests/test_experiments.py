import json
import math

import pytest

from metaboot import experiments, gradcheck, learners
from metaboot.ActorCriticRunner import online_bmg_loop
from metaboot.base import ConfigError, NumericError
from metaboot.config import ExperimentConfig
from metaboot.experiments import (
    best_point,
    entropy_range,
    epsilon_range,
    flip_response,
    grid_points,
    run,
    sweep,
    welch_greater,
)
from metaboot.models import load_params
from metaboot.util import code_version, read_csv, read_jsonl

TINY_RL = dict(total_env_steps=64, rollout_len=8, n_step=8, hidden_layers=1, hidden_width=8,
               meta_hidden_width=4, stats_window=4, K=1, L=2, flip_period=32, q_window=4, q_meta_every=8)
TINY_MT = dict(experiment="multitask", K=1, L=2, multitask_ways=3, multitask_shots=2, multitask_queries=4,
               multitask_dim=4, multitask_hidden=6, multitask_meta_batch=2, multitask_meta_steps=3,
               multitask_eval_tasks=2, multitask_eval_every=1, meta_lr=1e-2)


def _cfg(tmp_path, **kw):
    return ExperimentConfig(**{**TINY_RL, "out_dir": str(tmp_path / "run"), **kw}).validate()


@pytest.mark.parametrize("experiment,mode", [("twocolors-ac", "fixed"), ("twocolors-ac", "mg"),
                                             ("twocolors-ac", "bmg"), ("twocolors-q", "fixed"),
                                             ("twocolors-q", "bmg")])
def test_rl_runs_write_metrics_and_summary(tmp_path, experiment, mode):
    result = run(_cfg(tmp_path, experiment=experiment, mode=mode, seeds=(0, 1)))
    assert result.status == 0
    out = result.out_dir
    assert json.loads((out / "config.json").read_text())["config"]["experiment"] == experiment
    summary = read_csv(out / "summary.csv")
    assert [r["seed"] for r in summary] == ["0", "1"]
    assert (out / "summary.csv").read_text().startswith("# metaboot")
    records = read_jsonl(out / "seed-0" / "metrics.jsonl")
    assert records[0]["type"] == "header" and records[0]["seed"] == 0
    assert records[-1]["env_step"] == 64
    steps = [r["env_step"] for r in records[1:]]
    assert steps == sorted(steps)
    assert result.rows[0]["env_steps"] == 64
    assert result.rows[0]["cycles"] == len(records) - 1


def test_rerun_is_byte_identical(tmp_path):
    cfg = _cfg(tmp_path, experiment="twocolors-ac", mode="bmg")
    path = tmp_path / "run" / "seed-0" / "metrics.jsonl"
    run(cfg)
    first = path.read_bytes()
    run(cfg)
    assert path.read_bytes() == first


def test_q_rerun_is_byte_identical(tmp_path):
    cfg = _cfg(tmp_path, experiment="twocolors-q", mode="bmg", seed=5)
    path = tmp_path / "run" / "seed-5" / "metrics.jsonl"
    run(cfg)
    first = path.read_bytes()
    run(cfg)
    assert path.read_bytes() == first


def test_optional_artifacts(tmp_path):
    result = run(_cfg(tmp_path, experiment="twocolors-ac", mode="mg", trajectory_dump=True, save_params=True))
    seed_dir = result.out_dir / "seed-0"
    header, *steps = read_jsonl(seed_dir / "trajectory.jsonl")
    assert header["type"] == "header"
    assert header["config"]["mode"] == "mg" and header["version"] == code_version()
    assert len(steps) == 64
    params = json.loads((seed_dir / "params.json").read_text())
    assert params["config"]["mode"] == "mg" and params["version"] == code_version()
    assert list(load_params(seed_dir / "params.json"))[0] == "x/W0"


def test_q_trajectory_dump(tmp_path):
    result = run(_cfg(tmp_path, experiment="twocolors-q", mode="bmg", trajectory_dump=True))
    header, *steps = read_jsonl(result.out_dir / "seed-0" / "trajectory.jsonl")
    assert header["config"]["experiment"] == "twocolors-q"
    assert [s["step"] for s in steps] == list(range(1, 65))


def test_multitask_run(tmp_path):
    cfg = ExperimentConfig(**{**TINY_MT, "out_dir": str(tmp_path / "mt")}).validate()
    result = run(cfg)
    assert result.status == 0
    rows = read_csv(result.out_dir / "seed-0" / "multitask.csv")
    assert [r["meta_step"] for r in rows] == ["0", "1", "2", "3"]
    assert all(float(r["wall_ms"]) >= 0.0 for r in rows)
    row = result.rows[0]
    assert row["meta_steps"] == 3
    assert 0.0 <= row["baseline_accuracy"] <= 1.0
    # wall time stays out of the metric stream
    records = read_jsonl(result.out_dir / "seed-0" / "metrics.jsonl")
    assert all("wall_ms" not in r for r in records)


def test_verify_run(tmp_path):
    cfg = ExperimentConfig(experiment="verify", theory_instances=3, theory_dominance_instances=10,
                           theory_max_dim=5, theory_max_K=2, out_dir=str(tmp_path / "verify"))
    result = run(cfg)
    assert result.status == 0
    assert result.rows[0]["status"] == "ok"
    assert len(read_csv(result.out_dir / "verify.csv")) == 3 * 5 * 2 + 10 + 5


def test_gradcheck_run_status(tmp_path, monkeypatch):
    def subset(h, tolerance, seed):
        return gradcheck.run_checks(h, tolerance, seed, names=["primitive/tanh", "mlp/tanh"])

    monkeypatch.setattr(experiments, "run_checks", subset)
    ok = run(ExperimentConfig(experiment="gradcheck", out_dir=str(tmp_path / "ok")))
    assert ok.status == 0 and ok.rows[0]["checks"] == 2
    assert len(read_csv(ok.out_dir / "gradcheck.csv")) == 2
    failed = run(ExperimentConfig(experiment="gradcheck", gradcheck_tolerance=1e-30, out_dir=str(tmp_path / "bad")))
    assert failed.status == 1
    assert failed.rows[0]["status"] == "failed"


def test_invalid_config_is_rejected_before_running(tmp_path):
    with pytest.raises(ConfigError):
        run(ExperimentConfig(K=0, out_dir=str(tmp_path / "x")))
    assert not (tmp_path / "x").exists()


# ---------------------------------------------------------------------------
# sweeps

def test_grid_points():
    assert grid_points({}) == [{}]
    assert grid_points({"L": [2, 3], "K": [1]}) == [{"L": 2, "K": 1}, {"L": 3, "K": 1}]


def test_sweep_runs_every_point_and_seed(tmp_path):
    template = _cfg(tmp_path, experiment="twocolors-ac", mode="fixed", seeds=(0, 1))
    rows = sweep(template, {"fixed_epsilon": [0.05, 0.2]}, out_dir=str(tmp_path / "sweep"))
    assert len(rows) == 4
    assert all(r["status"] == "ok" for r in rows)
    assert {(r["point"], r["seed"]) for r in rows} == {(0, 0), (0, 1), (1, 0), (1, 1)}
    scores = [r["total_return"] for r in rows]
    assert scores == sorted(scores, reverse=True)
    assert (tmp_path / "sweep" / "point-001" / "summary.csv").exists()
    assert len(read_csv(tmp_path / "sweep" / "sweep_summary.csv")) == 4


def test_sweep_records_failed_points(tmp_path):
    template = _cfg(tmp_path, experiment="twocolors-ac", mode="fixed")
    rows = sweep(template, {"fixed_epsilon": [0.1, 1.5]}, out_dir=str(tmp_path / "sweep"))
    assert [r["status"] for r in rows] == ["ok", "failed"]
    assert rows[1]["point"] == 1 and "fixed_epsilon" in rows[1]["error"]
    assert best_point(rows)["point"] == 0


def test_empty_grid_runs_template_once(tmp_path):
    rows = sweep(_cfg(tmp_path, experiment="twocolors-ac", mode="fixed"), {}, out_dir=str(tmp_path / "sweep"))
    assert len(rows) == 1 and rows[0]["point"] == 0


def test_sweep_rejects_unknown_keys(tmp_path):
    with pytest.raises(ConfigError):
        sweep(_cfg(tmp_path), {"learning_rate": [0.1]})


def test_best_point_averages_seeds():
    rows = [
        {"point": 0, "seed": 0, "status": "ok", "total_return": 10.0},
        {"point": 0, "seed": 1, "status": "ok", "total_return": 0.0},
        {"point": 1, "seed": 0, "status": "ok", "total_return": 6.0},
        {"point": 1, "seed": 1, "status": "ok", "total_return": 6.0},
        {"point": 2, "seed": 0, "status": "failed"},
    ]
    best = best_point(rows)
    assert best["point"] == 1 and best["mean_score"] == 6.0
    assert best_point([{"point": 0, "status": "failed"}]) is None


# ---------------------------------------------------------------------------
# statistics

RECORDS = [
    {"env_step": 2, "epsilon": 0.2, "policy_entropy": 1.3},
    {"env_step": 5, "epsilon": 0.1, "policy_entropy": 1.2},
    {"env_step": 10, "epsilon": 0.3, "policy_entropy": 0.7},
    {"env_step": 15, "epsilon": 0.5, "policy_entropy": 1.1},
    {"env_step": 20, "epsilon": 0.6, "policy_entropy": 0.4},
]


def test_epsilon_range_uses_late_cycles():
    assert epsilon_range(RECORDS, 10) == pytest.approx(0.1)
    assert epsilon_range(RECORDS, 10, late_fraction=1.0) == pytest.approx(0.15)
    assert math.isnan(epsilon_range([], 10))


def test_flip_response():
    assert flip_response(RECORDS, 10, window=5) == pytest.approx(0.5 - 0.3)
    assert math.isnan(flip_response(RECORDS, 100))


def test_entropy_range():
    # cycle 0: entropy at step 5 minus at step 10; cycle 1 has no earlier record
    assert entropy_range(RECORDS, 10, offset=3) == pytest.approx(1.2 - 0.7)


def test_welch_greater():
    t, p = welch_greater([5.0, 6.0, 7.0, 8.0], [1.0, 2.0, 3.0, 2.0])
    assert t > 0 and p < 0.01
    _, p_rev = welch_greater([1.0, 2.0, 3.0, 2.0], [5.0, 6.0, 7.0, 8.0])
    assert p_rev > 0.5


def test_online_bmg_loop_streams_cycles(tmp_path):
    cfg = _cfg(tmp_path, experiment="twocolors-ac", mode="fixed")
    records = list(online_bmg_loop(cfg, 0))
    # each cycle consumes K + L - 1 rollouts
    assert [r["env_step"] for r in records] == [16, 32, 48, 64]
    assert all(r["matching_loss"] is not None for r in records)


def test_nan_loss_leaves_an_abort_record(tmp_path, monkeypatch):
    calls = []
    loss_fn = learners.actor_critic_loss

    def poisoned(*args, **kw):
        calls.append(1)
        loss = loss_fn(*args, **kw)
        return loss * float("nan") if len(calls) == 3 else loss

    monkeypatch.setattr(learners, "actor_critic_loss", poisoned)
    with pytest.raises(NumericError):
        run(_cfg(tmp_path, experiment="twocolors-ac", mode="fixed"))
    header, *records, abort = read_jsonl(tmp_path / "run" / "seed-0" / "metrics.jsonl")
    assert header["type"] == "header"
    assert [r["env_step"] for r in records] == [8, 16]
    assert abort["type"] == "abort" and abort["site"] == "actor_critic_loss"
    assert abort["env_step"] == 16 and "nan" in abort["value"]


def test_frozen_meta_net_matches_fixed_half_epsilon(tmp_path):
    fixed = run(_cfg(tmp_path, experiment="twocolors-ac", mode="fixed", fixed_epsilon=0.5,
                     out_dir=str(tmp_path / "fixed")))
    frozen = run(_cfg(tmp_path, experiment="twocolors-ac", mode="bmg", meta_lr=0.0, meta_zero_init=True,
                      out_dir=str(tmp_path / "bmg")))
    by_step = {r["env_step"]: r["total_return"] for r in read_jsonl(fixed.out_dir / "seed-0" / "metrics.jsonl")[1:]}
    records = read_jsonl(frozen.out_dir / "seed-0" / "metrics.jsonl")[1:]
    assert all(r["epsilon"] == 0.5 for r in records)
    assert [r["total_return"] for r in records] == [by_step[r["env_step"]] for r in records]
    assert frozen.rows[0]["total_return"] == fixed.rows[0]["total_return"]
