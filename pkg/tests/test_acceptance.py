"""Desk-scale reproductions of the two-colors and multi-task results.

These take hours on a CPU; run them with METABOOT_SLOW=1.
"""
import numpy as np
import pytest

from metaboot.config import ENTROPY_SWEEP, EPSILON_SWEEP, load_config
from metaboot.experiments import run, welch_greater

pytestmark = pytest.mark.slow

ALPHA = 0.05


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    cache = {}

    def get(preset, **changes):
        key = (preset, tuple(sorted(changes.items())))
        if key not in cache:
            out = tmp_path_factory.mktemp(preset)
            cfg = load_config(preset=preset).replace(out_dir=str(out), **changes)
            result = run(cfg)
            assert result.status == 0
            cache[key] = result.rows
        return cache[key]
    return get


def _returns(rows):
    return [r["total_return"] for r in rows]


def _best_fixed(runs, preset, field, values):
    sweeps = [_returns(runs(preset, mode="fixed", **{field: v})) for v in values]
    return max(sweeps, key=np.mean)


def test_ac_bmg_beats_best_fixed_entropy(runs):
    baseline = _best_fixed(runs, "desk-ac", "fixed_epsilon", ENTROPY_SWEEP)
    bmg = _returns(runs("desk-ac", mode="bmg", K=1, L=7, eps_meta=0.0))
    _, p = welch_greater(bmg, baseline)
    assert p < ALPHA


def test_ac_mg_without_entropy_in_meta_objective_does_not_beat_fixed(runs):
    baseline = _best_fixed(runs, "desk-ac", "fixed_epsilon", ENTROPY_SWEEP)
    for K in (1, 8):
        mg = _returns(runs("desk-ac", mode="mg", K=K, eps_meta=0.0))
        _, p = welch_greater(mg, baseline)
        assert p >= ALPHA


def test_ac_bmg_matches_or_beats_regularised_mg(runs):
    bmg = _returns(runs("desk-ac", mode="bmg", K=1, L=7, eps_meta=0.0))
    mg = _returns(runs("desk-ac", mode="mg", K=8, eps_meta=0.1))
    _, p = welch_greater(mg, bmg)
    assert p >= ALPHA


def test_q_bmg_beats_best_fixed_epsilon_and_reacts_to_flips(runs):
    baseline = _best_fixed(runs, "desk-q", "fixed_epsilon", EPSILON_SWEEP)
    rows = runs("desk-q", mode="bmg", L=4, q_matching="policy")
    _, p = welch_greater(_returns(rows), baseline)
    assert p < ALPHA
    assert np.nanmean([r["flip_response"] for r in rows]) > 0.0


def test_bmg_entropy_schedule_keeps_its_range(runs):
    bmg = runs("desk-ac", mode="bmg", K=1, L=7, eps_meta=0.0)
    mg = runs("desk-ac", mode="mg", K=1, eps_meta=0.0)
    assert np.mean([r["epsilon_range"] for r in bmg]) >= 2.0 * np.mean([r["epsilon_range"] for r in mg])


def test_multitask_improves_on_untrained_init(runs):
    for mode, K, L in (("mg", 5, 1), ("bmg", 1, 5)):
        rows = runs("multitask-default", mode=mode, K=K, L=L)
        gain = np.mean([r["final_accuracy"] - r["baseline_accuracy"] for r in rows])
        assert gain >= 0.10, (mode, gain)


def test_multitask_bmg_one_step_matches_mg_five_steps(runs):
    bmg = runs("multitask-default", mode="bmg", K=1, L=5)
    mg = runs("multitask-default", mode="mg", K=5, L=1)
    gap = np.mean([r["final_accuracy"] for r in bmg]) - np.mean([r["final_accuracy"] for r in mg])
    assert abs(gap) <= 0.02
