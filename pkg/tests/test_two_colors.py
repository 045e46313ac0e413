import json

import numpy as np
import pytest
from scipy.stats import chisquare

from metaboot.TwoColorsEnv import (
    GRID,
    ITEM_REWARD,
    OBS_DIM,
    STEP_REWARD,
    EnvState,
    TrajectoryWriter,
    TwoColorsEnv,
    decode_obs,
    encode_obs,
    reset,
    step,
)


def _state(agent, blue, red, step_count=0, flip_period=100_000, sign=1, seed=0):
    return EnvState(agent, blue, red, step_count, flip_period, sign, np.random.default_rng(seed))


def test_reset_places_three_distinct_cells():
    for seed in range(20):
        state, obs = reset(seed)
        assert len({state.agent_pos, state.blue_pos, state.red_pos}) == 3
        assert obs.shape == (OBS_DIM,)
        assert obs.sum() == 6.0
        assert decode_obs(obs) == (state.agent_pos, state.blue_pos, state.red_pos)


def test_reset_marginals_are_uniform():
    rng = np.random.default_rng(2024)
    n = 100_000
    counts = np.zeros((3, GRID * GRID))
    for _ in range(n):
        state, _ = reset(rng)
        for i, (r, c) in enumerate((state.agent_pos, state.blue_pos, state.red_pos)):
            counts[i, r * GRID + c] += 1
    # one test per marginal; 0.01 overall
    for row in counts:
        assert chisquare(row).pvalue > 0.01 / 3


def test_reset_is_deterministic_per_seed():
    a, _ = reset(7)
    b, _ = reset(7)
    assert (a.agent_pos, a.blue_pos, a.red_pos) == (b.agent_pos, b.blue_pos, b.red_pos)


def test_walls_clip_movement():
    state = _state((0, 0), (4, 4), (3, 3))
    nxt, _, reward = step(state, "up")
    assert nxt.agent_pos == (0, 0)
    assert reward == STEP_REWARD
    nxt, _, _ = step(state, "right")
    assert nxt.agent_pos == (0, 1)


def test_collecting_items_and_respawn():
    state = _state((2, 2), (2, 3), (0, 0))
    nxt, _, reward = step(state, "right")
    assert reward == ITEM_REWARD
    assert nxt.blue_pos not in (nxt.agent_pos, nxt.red_pos)
    state = _state((2, 2), (4, 4), (1, 2))
    nxt, _, reward = step(state, "up")
    assert reward == -ITEM_REWARD
    assert nxt.red_pos not in (nxt.agent_pos, nxt.blue_pos)


def test_flip_applies_on_the_boundary_step():
    state = _state((2, 2), (2, 3), (0, 0), step_count=9, flip_period=10)
    nxt, _, reward = step(state, "right")
    assert nxt.step_count == 10
    assert nxt.blue_reward_sign == -1
    assert reward == -ITEM_REWARD


def test_signs_swap_every_period():
    state, _ = reset(3, flip_period=5)
    signs = []
    for _ in range(20):
        state, _, _ = step(state, 0)
        signs.append(state.blue_reward_sign)
    assert signs[3] == 1 and signs[4] == -1 and signs[9] == 1 and signs[14] == -1


def test_invalid_actions():
    state, _ = reset(0)
    with pytest.raises(ValueError):
        step(state, 4)
    with pytest.raises(ValueError):
        step(state, "jump")
    with pytest.raises(ValueError):
        reset(0, flip_period=0)


def test_decode_rejects_bad_observation():
    with pytest.raises(ValueError):
        decode_obs(np.zeros(OBS_DIM))


def test_encode_layout():
    obs = encode_obs(_state((1, 2), (3, 4), (0, 0)))
    blocks = obs.reshape(6, GRID)
    assert blocks.argmax(axis=1).tolist() == [1, 2, 3, 4, 0, 0]


def test_trajectory_writer(tmp_path):
    path = tmp_path / "traj.jsonl"
    with TrajectoryWriter(path) as rec:
        env = TwoColorsEnv(0, recorder=rec)
        for a in (0, 1, 2, 3):
            env.step(a)
    header, *lines = [json.loads(ln) for ln in path.read_text().splitlines()]
    assert header == {"type": "header"}
    assert [ln["step"] for ln in lines] == [1, 2, 3, 4]
    assert [ln["action"] for ln in lines] == [0, 1, 2, 3]
    assert env.step_count == 4
