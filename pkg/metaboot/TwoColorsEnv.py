from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import IO, Any, Mapping, Optional, Tuple, Union

import numpy as np

_LOGGER = logging.getLogger("two-colors")

GRID = 5
N_ACTIONS = 4
ACTIONS = ("up", "down", "left", "right")
OBS_DIM = 6 * GRID
STEP_REWARD = -0.04
ITEM_REWARD = 1.0
DEFAULT_FLIP_PERIOD = 100_000

_MOVES = {0: (-1, 0), 1: (1, 0), 2: (0, -1), 3: (0, 1)}

Pos = Tuple[int, int]


@dataclass(frozen=True)
class EnvState:
    """Full state of the two-colors grid.

    blue_reward_sign is +1 at reset: collecting blue pays +1 and red pays -1
    until the first flip, after which both signs swap.
    """
    agent_pos: Pos
    blue_pos: Pos
    red_pos: Pos
    step_count: int = 0
    flip_period: int = DEFAULT_FLIP_PERIOD
    blue_reward_sign: int = 1
    rng: np.random.Generator = field(default_factory=np.random.default_rng, compare=False, repr=False)


def _cell(index: int) -> Pos:
    return (index // GRID, index % GRID)


def _free_cell(rng: np.random.Generator, *occupied: Pos) -> Pos:
    taken = {r * GRID + c for r, c in occupied}
    free = [i for i in range(GRID * GRID) if i not in taken]
    return _cell(free[int(rng.integers(len(free)))])


def encode_obs(state: EnvState) -> np.ndarray:
    """One-hot rows/cols: agent row, agent col, blue row, blue col, red row, red col."""
    obs = np.zeros(OBS_DIM)
    for block, (r, c) in enumerate((state.agent_pos, state.blue_pos, state.red_pos)):
        obs[2 * block * GRID + r] = 1.0
        obs[(2 * block + 1) * GRID + c] = 1.0
    return obs


def decode_obs(obs: np.ndarray) -> Tuple[Pos, Pos, Pos]:
    blocks = np.asarray(obs).reshape(6, GRID)
    if not np.all(blocks.sum(axis=1) == 1.0):
        raise ValueError("observation blocks must each be one-hot")
    idx = blocks.argmax(axis=1)
    return ((int(idx[0]), int(idx[1])), (int(idx[2]), int(idx[3])), (int(idx[4]), int(idx[5])))


def reset(seed: Union[int, np.random.Generator, None], flip_period: int = DEFAULT_FLIP_PERIOD) -> Tuple[EnvState, np.ndarray]:
    if flip_period < 1:
        raise ValueError("flip_period must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    cells = rng.choice(GRID * GRID, size=3, replace=False)
    state = EnvState(
        agent_pos=_cell(int(cells[0])),
        blue_pos=_cell(int(cells[1])),
        red_pos=_cell(int(cells[2])),
        step_count=0,
        flip_period=flip_period,
        blue_reward_sign=1,
        rng=rng,
    )
    return state, encode_obs(state)


def _action_index(action: Union[int, str]) -> int:
    if isinstance(action, str):
        if action not in ACTIONS:
            raise ValueError(f"unknown action {action!r}; expected one of {ACTIONS}")
        return ACTIONS.index(action)
    a = int(action)
    if a not in _MOVES:
        raise ValueError(f"action must be in 0..{N_ACTIONS - 1}, got {action!r}")
    return a


def step(state: EnvState, action: Union[int, str]) -> Tuple[EnvState, np.ndarray, float]:
    """Advance one step. The sign flip is applied before the step's reward.

    The step that brings step_count to a multiple of flip_period already
    pays with the swapped signs.
    """
    dr, dc = _MOVES[_action_index(action)]
    r, c = state.agent_pos
    agent = (min(max(r + dr, 0), GRID - 1), min(max(c + dc, 0), GRID - 1))

    count = state.step_count + 1
    sign = state.blue_reward_sign
    if count % state.flip_period == 0:
        sign = -sign
        _LOGGER.debug("Reward signs flipped at step %d (blue now %+d)", count, sign)

    blue, red = state.blue_pos, state.red_pos
    reward = STEP_REWARD
    if agent == blue:
        reward = ITEM_REWARD * sign
        blue = _free_cell(state.rng, agent, red)
    elif agent == red:
        reward = -ITEM_REWARD * sign
        red = _free_cell(state.rng, agent, blue)

    nxt = replace(state, agent_pos=agent, blue_pos=blue, red_pos=red, step_count=count, blue_reward_sign=sign)
    return nxt, encode_obs(nxt), reward


class TrajectoryWriter:
    """Optional JSONL dump: one line per step with positions, action, reward.

    The first line is a header record (``type = "header"``) carrying
    ``header``, normally the resolved configuration and code version.
    """

    def __init__(self, path: Union[str, Path], header: Optional[Mapping[str, Any]] = None) -> None:
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh: Optional[IO[str]] = open(self.path, "w", encoding="utf-8")
        self._fh.write(json.dumps({"type": "header", **(header or {})}, sort_keys=True) + "\n")

    def write(self, state: EnvState, action: int, reward: float) -> None:
        if self._fh is None:
            return
        rec = {
            "step": state.step_count,
            "agent": list(state.agent_pos),
            "blue": list(state.blue_pos),
            "red": list(state.red_pos),
            "action": int(action),
            "reward": reward,
        }
        self._fh.write(json.dumps(rec) + "\n")

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def __enter__(self) -> "TrajectoryWriter":
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()


class TwoColorsEnv:
    """Stateful wrapper around reset/step for the learners."""

    def __init__(self, seed: Union[int, np.random.Generator, None], flip_period: int = DEFAULT_FLIP_PERIOD,
                 recorder: Optional[TrajectoryWriter] = None) -> None:
        self.state, self.obs = reset(seed, flip_period)
        self.recorder = recorder

    @property
    def step_count(self) -> int:
        return self.state.step_count

    def step(self, action: int) -> Tuple[np.ndarray, float]:
        self.state, self.obs, reward = step(self.state, action)
        if self.recorder is not None:
            self.recorder.write(self.state, action, reward)
        return self.obs, reward
